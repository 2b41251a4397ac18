//! Implicit domains `{phi < 0}` and numerical probes of their geometry.
//!
//! The probes here are falsifiable checks on finite boundary samples: a passing
//! gauge-ball probe means no violation was found among the samples, nothing more.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::{BallSide, ModelPotentialSpec, PExponent};
use crate::heis::{self, AmbientParams, FullVector, Point};

/// Bisection target for boundary points.
pub const BOUNDARY_PHI_TOL: f64 = 1e-10;

/// Margin below which a probe sample counts as a violation.
pub const PROBE_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DomainKind {
    /// `rho(c^{-1} z)^4 - R^4`.
    GaugeBall { center: Point, radius: f64 },
    /// `(sum x_i^2 + y_i^2)^2 + a t^2 - R^4`, centered at the origin.
    AnisotropicGauge { a: f64, radius: f64 },
    /// `|z - c|^2 - R^2`.
    EuclideanBall { center: Point, radius: f64 },
    /// `phi_base(delta_{-lambda} z)`.
    Dilated { base: Box<DomainKind>, lambda: f64 },
}

/// A bounded open set given by a smooth defining function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DomainRepr", into = "DomainRepr")]
pub struct ImplicitDomain {
    n: usize,
    kind: DomainKind,
}

#[derive(Serialize, Deserialize)]
struct DomainRepr {
    n: usize,
    #[serde(flatten)]
    kind: DomainKind,
}

impl TryFrom<DomainRepr> for ImplicitDomain {
    type Error = Error;
    fn try_from(r: DomainRepr) -> Result<Self> {
        ImplicitDomain::from_kind(r.n, r.kind)
    }
}

impl From<ImplicitDomain> for DomainRepr {
    fn from(d: ImplicitDomain) -> Self {
        DomainRepr { n: d.n, kind: d.kind }
    }
}

fn check_point(n: usize, p: &Point) -> Result<()> {
    if p.n() != n {
        return Err(Error::DimensionMismatch { expected: n, found: p.n() });
    }
    Ok(())
}

fn positive(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
    }
    Ok(())
}

pub fn make_gauge_ball(center: Point, radius: f64) -> Result<ImplicitDomain> {
    positive("radius", radius)?;
    Ok(ImplicitDomain { n: center.n(), kind: DomainKind::GaugeBall { center, radius } })
}

pub fn make_anisotropic_gauge(params: AmbientParams, a: f64, radius: f64) -> Result<ImplicitDomain> {
    positive("anisotropy a", a)?;
    positive("radius", radius)?;
    Ok(ImplicitDomain { n: params.n(), kind: DomainKind::AnisotropicGauge { a, radius } })
}

pub fn make_euclidean_ball(center: Point, radius: f64) -> Result<ImplicitDomain> {
    positive("radius", radius)?;
    Ok(ImplicitDomain { n: center.n(), kind: DomainKind::EuclideanBall { center, radius } })
}

fn validate_kind(n: usize, kind: &DomainKind) -> Result<()> {
    match kind {
        DomainKind::GaugeBall { center, radius } | DomainKind::EuclideanBall { center, radius } => {
            check_point(n, center)?;
            positive("radius", *radius)
        }
        DomainKind::AnisotropicGauge { a, radius } => {
            positive("anisotropy a", *a)?;
            positive("radius", *radius)
        }
        DomainKind::Dilated { base, lambda } => {
            if !lambda.is_finite() {
                return Err(Error::NonFinite("dilation parameter"));
            }
            validate_kind(n, base)
        }
    }
}

fn phi_kind(kind: &DomainKind, z: &[f64], scratch: &mut [f64]) -> f64 {
    match kind {
        DomainKind::GaugeBall { center, radius } => {
            heis::left_translate_inverse(center.coords(), z, scratch);
            heis::rho4(scratch) - radius.powi(4)
        }
        DomainKind::AnisotropicGauge { a, radius } => {
            let last = z.len() - 1;
            let s: f64 = z[..last].iter().map(|c| c * c).sum();
            s * s + a * z[last] * z[last] - radius.powi(4)
        }
        DomainKind::EuclideanBall { center, radius } => {
            let d2: f64 = z.iter().zip(center.coords()).map(|(a, b)| (a - b) * (a - b)).sum();
            d2 - radius * radius
        }
        DomainKind::Dilated { base, lambda } => {
            let mut w = z.to_vec();
            heis::dilate_in_place(&mut w, -lambda);
            phi_kind(base, &w, scratch)
        }
    }
}

fn gradient_kind(kind: &DomainKind, z: &[f64], out: &mut [f64]) {
    let last = z.len() - 1;
    match kind {
        DomainKind::GaugeBall { center, .. } => {
            let mut v = vec![0.0; z.len()];
            heis::left_translate_inverse(center.coords(), z, &mut v);
            let mut g = vec![0.0; z.len()];
            heis::rho4_gradient_into(&v, &mut g);
            heis::pullback_left_inverse(center.coords(), &g, out);
        }
        DomainKind::AnisotropicGauge { a, .. } => {
            let s: f64 = z[..last].iter().map(|c| c * c).sum();
            for k in 0..last {
                out[k] = 4.0 * s * z[k];
            }
            out[last] = 2.0 * a * z[last];
        }
        DomainKind::EuclideanBall { center, .. } => {
            for (k, o) in out.iter_mut().enumerate() {
                *o = 2.0 * (z[k] - center.coords()[k]);
            }
        }
        DomainKind::Dilated { base, lambda } => {
            let mut w = z.to_vec();
            heis::dilate_in_place(&mut w, -lambda);
            gradient_kind(base, &w, out);
            let e = (-lambda).exp();
            for o in &mut out[..last] {
                *o *= e;
            }
            out[last] *= e * e;
        }
    }
}

fn bbox_kind(n: usize, kind: &DomainKind) -> (Vec<f64>, Vec<f64>) {
    let dim = 2 * n + 1;
    match kind {
        DomainKind::GaugeBall { center, radius } => {
            let c = center.coords();
            let r = *radius;
            let mut lo = vec![0.0; dim];
            let mut hi = vec![0.0; dim];
            let mut twist = 0.0;
            for i in 0..n {
                twist += (c[i] * c[i] + c[n + i] * c[n + i]).sqrt();
            }
            for k in 0..2 * n {
                lo[k] = c[k] - r;
                hi[k] = c[k] + r;
            }
            let dt = r * r + 2.0 * r * twist;
            lo[2 * n] = c[2 * n] - dt;
            hi[2 * n] = c[2 * n] + dt;
            (lo, hi)
        }
        DomainKind::AnisotropicGauge { a, radius } => {
            let mut hi = vec![*radius; dim];
            hi[2 * n] = radius * radius / a.sqrt();
            let lo = hi.iter().map(|v| -v).collect();
            (lo, hi)
        }
        DomainKind::EuclideanBall { center, radius } => (
            center.coords().iter().map(|c| c - radius).collect(),
            center.coords().iter().map(|c| c + radius).collect(),
        ),
        DomainKind::Dilated { base, lambda } => {
            let (mut lo, mut hi) = bbox_kind(n, base);
            heis::dilate_in_place(&mut lo, *lambda);
            heis::dilate_in_place(&mut hi, *lambda);
            (lo, hi)
        }
    }
}

impl ImplicitDomain {
    pub fn from_kind(n: usize, kind: DomainKind) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter("n must be at least 1".into()));
        }
        validate_kind(n, &kind)?;
        Ok(ImplicitDomain { n, kind })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn kind(&self) -> &DomainKind {
        &self.kind
    }

    /// Defining function on raw coordinates.
    pub fn phi_coords(&self, z: &[f64]) -> f64 {
        let mut buf = [0.0; 9];
        if z.len() <= buf.len() {
            phi_kind(&self.kind, z, &mut buf[..z.len()])
        } else {
            let mut v = vec![0.0; z.len()];
            phi_kind(&self.kind, z, &mut v)
        }
    }

    pub fn phi(&self, z: &Point) -> f64 {
        self.phi_coords(z.coords())
    }

    /// Analytic Euclidean gradient of the defining function.
    pub fn gradient_coords(&self, z: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; z.len()];
        gradient_kind(&self.kind, z, &mut out);
        out
    }

    pub fn gradient(&self, z: &Point) -> FullVector {
        FullVector(self.gradient_coords(z.coords()))
    }

    /// Axis-aligned box containing the closure of the domain.
    pub fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        bbox_kind(self.n, &self.kind)
    }

    /// Whether the domain is a gauge ball centered at the origin; returns its radius.
    pub fn origin_gauge_radius(&self) -> Option<f64> {
        match &self.kind {
            DomainKind::GaugeBall { center, radius } if center.is_origin() => Some(*radius),
            _ => None,
        }
    }
}

pub fn contains(d: &ImplicitDomain, z: &Point) -> bool {
    d.phi(z) < 0.0
}

/// Image of the domain under `delta_lambda`.
pub fn dilate_domain(d: &ImplicitDomain, lambda: f64) -> ImplicitDomain {
    if lambda == 0.0 {
        return d.clone();
    }
    let e = lambda.exp();
    let kind = match &d.kind {
        DomainKind::GaugeBall { center, radius } => {
            DomainKind::GaugeBall { center: heis::dilate_point(center, lambda), radius: e * radius }
        }
        DomainKind::AnisotropicGauge { a, radius } => DomainKind::AnisotropicGauge { a: *a, radius: e * radius },
        DomainKind::Dilated { base, lambda: mu } => DomainKind::Dilated { base: base.clone(), lambda: mu + lambda },
        other => DomainKind::Dilated { base: Box::new(other.clone()), lambda },
    };
    ImplicitDomain { n: d.n, kind }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundarySample {
    pub point: Point,
    /// Unit Euclidean outward normal.
    pub outward_normal: FullVector,
}

/// Controls for [`boundary_sample_with`].
#[derive(Clone, Debug)]
pub struct SamplingOptions {
    pub anchor: Point,
    /// Seeds the direction jitter; `None` gives the plain lattice.
    pub seed: Option<u64>,
}

impl SamplingOptions {
    pub fn at_origin(n: usize) -> Self {
        SamplingOptions { anchor: Point::origin(n), seed: None }
    }
}

/// Quasi-uniform unit directions in `R^dim`.
fn directions(dim: usize, count: usize, seed: Option<u64>) -> Vec<Vec<f64>> {
    if dim == 3 {
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        let phase = match seed {
            Some(s) => ChaCha8Rng::seed_from_u64(s).random::<f64>() * std::f64::consts::TAU,
            None => 0.0,
        };
        (0..count)
            .map(|k| {
                let z = 1.0 - 2.0 * (k as f64 + 0.5) / count as f64;
                let r = (1.0 - z * z).max(0.0).sqrt();
                let a = golden * k as f64 + phase;
                vec![r * a.cos(), r * a.sin(), z]
            })
            .collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(0));
        (0..count)
            .map(|_| loop {
                // Box-Muller pairs; rejection on the degenerate zero vector
                let v: Vec<f64> = (0..dim)
                    .map(|_| {
                        let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
                        let u2: f64 = rng.random();
                        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
                    })
                    .collect();
                let norm = v.iter().map(|c| c * c).sum::<f64>().sqrt();
                if norm > 1e-12 {
                    break v.into_iter().map(|c| c / norm).collect();
                }
            })
            .collect()
    }
}

const RAY_SCAN_STEPS: usize = 256;

fn cast_ray(d: &ImplicitDomain, anchor: &[f64], dir: &[f64], reach: f64, index: usize) -> Result<Vec<f64>> {
    let at = |s: f64| -> Vec<f64> { anchor.iter().zip(dir).map(|(a, u)| a + s * u).collect() };
    let mut crossings = 0;
    let mut bracket = None;
    let mut prev = d.phi_coords(anchor);
    let mut prev_s = 0.0;
    for k in 1..=RAY_SCAN_STEPS {
        let s = reach * k as f64 / RAY_SCAN_STEPS as f64;
        let cur = d.phi_coords(&at(s));
        if (prev < 0.0) != (cur < 0.0) {
            crossings += 1;
            if bracket.is_none() {
                bracket = Some((prev_s, s));
            }
        }
        prev = cur;
        prev_s = s;
    }
    let (mut lo, mut hi) = match (crossings, bracket) {
        (1, Some(b)) => b,
        _ => return Err(Error::RayBracket { index, crossings }),
    };
    let mut best = at(hi);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let z = at(mid);
        let f = d.phi_coords(&z);
        if f < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        best = z;
        if f.abs() <= BOUNDARY_PHI_TOL || hi - lo <= f64::EPSILON * hi.max(1.0) {
            break;
        }
    }
    Ok(best)
}

fn normal_at(d: &ImplicitDomain, z: &[f64]) -> Result<FullVector> {
    let g = d.gradient_coords(z);
    let norm = g.iter().map(|c| c * c).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return Err(Error::InvalidParameter("defining function has a critical point on the boundary".into()));
    }
    Ok(FullVector(g.into_iter().map(|c| c / norm).collect()))
}

pub fn boundary_sample(d: &ImplicitDomain, count: usize) -> Result<Vec<BoundarySample>> {
    boundary_sample_with(d, count, &SamplingOptions::at_origin(d.n))
}

/// Ray-casts from the anchor along `count` directions and bisects each ray onto `phi = 0`.
pub fn boundary_sample_with(d: &ImplicitDomain, count: usize, opts: &SamplingOptions) -> Result<Vec<BoundarySample>> {
    if count == 0 {
        return Err(Error::InvalidParameter("sample count must be at least 1".into()));
    }
    check_point(d.n, &opts.anchor)?;
    let phi0 = d.phi(&opts.anchor);
    if phi0 >= 0.0 {
        return Err(Error::OriginOutside(phi0));
    }
    let (lo, hi) = d.bounding_box();
    let anchor = opts.anchor.coords();
    let reach = 1.5
        * lo.iter()
            .zip(&hi)
            .zip(anchor)
            .map(|((l, h), a)| (a - l).abs().max((h - a).abs()).powi(2))
            .sum::<f64>()
            .sqrt()
        + 1e-9;
    let dirs = directions(d.n * 2 + 1, count, opts.seed);
    dirs.par_iter()
        .enumerate()
        .map(|(k, dir)| {
            let z = cast_ray(d, anchor, dir, reach, k)?;
            let outward_normal = normal_at(d, &z)?;
            Ok(BoundarySample { point: Point::from_coords(z)?, outward_normal })
        })
        .collect()
}

/// Empirical `K = min <nu, Z>` over boundary samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StarshapednessReport {
    pub min_pairing: f64,
    pub argmin: Point,
    pub sample_count: usize,
}

impl StarshapednessReport {
    /// Strictly positive minimum: strict starshapedness on the samples.
    pub fn pass(&self) -> bool {
        self.min_pairing > 0.0
    }

    /// Minimum of `<normal, Z(point)>` over a list of points with normals.
    pub fn from_pairs<'a>(pairs: impl Iterator<Item = (&'a [f64], &'a [f64])>) -> Option<Self> {
        let mut best: Option<(f64, &[f64])> = None;
        let mut count = 0;
        for (z, nu) in pairs {
            count += 1;
            let last = z.len() - 1;
            let pairing: f64 = (0..last).map(|k| nu[k] * z[k]).sum::<f64>() + 2.0 * nu[last] * z[last];
            if best.is_none_or(|(b, _)| pairing < b) {
                best = Some((pairing, z));
            }
        }
        let (min_pairing, z) = best?;
        Some(StarshapednessReport {
            min_pairing,
            argmin: Point::from_coords(z.to_vec()).ok()?,
            sample_count: count,
        })
    }
}

pub fn starshapedness_report(d: &ImplicitDomain, count: usize) -> Result<StarshapednessReport> {
    starshapedness_report_with(d, count, &SamplingOptions::at_origin(d.n))
}

pub fn starshapedness_report_with(
    d: &ImplicitDomain,
    count: usize,
    opts: &SamplingOptions,
) -> Result<StarshapednessReport> {
    let origin = Point::origin(d.n);
    let phi0 = d.phi(&origin);
    if phi0 >= 0.0 {
        return Err(Error::OriginOutside(phi0));
    }
    let samples = boundary_sample_with(d, count, opts)?;
    StarshapednessReport::from_pairs(samples.iter().map(|s| (s.point.coords(), s.outward_normal.as_slice())))
        .ok_or(Error::InvalidParameter("no boundary samples".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSample {
    pub point: Point,
    pub center: Option<Point>,
    /// `min_w rho(c^{-1} w) - R` over the other boundary samples; NaN when the center search failed.
    pub margin: f64,
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaugeBallProbeReport {
    pub side: BallSide,
    pub radius: f64,
    pub worst_violation: f64,
    pub pass: bool,
    pub samples: Vec<ProbeSample>,
}

/// Finds `c` with `z` on `dB(c, R)` and the sphere's outward normal at `z`
/// parallel to `nu` (same direction for interior balls, opposite for exterior).
///
/// Unknowns are `v = c^{-1} z` and a multiplier `k`:
/// `rho^4(v) = R^4`, `pullback_c(grad rho^4(v)) = k nu`, `sign(k)` fixed by the side.
fn tangent_center(z: &[f64], nu: &[f64], radius: f64, side: BallSide) -> std::result::Result<Vec<f64>, String> {
    let dim = z.len();
    let n = dim / 2;
    let sigma = match side {
        BallSide::Interior => 1.0,
        BallSide::Exterior => -1.0,
    };
    let r4 = radius.powi(4);
    let center_of = |v: &[f64]| -> Vec<f64> {
        let mut c = vec![0.0; dim];
        let vinv: Vec<f64> = v.iter().map(|x| -x).collect();
        heis::product_into(z, &vinv, &mut c);
        c
    };
    let residual = |unk: &[f64]| -> Vec<f64> {
        let v = &unk[..dim];
        let k = unk[dim];
        let c = center_of(v);
        let mut g = vec![0.0; dim];
        heis::rho4_gradient_into(v, &mut g);
        let mut pulled = vec![0.0; dim];
        heis::pullback_left_inverse(&c, &g, &mut pulled);
        let scale = 4.0 * radius.powi(3);
        let mut res: Vec<f64> = (0..dim).map(|i| (pulled[i] - k * nu[i]) / scale).collect();
        res.push(heis::rho4(v) / r4 - 1.0);
        res
    };

    // Euclidean-like first guess, then pushed onto the gauge sphere by dilation.
    let mut c0 = z.to_vec();
    for i in 0..2 * n {
        c0[i] -= sigma * radius * nu[i];
    }
    c0[2 * n] -= sigma * radius * radius * nu[2 * n];
    let mut v0 = vec![0.0; dim];
    heis::left_translate_inverse(&c0, z, &mut v0);
    let rv = heis::rho4(&v0).sqrt().sqrt();
    if rv > 0.0 {
        heis::dilate_in_place(&mut v0, (radius / rv).ln());
    }
    let mut unk = v0.clone();
    {
        let c = center_of(&v0);
        let mut g = vec![0.0; dim];
        heis::rho4_gradient_into(&v0, &mut g);
        let mut pulled = vec![0.0; dim];
        heis::pullback_left_inverse(&c, &g, &mut pulled);
        unk.push(pulled.iter().zip(nu).map(|(a, b)| a * b).sum());
    }

    let norm = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut res = residual(&unk);
    let mut rn = norm(&res);
    for _ in 0..100 {
        if rn < 1e-13 {
            break;
        }
        let m = dim + 1;
        let mut jac = DMatrix::<f64>::zeros(m, m);
        for j in 0..m {
            let h = 1e-7 * unk[j].abs().max(radius);
            let mut plus = unk.clone();
            plus[j] += h;
            let mut minus = unk.clone();
            minus[j] -= h;
            let (rp, rm) = (residual(&plus), residual(&minus));
            for i in 0..m {
                jac[(i, j)] = (rp[i] - rm[i]) / (2.0 * h);
            }
        }
        let rhs = DVector::from_iterator(m, res.iter().map(|x| -x));
        let Some(step) = jac.lu().solve(&rhs) else {
            return Err("singular tangency Jacobian".into());
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let trial: Vec<f64> = unk.iter().zip(step.iter()).map(|(u, s)| u + t * s).collect();
            let r = residual(&trial);
            let n2 = norm(&r);
            if n2 < rn {
                unk = trial;
                res = r;
                rn = n2;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if rn > 1e-9 {
        return Err(format!("tangency solve did not converge (residual {rn:e})"));
    }
    let k = unk[dim];
    if k * sigma <= 0.0 {
        return Err("tangent ball found on the wrong side".into());
    }
    Ok(center_of(&unk[..dim]))
}

fn probe_from_samples(
    d: &ImplicitDomain,
    samples: &[BoundarySample],
    side: BallSide,
    radius: f64,
) -> GaugeBallProbeReport {
    let results: Vec<ProbeSample> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let z = s.point.coords();
            match tangent_center(z, s.outward_normal.as_slice(), radius, side) {
                Err(msg) => ProbeSample { point: s.point.clone(), center: None, margin: f64::NAN, failure: Some(msg) },
                Ok(c) => {
                    let phi_c = d.phi_coords(&c);
                    let wrong_side = match side {
                        BallSide::Interior => phi_c >= 0.0,
                        BallSide::Exterior => phi_c <= 0.0,
                    };
                    let mut buf = vec![0.0; c.len()];
                    let margin = samples
                        .iter()
                        .enumerate()
                        .filter(|&(j, _)| j != i)
                        .map(|(_, w)| {
                            heis::left_translate_inverse(&c, w.point.coords(), &mut buf);
                            heis::rho4(&buf).sqrt().sqrt() - radius
                        })
                        .fold(f64::INFINITY, f64::min);
                    let center = Point::from_coords(c).ok();
                    let failure = wrong_side.then(|| "center on the wrong side of the boundary".to_string());
                    ProbeSample { point: s.point.clone(), center, margin, failure }
                }
            }
        })
        .collect();
    let mut worst = f64::INFINITY;
    let mut pass = true;
    for r in &results {
        if r.failure.is_some() || r.margin.is_nan() {
            pass = false;
            continue;
        }
        worst = worst.min(r.margin);
    }
    if worst < -PROBE_TOL {
        pass = false;
    }
    GaugeBallProbeReport { side, radius, worst_violation: worst, pass, samples: results }
}

/// Tangent gauge-ball probe at `count` boundary samples.
pub fn gauge_ball_probe(d: &ImplicitDomain, side: BallSide, radius: f64, count: usize) -> Result<GaugeBallProbeReport> {
    positive("probe radius", radius)?;
    let samples = boundary_sample(d, count)?;
    Ok(probe_from_samples(d, &samples, side, radius))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowEntryReport {
    pub side: BallSide,
    pub radius: f64,
    /// Per-sample `lambda_bar`, capped at 1.
    pub lambda_bar: Vec<f64>,
    pub min_lambda_bar: f64,
    pub argmin: Point,
}

const LAMBDA_CAP: f64 = 1.0;

/// Largest `lambda <= 1` such that `delta_{+-mu}(z)` stays in `B(c, R)` for all `0 < mu < lambda`.
fn entry_depth(z: &[f64], c: &[f64], radius: f64, sign: f64) -> f64 {
    let mut buf = vec![0.0; z.len()];
    let mut outside = |lambda: f64| {
        let mut w = z.to_vec();
        heis::dilate_in_place(&mut w, sign * lambda);
        heis::left_translate_inverse(c, &w, &mut buf);
        heis::rho4(&buf).sqrt().sqrt() >= radius
    };
    let steps = 240;
    let (lmin, lmax) = (1e-9f64, LAMBDA_CAP);
    let ratio = (lmax / lmin).ln() / steps as f64;
    let mut prev = 0.0;
    for k in 0..=steps {
        let lambda = lmin * (ratio * k as f64).exp();
        if outside(lambda) {
            if k == 0 {
                return 0.0;
            }
            let (mut lo, mut hi) = (prev, lambda);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if outside(mid) {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            return lo;
        }
        prev = lambda;
    }
    LAMBDA_CAP
}

/// Empirical flow-entry depth: how far the dilation flow from each boundary
/// sample stays inside its tangent gauge ball.
pub fn flow_entry_check(d: &ImplicitDomain, side: BallSide, radius: f64, count: usize) -> Result<FlowEntryReport> {
    positive("probe radius", radius)?;
    let samples = boundary_sample(d, count)?;
    let probe = probe_from_samples(d, &samples, side, radius);
    if !probe.pass {
        return Err(Error::ProbeNotPassed(format!(
            "{side:?} probe with R = {radius} failed (worst margin {:e})",
            probe.worst_violation
        )));
    }
    let sign = match side {
        BallSide::Exterior => 1.0,
        BallSide::Interior => -1.0,
    };
    let lambda_bar: Vec<f64> = probe
        .samples
        .par_iter()
        .map(|s| {
            let c = s.center.as_ref().expect("passing probe has centers");
            entry_depth(s.point.coords(), c.coords(), radius, sign)
        })
        .collect();
    let (imin, &min_lambda_bar) = lambda_bar
        .iter()
        .enumerate()
        .fold((0, &f64::INFINITY), |acc, (i, v)| if *v < *acc.1 { (i, v) } else { acc });
    Ok(FlowEntryReport {
        side,
        radius,
        argmin: probe.samples[imin].point.clone(),
        lambda_bar,
        min_lambda_bar,
    })
}

/// Number of inner-boundary samples used to verify nesting.
const NESTING_SAMPLES: usize = 400;

/// Annular region `Omega_2 \ closure(Omega_1)` with exponent `p`.
/// Deserialization re-runs the origin and nesting checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AnnulusRepr", into = "AnnulusRepr")]
pub struct AnnulusProblem {
    inner: ImplicitDomain,
    outer: ImplicitDomain,
    p: PExponent,
    params: AmbientParams,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnulusRepr {
    #[serde(default = "one")]
    n: usize,
    p: PExponent,
    inner: DomainKind,
    outer: DomainKind,
}

fn one() -> usize {
    1
}

impl TryFrom<AnnulusRepr> for AnnulusProblem {
    type Error = Error;
    fn try_from(r: AnnulusRepr) -> Result<Self> {
        let params = AmbientParams::new(r.n)?;
        AnnulusProblem::new(
            ImplicitDomain::from_kind(r.n, r.inner)?,
            ImplicitDomain::from_kind(r.n, r.outer)?,
            r.p,
            params,
        )
    }
}

impl From<AnnulusProblem> for AnnulusRepr {
    fn from(a: AnnulusProblem) -> Self {
        AnnulusRepr { n: a.params.n(), p: a.p, inner: a.inner.kind, outer: a.outer.kind }
    }
}

impl AnnulusProblem {
    pub fn new(inner: ImplicitDomain, outer: ImplicitDomain, p: PExponent, params: AmbientParams) -> Result<Self> {
        for d in [&inner, &outer] {
            if d.n != params.n() {
                return Err(Error::DimensionMismatch { expected: params.n(), found: d.n });
            }
        }
        let phi0 = inner.phi(&Point::origin(params.n()));
        if phi0 >= 0.0 {
            return Err(Error::OriginOutside(phi0));
        }
        let samples = boundary_sample(&inner, NESTING_SAMPLES)?;
        let worst = samples.iter().map(|s| outer.phi(&s.point)).fold(f64::NEG_INFINITY, f64::max);
        if worst >= 0.0 {
            return Err(Error::NotNested(worst));
        }
        Ok(AnnulusProblem { inner, outer, p, params })
    }

    pub fn inner(&self) -> &ImplicitDomain {
        &self.inner
    }

    pub fn outer(&self) -> &ImplicitDomain {
        &self.outer
    }

    pub fn p(&self) -> PExponent {
        self.p
    }

    pub fn params(&self) -> AmbientParams {
        self.params
    }

    /// Same domains, different exponent.
    pub fn with_p(&self, p: PExponent) -> Self {
        AnnulusProblem { p, ..self.clone() }
    }

    /// Closed-form oracle when both domains are gauge balls centered at the origin.
    pub fn model_spec(&self) -> Option<ModelPotentialSpec> {
        let r = self.inner.origin_gauge_radius()?;
        let big_r = self.outer.origin_gauge_radius()?;
        ModelPotentialSpec::new(r, big_r, self.p, self.params).ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_ball() -> ImplicitDomain {
        make_gauge_ball(Point::origin(1), 1.0).unwrap()
    }

    #[test]
    fn gauge_ball_basics() {
        let b = unit_ball();
        assert!(contains(&b, &Point::origin(1)));
        assert_eq!(b.phi(&Point::h1(1.0, 0.0, 0.0)), 0.0);
        assert!(!contains(&b, &Point::h1(1.0, 0.0, 0.0)));
        assert_eq!(b.phi(&Point::h1(0.0, 0.0, 1.0)), 0.0);
        let far = make_gauge_ball(Point::h1(0.2, 0.1, -0.3), 1.0).unwrap();
        assert!(contains(&far, &Point::h1(0.2, 0.1, -0.3)));
        assert!(!contains(&b, &heis::dilate_point(&Point::h1(0.3, 0.4, 0.1), 3.0)));
        assert!(make_gauge_ball(Point::origin(1), 0.0).is_err());
    }

    #[test]
    fn anisotropic_reduces_to_gauge_ball() {
        let a1 = make_anisotropic_gauge(AmbientParams::new(1).unwrap(), 1.0, 0.8).unwrap();
        let g = make_gauge_ball(Point::origin(1), 0.8).unwrap();
        for z in [[0.1, 0.5, -0.2], [0.9, 0.0, 0.3], [0.0, 0.0, 0.64]] {
            assert!((a1.phi_coords(&z) - g.phi_coords(&z)).abs() < 1e-15);
        }
        let a4 = make_anisotropic_gauge(AmbientParams::new(1).unwrap(), 4.0, 1.0).unwrap();
        assert_eq!(a4.phi_coords(&[0.0, 0.0, 0.5]), 0.0);
        assert!(make_anisotropic_gauge(AmbientParams::new(1).unwrap(), 0.0, 1.0).is_err());
    }

    #[test]
    fn bounding_boxes_contain_domains() {
        let doms = [
            unit_ball(),
            make_gauge_ball(Point::h1(0.3, -0.2, 0.5), 0.7).unwrap(),
            make_anisotropic_gauge(AmbientParams::new(1).unwrap(), 4.0, 1.0).unwrap(),
            make_euclidean_ball(Point::h1(0.1, 0.0, 0.0), 0.5).unwrap(),
            dilate_domain(&make_euclidean_ball(Point::origin(1), 0.5).unwrap(), 0.3),
        ];
        for d in &doms {
            let (lo, hi) = d.bounding_box();
            let samples = boundary_sample_with(
                d,
                500,
                &SamplingOptions {
                    anchor: Point::from_coords(lo.iter().zip(&hi).map(|(l, h)| 0.5 * (l + h)).collect()).unwrap(),
                    seed: None,
                },
            );
            // the box center is inside every domain listed here
            for s in samples.unwrap() {
                for k in 0..3 {
                    let c = s.point.coords()[k];
                    assert!(c >= lo[k] - 1e-9 && c <= hi[k] + 1e-9, "{d:?} {c} not in [{}, {}]", lo[k], hi[k]);
                }
            }
        }
    }

    #[test]
    fn samples_lie_on_gauge_sphere() {
        let b = make_gauge_ball(Point::origin(1), 0.7).unwrap();
        let s = boundary_sample(&b, 1000).unwrap();
        assert!(s.len() >= 1000);
        for sample in &s {
            assert!((heis::gauge_norm(&sample.point) - 0.7).abs() <= 1e-8);
            assert!((sample.outward_normal.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn euclidean_normals_are_radial() {
        let b = make_euclidean_ball(Point::origin(1), 0.5).unwrap();
        for s in boundary_sample(&b, 200).unwrap() {
            let r = s.point.coords().iter().map(|c| c * c).sum::<f64>().sqrt();
            for k in 0..3 {
                assert!((s.outward_normal[k] - s.point.coords()[k] / r).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn normals_match_finite_differences() {
        let doms = [
            make_gauge_ball(Point::h1(0.1, -0.2, 0.05), 0.9).unwrap(),
            make_anisotropic_gauge(AmbientParams::new(1).unwrap(), 4.0, 1.0).unwrap(),
            dilate_domain(&make_euclidean_ball(Point::origin(1), 0.5).unwrap(), -0.4),
        ];
        for d in &doms {
            for s in boundary_sample(d, 300).unwrap() {
                let z = s.point.coords();
                let h = 1e-6;
                let mut g = [0.0; 3];
                for k in 0..3 {
                    let mut p = z.to_vec();
                    p[k] += h;
                    let mut m = z.to_vec();
                    m[k] -= h;
                    g[k] = (d.phi_coords(&p) - d.phi_coords(&m)) / (2.0 * h);
                }
                let gn = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
                for k in 0..3 {
                    assert!((g[k] / gn - s.outward_normal[k]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn ray_failure_is_reported() {
        // anchor outside the domain
        let d = make_gauge_ball(Point::h1(3.0, 0.0, 0.0), 0.5).unwrap();
        assert!(matches!(boundary_sample(&d, 10), Err(Error::OriginOutside(_))));
        // a convex ball is starshaped about any interior anchor, even one next to the rim
        let b = make_euclidean_ball(Point::origin(1), 1.0).unwrap();
        let opts = SamplingOptions { anchor: Point::h1(0.999, 0.0, 0.0), seed: Some(3) };
        assert!(boundary_sample_with(&b, 50, &opts).is_ok());
    }

    #[test]
    fn starshapedness_of_test_family() {
        let g = starshapedness_report(&unit_ball(), 500).unwrap();
        assert!(g.pass());
        // <grad phi, Z> = 4 rho^4 = 4 on the unit sphere, so K = min 4 / |grad phi|
        let s = boundary_sample(&unit_ball(), 500).unwrap();
        let expected = s
            .iter()
            .map(|b| 4.0 / unit_ball().gradient(&b.point).norm())
            .fold(f64::INFINITY, f64::min);
        assert!((g.min_pairing - expected).abs() < 1e-8);

        let e = starshapedness_report(&make_euclidean_ball(Point::origin(1), 0.5).unwrap(), 300).unwrap();
        assert!(e.pass());
        let a = starshapedness_report(&make_anisotropic_gauge(AmbientParams::new(1).unwrap(), 4.0, 1.0).unwrap(), 500)
            .unwrap();
        assert!(a.pass());
        assert_eq!(a.sample_count, 500);

        let off = make_gauge_ball(Point::h1(3.0, 0.0, 0.0), 1.0).unwrap();
        assert!(matches!(starshapedness_report(&off, 10), Err(Error::OriginOutside(_))));
    }

    #[test]
    fn dilate_domain_closed_forms() {
        let b = make_gauge_ball(Point::h1(0.1, 0.2, 0.0), 0.5).unwrap();
        assert_eq!(dilate_domain(&b, 0.0), b);
        let d = dilate_domain(&unit_ball(), 2f64.ln());
        assert_eq!(d.origin_gauge_radius(), Some(2.0));
        let z = Point::h1(0.3, -0.4, 0.2);
        for lambda in [-0.5, 0.3, 1.1] {
            let dd = dilate_domain(&b, lambda);
            assert_eq!(contains(&b, &z), contains(&dd, &heis::dilate_point(&z, lambda)));
        }
    }

    #[test]
    fn dilated_boundary_samples_stay_on_boundary() {
        let doms = [
            make_gauge_ball(Point::origin(1), 0.8).unwrap(),
            make_anisotropic_gauge(AmbientParams::new(1).unwrap(), 4.0, 1.0).unwrap(),
            make_euclidean_ball(Point::origin(1), 0.6).unwrap(),
        ];
        for d in &doms {
            for lambda in [-0.3, 0.2] {
                let dd = dilate_domain(d, lambda);
                for s in boundary_sample(d, 200).unwrap() {
                    let w = heis::dilate_point(&s.point, lambda);
                    let g = dd.gradient(&w).norm();
                    assert!((dd.phi(&w) / g).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn self_tangent_interior_probe() {
        let r0 = 0.8;
        let b = make_gauge_ball(Point::origin(1), r0).unwrap();
        let rep = gauge_ball_probe(&b, BallSide::Interior, r0, 150).unwrap();
        assert!(rep.pass, "worst {}", rep.worst_violation);
        assert!(rep.worst_violation.abs() < 1e-6);
        for s in &rep.samples {
            let c = s.center.as_ref().unwrap();
            assert!(c.coords().iter().all(|v| v.abs() < 1e-8), "{:?} -> {:?}", s.point, c);
        }
    }

    #[test]
    fn probe_is_monotone_in_radius() {
        let r0 = 1.0;
        let b = make_gauge_ball(Point::origin(1), r0).unwrap();
        assert!(gauge_ball_probe(&b, BallSide::Interior, 0.5 * r0, 150).unwrap().pass);
        assert!(!gauge_ball_probe(&b, BallSide::Interior, r0 * 1.002, 150).unwrap().pass);
        assert!(!gauge_ball_probe(&b, BallSide::Interior, 2.0 * r0, 150).unwrap().pass);
    }

    #[test]
    fn flow_entry_on_gauge_ball() {
        let b = make_gauge_ball(Point::origin(1), 1.0).unwrap();
        let rep = flow_entry_check(&b, BallSide::Interior, 1.0, 100).unwrap();
        assert_eq!(rep.min_lambda_bar, 1.0);
        assert!(rep.lambda_bar.iter().all(|&l| l == 1.0));
        let rep = flow_entry_check(&b, BallSide::Interior, 0.5, 100).unwrap();
        assert!(rep.lambda_bar.iter().all(|&l| l > 0.0));
        let m = rep.lambda_bar.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(m, rep.min_lambda_bar);
        assert!(matches!(
            flow_entry_check(&b, BallSide::Interior, 2.0, 50),
            Err(Error::ProbeNotPassed(_))
        ));
    }

    #[test]
    fn annulus_validation() {
        let params = AmbientParams::new(1).unwrap();
        let p = PExponent::new(2.0).unwrap();
        let inner = make_gauge_ball(Point::origin(1), 0.4).unwrap();
        let outer = unit_ball();
        let prob = AnnulusProblem::new(inner.clone(), outer.clone(), p, params).unwrap();
        assert!(prob.model_spec().is_some());
        assert!(matches!(
            AnnulusProblem::new(outer.clone(), inner.clone(), p, params),
            Err(Error::NotNested(_))
        ));
        let shifted = make_gauge_ball(Point::h1(2.0, 0.0, 0.0), 0.4).unwrap();
        assert!(matches!(
            AnnulusProblem::new(shifted, outer.clone(), p, params),
            Err(Error::OriginOutside(_))
        ));
        let aniso = make_anisotropic_gauge(params, 4.0, 1.0).unwrap();
        let prob = AnnulusProblem::new(inner, aniso, p, params).unwrap();
        assert!(prob.model_spec().is_none());
    }

    #[test]
    fn problem_json_round_trip_and_validation() {
        let prob = AnnulusProblem::new(
            make_gauge_ball(Point::origin(1), 0.4).unwrap(),
            unit_ball(),
            PExponent::new(3.0).unwrap(),
            AmbientParams::default(),
        )
        .unwrap();
        let js = serde_json::to_string(&prob).unwrap();
        let back: AnnulusProblem = serde_json::from_str(&js).unwrap();
        assert_eq!(back, prob);
        let nested_wrong = r#"{"p":2.0,"inner":{"kind":"gauge_ball","center":[0,0,0],"radius":1.0},
            "outer":{"kind":"gauge_ball","center":[0,0,0],"radius":0.5}}"#;
        assert!(serde_json::from_str::<AnnulusProblem>(nested_wrong).is_err());
        let bad_p = r#"{"p":0.5,"inner":{"kind":"gauge_ball","center":[0,0,0],"radius":0.4},
            "outer":{"kind":"gauge_ball","center":[0,0,0],"radius":1.0}}"#;
        assert!(serde_json::from_str::<AnnulusProblem>(bad_p).is_err());
        let d: ImplicitDomain = serde_json::from_str(r#"{"n":1,"kind":"anisotropic_gauge","a":2.0,"radius":1.0}"#).unwrap();
        assert!(d.phi(&Point::origin(1)) < 0.0);
        assert!(serde_json::from_str::<ImplicitDomain>(r#"{"n":1,"kind":"euclidean_ball","center":[0,0,0],"radius":-1.0}"#).is_err());
    }
}
