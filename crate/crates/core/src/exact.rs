//! Closed-form horizontally p-harmonic functions.
//!
//! The fundamental solution with pole `w` is `rho(w^{-1} z)^{-(Q-p)/(p-1)}` for
//! `p != Q` and `log rho(w^{-1} z)` for `p = Q`. Normalizing constants are 1.
//! The capacitary potential of a concentric gauge-ball annulus and the barrier
//! functions of the starshapedness argument are affine images of these.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heis::{self, AmbientParams, FullVector, Point};

/// Gauge distance below which the fundamental solution is not evaluated.
pub const SINGULARITY_GUARD: f64 = 1e-12;

/// Tolerance for treating `p` as the critical exponent `Q`.
pub const CRITICAL_TOL: f64 = 1e-12;

/// An exponent `p > 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct PExponent(f64);

impl PExponent {
    pub fn new(p: f64) -> Result<Self> {
        if !p.is_finite() || p <= 1.0 {
            return Err(Error::InvalidParameter(format!("p must be finite and > 1, got {p}")));
        }
        Ok(PExponent(p))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_critical(self, params: AmbientParams) -> bool {
        (self.0 - params.q() as f64).abs() <= CRITICAL_TOL
    }

    /// Decay exponent `(Q - p) / (p - 1)`.
    pub fn decay(self, params: AmbientParams) -> f64 {
        (params.q() as f64 - self.0) / (self.0 - 1.0)
    }
}

impl TryFrom<f64> for PExponent {
    type Error = Error;

    fn try_from(p: f64) -> Result<Self> {
        PExponent::new(p)
    }
}

impl From<PExponent> for f64 {
    fn from(p: PExponent) -> f64 {
        p.0
    }
}

fn check_dim(params: AmbientParams, z: &Point) -> Result<()> {
    if z.n() != params.n() {
        return Err(Error::DimensionMismatch { expected: params.n(), found: z.n() });
    }
    Ok(())
}

/// Radial profile of the fundamental solution as a function of the gauge.
fn radial(p: PExponent, params: AmbientParams, r: f64) -> f64 {
    if p.is_critical(params) {
        r.ln()
    } else {
        r.powf(-p.decay(params))
    }
}

/// d/dr of [`radial`].
fn radial_derivative(p: PExponent, params: AmbientParams, r: f64) -> f64 {
    if p.is_critical(params) {
        1.0 / r
    } else {
        let e = p.decay(params);
        -e * r.powf(-e - 1.0)
    }
}

fn guarded_distance(w: &Point, z: &Point) -> Result<(Vec<f64>, f64)> {
    if w.n() != z.n() {
        return Err(Error::DimensionMismatch { expected: w.n(), found: z.n() });
    }
    let mut v = vec![0.0; z.coords().len()];
    heis::left_translate_inverse(w.coords(), z.coords(), &mut v);
    let r = heis::rho4(&v).sqrt().sqrt();
    if r < SINGULARITY_GUARD {
        return Err(Error::Singularity { distance: r, guard: SINGULARITY_GUARD });
    }
    Ok((v, r))
}

pub fn fundamental_solution(w: &Point, p: PExponent, params: AmbientParams, z: &Point) -> Result<f64> {
    check_dim(params, z)?;
    let (_, r) = guarded_distance(w, z)?;
    Ok(radial(p, params, r))
}

/// Euclidean gradient in `z` of [`fundamental_solution`].
pub fn fundamental_solution_gradient(
    w: &Point,
    p: PExponent,
    params: AmbientParams,
    z: &Point,
) -> Result<FullVector> {
    check_dim(params, z)?;
    let (v, r) = guarded_distance(w, z)?;
    // d f / d v = f'(r) * grad rho(v),  grad rho = grad rho^4 / (4 r^3)
    let scale = radial_derivative(p, params, r) / (4.0 * r * r * r);
    let mut g4 = vec![0.0; v.len()];
    heis::rho4_gradient_into(&v, &mut g4);
    for c in &mut g4 {
        *c *= scale;
    }
    let mut out = vec![0.0; v.len()];
    heis::pullback_left_inverse(w.coords(), &g4, &mut out);
    Ok(FullVector(out))
}

/// Concentric gauge-ball annulus `B(O, R) \ B(O, r)` with exponent `p`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelPotentialSpec {
    r: f64,
    big_r: f64,
    p: PExponent,
    params: AmbientParams,
}

impl ModelPotentialSpec {
    pub fn new(r: f64, big_r: f64, p: PExponent, params: AmbientParams) -> Result<Self> {
        if !(r > 0.0 && r < big_r && big_r.is_finite()) {
            return Err(Error::InvalidParameter(format!("need 0 < r < R, got r = {r}, R = {big_r}")));
        }
        Ok(ModelPotentialSpec { r, big_r, p, params })
    }

    pub fn inner_radius(&self) -> f64 {
        self.r
    }

    pub fn outer_radius(&self) -> f64 {
        self.big_r
    }

    pub fn p(&self) -> PExponent {
        self.p
    }

    pub fn params(&self) -> AmbientParams {
        self.params
    }

    /// Potential as a function of the gauge `rho`.
    pub fn radial_value(&self, rho: f64) -> f64 {
        let f = |s: f64| radial(self.p, self.params, s);
        (f(rho) - f(self.big_r)) / (f(self.r) - f(self.big_r))
    }

    /// d/d rho of [`Self::radial_value`].
    pub fn radial_derivative(&self, rho: f64) -> f64 {
        let f = |s: f64| radial(self.p, self.params, s);
        radial_derivative(self.p, self.params, rho) / (f(self.r) - f(self.big_r))
    }

    /// Gauge radius at which the potential takes the value `level`.
    pub fn level_radius(&self, level: f64) -> f64 {
        if self.p.is_critical(self.params) {
            // log(R / rho) = level * log(R / r)
            self.big_r * (self.r / self.big_r).powf(level)
        } else {
            let e = self.p.decay(self.params);
            let f = |s: f64| s.powf(-e);
            let target = level * (f(self.r) - f(self.big_r)) + f(self.big_r);
            target.powf(-1.0 / e)
        }
    }

    /// Continuum value of `min -<grad u, Z>` over the closed annulus.
    ///
    /// Since `<grad rho, Z> = rho`, the pairing is `rho u'(rho)`, whose modulus is
    /// monotone in `rho`; the minimum sits on one of the two boundary spheres.
    pub fn pairing_bound(&self) -> f64 {
        let at = |s: f64| -s * self.radial_derivative(s);
        at(self.r).min(at(self.big_r))
    }
}

pub fn model_potential(spec: &ModelPotentialSpec, z: &Point) -> Result<f64> {
    check_dim(spec.params, z)?;
    let r = heis::gauge_norm(z);
    if r < SINGULARITY_GUARD {
        return Err(Error::Singularity { distance: r, guard: SINGULARITY_GUARD });
    }
    Ok(spec.radial_value(r))
}

pub fn model_potential_gradient(spec: &ModelPotentialSpec, z: &Point) -> Result<FullVector> {
    check_dim(spec.params, z)?;
    let r = heis::gauge_norm(z);
    if r < SINGULARITY_GUARD {
        return Err(Error::Singularity { distance: r, guard: SINGULARITY_GUARD });
    }
    let g = heis::gauge_norm4_gradient(z);
    Ok(g.scaled(spec.radial_derivative(r) / (4.0 * r * r * r)))
}

/// Which side of a domain boundary a tangent gauge ball sits on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BallSide {
    /// Ball outside the domain, touching its boundary.
    Exterior,
    /// Ball inside the domain, touching its boundary.
    Interior,
}

/// Barrier `v = alpha * rho(c^{-1} z)^{-(Q-p)/(p-1)} + beta` on the shell
/// `R/2 <= rho <= R`, `v = 1` inside `B(c, R/2)`. At `p = Q` the profile is
/// `alpha log rho + beta`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BarrierSpec {
    pub center: Point,
    pub radius: f64,
    pub side: BallSide,
    pub p: PExponent,
    pub params: AmbientParams,
    pub alpha: f64,
    pub beta: f64,
}

pub fn make_barrier(
    center: Point,
    radius: f64,
    side: BallSide,
    p: PExponent,
    params: AmbientParams,
) -> Result<BarrierSpec> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::InvalidParameter(format!("barrier radius must be positive, got {radius}")));
    }
    check_dim(params, &center)?;
    let (alpha, beta) = if p.is_critical(params) {
        let l2 = std::f64::consts::LN_2;
        (-1.0 / l2, radius.ln() / l2)
    } else {
        let e = p.decay(params);
        let denom = 2f64.powf(e) - 1.0;
        (radius.powf(e) / denom, -1.0 / denom)
    };
    Ok(BarrierSpec { center, radius, side, p, params, alpha, beta })
}

impl BarrierSpec {
    /// Barrier profile at gauge distance `d` from the center.
    pub fn radial_value(&self, d: f64) -> f64 {
        if d < 0.5 * self.radius {
            return 1.0;
        }
        self.alpha * radial(self.p, self.params, d) + self.beta
    }
}

pub fn eval_barrier(spec: &BarrierSpec, z: &Point) -> Result<f64> {
    let d = heis::gauge_distance(z, &spec.center)?;
    Ok(spec.radial_value(d))
}
