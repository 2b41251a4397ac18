//! Grid solver for the horizontal p-Laplace Dirichlet problem on an annulus (`n = 1`).
//!
//! The discrete energy at a free node averages `(|g|^2 + eps^2)^{p/2}` over the
//! eight sign choices of one-sided differences in `x`, `y`, `t`, with
//! `g = (D_x u + 2y D_t u, D_y u - 2x D_t u)`. A difference towards a pinned
//! neighbour uses the length `(theta^{p-1} / 2)^{1/p} h`, where `theta h` is the
//! distance to the boundary crossing, so the pinned value acts as boundary data
//! at the crossing. The discrete equations are the exact gradient of this energy.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domains::{AnnulusProblem, ImplicitDomain};
use crate::error::{Error, Result};
use crate::heis::{HorizontalVector, Point};

pub const MIN_RESOLUTION: usize = 17;

/// Half-extent factor applied to the outer bounding box.
pub const BOX_INFLATION: f64 = 1.05;

/// Lower clamp on cut fractions.
pub const THETA_MIN: f64 = 0.05;

/// Fixed chunk length of every parallel reduction.
const CHUNK: usize = 4096;

const NONE: u32 = u32::MAX;

/// Deterministic parallel sum: fixed chunks, partials summed in order.
fn chunked_sum<F>(len: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let partials: Vec<f64> = (0..len.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| (c * CHUNK..((c + 1) * CHUNK).min(len)).map(&f).sum())
        .collect();
    partials.iter().sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    chunked_sum(a.len(), |i| a[i] * b[i])
}

fn sup_norm(a: &[f64]) -> f64 {
    a.par_iter().map(|v| v.abs()).reduce(|| 0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct GridSpec {
    lo: [f64; 3],
    hi: [f64; 3],
    resolution: [usize; 3],
}

/// Uniform tensor grid on a box in `(x, y, t)`; node index `i + nx (j + ny k)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridSpec", into = "GridSpec")]
pub struct Grid {
    lo: [f64; 3],
    hi: [f64; 3],
    resolution: [usize; 3],
    spacing: [f64; 3],
}

impl TryFrom<GridSpec> for Grid {
    type Error = Error;

    fn try_from(s: GridSpec) -> Result<Self> {
        Grid::new(s.lo, s.hi, s.resolution)
    }
}

impl From<Grid> for GridSpec {
    fn from(g: Grid) -> Self {
        GridSpec { lo: g.lo, hi: g.hi, resolution: g.resolution }
    }
}

impl Grid {
    pub fn new(lo: [f64; 3], hi: [f64; 3], resolution: [usize; 3]) -> Result<Self> {
        let mut spacing = [0.0; 3];
        for ax in 0..3 {
            if resolution[ax] < 3 {
                return Err(Error::ResolutionTooSmall(resolution[ax], 3));
            }
            if !(lo[ax].is_finite() && hi[ax].is_finite() && hi[ax] > lo[ax]) {
                return Err(Error::InvalidParameter(format!("empty grid extent on axis {ax}")));
            }
            spacing[ax] = (hi[ax] - lo[ax]) / (resolution[ax] - 1) as f64;
        }
        Ok(Grid { lo, hi, resolution, spacing })
    }

    pub fn lo(&self) -> [f64; 3] {
        self.lo
    }

    pub fn hi(&self) -> [f64; 3] {
        self.hi
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.resolution
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.resolution.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    /// Largest spacing.
    pub fn h(&self) -> f64 {
        self.spacing.iter().cloned().fold(0.0, f64::max)
    }

    pub fn stride(&self, axis: usize) -> usize {
        match axis {
            0 => 1,
            1 => self.resolution[0],
            _ => self.resolution[0] * self.resolution[1],
        }
    }

    pub fn index(&self, ijk: [usize; 3]) -> usize {
        ijk[0] + self.resolution[0] * (ijk[1] + self.resolution[1] * ijk[2])
    }

    pub fn ijk(&self, node: usize) -> [usize; 3] {
        let nx = self.resolution[0];
        let ny = self.resolution[1];
        [node % nx, (node / nx) % ny, node / (nx * ny)]
    }

    pub fn coords(&self, node: usize) -> [f64; 3] {
        let ijk = self.ijk(node);
        std::array::from_fn(|ax| self.lo[ax] + ijk[ax] as f64 * self.spacing[ax])
    }

    pub fn point(&self, node: usize) -> Point {
        let c = self.coords(node);
        Point::h1(c[0], c[1], c[2])
    }

    pub fn on_face(&self, node: usize) -> bool {
        let ijk = self.ijk(node);
        (0..3).any(|ax| ijk[ax] == 0 || ijk[ax] + 1 == self.resolution[ax])
    }

    /// Node closest to `z`, if `z` is inside the box.
    pub fn nearest_node(&self, z: [f64; 3]) -> Option<usize> {
        let mut ijk = [0; 3];
        for ax in 0..3 {
            let s = (z[ax] - self.lo[ax]) / self.spacing[ax];
            if !(s > -0.5 && s < self.resolution[ax] as f64 - 0.5) {
                return None;
            }
            ijk[ax] = s.round() as usize;
        }
        Some(self.index(ijk))
    }

    /// Grid over `delta_lambda(box)` with the same resolution.
    pub fn dilated(&self, lambda: f64) -> Grid {
        let e = lambda.exp();
        let scale = [e, e, e * e];
        let lo = std::array::from_fn(|ax| self.lo[ax] * scale[ax]);
        let hi = std::array::from_fn(|ax| self.hi[ax] * scale[ax]);
        let spacing = std::array::from_fn(|ax| self.spacing[ax] * scale[ax]);
        Grid { lo, hi, resolution: self.resolution, spacing }
    }

    pub fn contains(&self, z: [f64; 3]) -> bool {
        (0..3).all(|ax| z[ax] >= self.lo[ax] && z[ax] <= self.hi[ax])
    }
}

fn require_n1(problem: &AnnulusProblem) -> Result<()> {
    match problem.params().n() {
        1 => Ok(()),
        n => Err(Error::UnsupportedDimension(n)),
    }
}

/// Grid over the outer bounding box inflated about its center.
pub fn build_grid(problem: &AnnulusProblem, resolution: [usize; 3]) -> Result<Grid> {
    require_n1(problem)?;
    if let Some(&r) = resolution.iter().find(|&&r| r < MIN_RESOLUTION) {
        return Err(Error::ResolutionTooSmall(r, MIN_RESOLUTION));
    }
    let (lo, hi) = problem.outer().bounding_box();
    let mut glo = [0.0; 3];
    let mut ghi = [0.0; 3];
    for ax in 0..3 {
        let c = 0.5 * (lo[ax] + hi[ax]);
        let half = 0.5 * (hi[ax] - lo[ax]) * BOX_INFLATION;
        glo[ax] = c - half;
        ghi[ax] = c + half;
    }
    Grid::new(glo, ghi, resolution)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum NodeLabel {
    Inner,
    Free,
    Outer,
}

/// Direction `k`: axis `k / 2`, sign `+` for even `k`.
fn dir_sign(k: usize) -> isize {
    if k % 2 == 0 {
        1
    } else {
        -1
    }
}

fn opposite(k: usize) -> usize {
    k ^ 1
}

/// Node labels plus, for each free node, the fractional distance to the
/// boundary crossing in each of the six axis directions (1 towards free nodes).
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMask {
    labels: Vec<NodeLabel>,
    free: Vec<usize>,
    slot: Vec<u32>,
    theta: Vec<[f64; 6]>,
}

impl RegionMask {
    /// Mask with unit cut fractions: pinned values sit at the pinned nodes.
    pub fn from_labels(grid: &Grid, labels: Vec<NodeLabel>) -> Result<Self> {
        if labels.len() != grid.len() {
            return Err(Error::GridMismatch(format!("{} labels for {} nodes", labels.len(), grid.len())));
        }
        let mut free = Vec::new();
        let mut slot = vec![NONE; labels.len()];
        for (node, l) in labels.iter().enumerate() {
            if *l == NodeLabel::Free {
                if grid.on_face(node) {
                    return Err(Error::DomainTouchesGridBoundary);
                }
                slot[node] = free.len() as u32;
                free.push(node);
            }
        }
        if free.is_empty() {
            return Err(Error::NoFreeNodes);
        }
        let theta = vec![[1.0; 6]; free.len()];
        Ok(RegionMask { labels, free, slot, theta })
    }

    /// All interior nodes free, box faces pinned (labelled `Outer`).
    pub fn interior(grid: &Grid) -> Result<Self> {
        let labels =
            (0..grid.len()).map(|i| if grid.on_face(i) { NodeLabel::Outer } else { NodeLabel::Free }).collect();
        RegionMask::from_labels(grid, labels)
    }

    pub fn labels(&self) -> &[NodeLabel] {
        &self.labels
    }

    pub fn label(&self, node: usize) -> NodeLabel {
        self.labels[node]
    }

    pub fn is_free(&self, node: usize) -> bool {
        self.labels[node] == NodeLabel::Free
    }

    pub fn free_nodes(&self) -> &[usize] {
        &self.free
    }

    pub fn free_slot(&self, node: usize) -> Option<usize> {
        match self.slot[node] {
            NONE => None,
            s => Some(s as usize),
        }
    }

    /// Cut fractions of a free node in directions `+x, -x, +y, -y, +t, -t`.
    pub fn theta(&self, slot: usize) -> [f64; 6] {
        self.theta[slot]
    }

    pub fn count(&self, label: NodeLabel) -> usize {
        self.labels.iter().filter(|l| **l == label).count()
    }

    /// Run-length encoding in node order.
    pub fn to_rle(&self) -> Vec<(NodeLabel, usize)> {
        let mut out: Vec<(NodeLabel, usize)> = Vec::new();
        for l in &self.labels {
            match out.last_mut() {
                Some((last, n)) if last == l => *n += 1,
                _ => out.push((*l, 1)),
            }
        }
        out
    }

    pub fn labels_from_rle(rle: &[(NodeLabel, usize)]) -> Vec<NodeLabel> {
        rle.iter().flat_map(|&(l, n)| std::iter::repeat_n(l, n)).collect()
    }
}

/// Fraction along `a -> b` where `inside` first becomes true, by bisection.
fn crossing_fraction(d: &ImplicitDomain, a: [f64; 3], b: [f64; 3], want_negative: bool) -> f64 {
    let hit = |s: f64| {
        let z = [a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1]), a[2] + s * (b[2] - a[2])];
        let f = d.phi_coords(&z);
        if want_negative {
            f <= 0.0
        } else {
            f >= 0.0
        }
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if hit(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// Labels nodes by the signs of the two defining functions and records cut fractions.
pub fn classify_nodes(grid: &Grid, problem: &AnnulusProblem) -> Result<RegionMask> {
    require_n1(problem)?;
    let labels: Vec<NodeLabel> = (0..grid.len())
        .into_par_iter()
        .map(|node| {
            let z = grid.coords(node);
            if problem.inner().phi_coords(&z) <= 0.0 {
                NodeLabel::Inner
            } else if problem.outer().phi_coords(&z) >= 0.0 {
                NodeLabel::Outer
            } else {
                NodeLabel::Free
            }
        })
        .collect();
    let mut mask = RegionMask::from_labels(grid, labels)?;
    let theta: Vec<[f64; 6]> = mask
        .free
        .par_iter()
        .map(|&node| {
            let a = grid.coords(node);
            std::array::from_fn(|k| {
                let ax = k / 2;
                let nb = (node as isize + dir_sign(k) * grid.stride(ax) as isize) as usize;
                let b = grid.coords(nb);
                match mask.labels[nb] {
                    NodeLabel::Free => 1.0,
                    NodeLabel::Inner => crossing_fraction(problem.inner(), a, b, true).max(THETA_MIN),
                    NodeLabel::Outer => crossing_fraction(problem.outer(), a, b, false).max(THETA_MIN),
                }
            })
        })
        .collect();
    mask.theta = theta;
    Ok(mask)
}

/// Nodal values on a grid; pinned nodes carry the Dirichlet data.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    grid: Grid,
    mask: RegionMask,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Grid, mask: RegionMask, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() || mask.labels.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "{} values and {} labels for {} nodes",
                values.len(),
                mask.labels.len(),
                grid.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("field values"));
        }
        Ok(ScalarField { grid, mask, values })
    }

    pub fn from_fn(grid: Grid, mask: RegionMask, f: impl Fn([f64; 3]) -> f64 + Sync) -> Result<Self> {
        let values = (0..grid.len()).into_par_iter().map(|i| f(grid.coords(i))).collect();
        ScalarField::new(grid, mask, values)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn mask(&self) -> &RegionMask {
        &self.mask
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, node: usize) -> f64 {
        self.values[node]
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Same grid and mask, values mapped pointwise.
    pub fn map(&self, f: impl Fn(f64) -> f64 + Sync) -> ScalarField {
        ScalarField { grid: self.grid.clone(), mask: self.mask.clone(), values: self.values.par_iter().map(|v| f(*v)).collect() }
    }

    /// Trilinear interpolation; `None` outside the box.
    pub fn sample_trilinear(&self, z: [f64; 3]) -> Option<f64> {
        let g = &self.grid;
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for ax in 0..3 {
            let s = (z[ax] - g.lo[ax]) / g.spacing[ax];
            let last = (g.resolution[ax] - 1) as f64;
            // rounding slack at the faces
            if !(s >= -1e-9 && s <= last + 1e-9) {
                return None;
            }
            let s = s.clamp(0.0, last);
            let i = (s.floor() as usize).min(g.resolution[ax] - 2);
            base[ax] = i;
            frac[ax] = s - i as f64;
        }
        let mut acc = 0.0;
        for corner in 0..8 {
            let mut w = 1.0;
            let mut ijk = base;
            for ax in 0..3 {
                if corner >> ax & 1 == 1 {
                    ijk[ax] += 1;
                    w *= frac[ax];
                } else {
                    w *= 1.0 - frac[ax];
                }
            }
            if w != 0.0 {
                acc += w * self.values[g.index(ijk)];
            }
        }
        Some(acc)
    }
}

/// Central-difference horizontal gradient at a free node.
pub fn discrete_horizontal_gradient(field: &ScalarField, node: usize) -> Result<HorizontalVector> {
    if node >= field.grid.len() || !field.mask.is_free(node) {
        return Err(Error::NotFree(node));
    }
    let g = &field.grid;
    let d = |ax: usize| {
        let s = g.stride(ax);
        (field.values[node + s] - field.values[node - s]) / (2.0 * g.spacing[ax])
    };
    let [x, y, _] = g.coords(node);
    let (dx, dy, dt) = (d(0), d(1), d(2));
    Ok(HorizontalVector(vec![dx + 2.0 * y * dt, dy - 2.0 * x * dt]))
}

/// Sign pattern of combination `c`: bit 0 for `x`, bit 1 for `y`, bit 2 for `t` (set = backward).
#[inline]
fn combo_dirs(c: usize) -> (usize, usize, usize) {
    (c & 1, 2 + (c >> 1 & 1), 4 + (c >> 2 & 1))
}

#[inline]
fn sgn(k: usize) -> f64 {
    if k % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Symmetric 2x2 weight `[m00, m01, m11]` per sign combination.
type ComboWeights = [[f64; 3]; 8];

/// Free-node connectivity with cut-adjusted inverse distances.
struct Stencil {
    nb: Vec<[u32; 6]>,
    inv: Vec<[f64; 6]>,
    /// Values of pinned neighbours (0 where the neighbour is free).
    pinned: Vec<[f64; 6]>,
    xy: Vec<[f64; 2]>,
    vol: f64,
}

impl Stencil {
    fn new(grid: &Grid, mask: &RegionMask, values: &[f64], p: f64) -> Stencil {
        let n = mask.free.len();
        let mut nb = vec![[NONE; 6]; n];
        let mut inv = vec![[0.0; 6]; n];
        let mut pinned = vec![[0.0; 6]; n];
        let mut xy = vec![[0.0; 2]; n];
        nb.par_iter_mut()
            .zip(inv.par_iter_mut())
            .zip(pinned.par_iter_mut().zip(xy.par_iter_mut()))
            .enumerate()
            .for_each(|(s, ((nb, inv), (pinned, xy)))| {
                let node = mask.free[s];
                let c = grid.coords(node);
                *xy = [c[0], c[1]];
                for k in 0..6 {
                    let ax = k / 2;
                    let other = (node as isize + dir_sign(k) * grid.stride(ax) as isize) as usize;
                    let h = grid.spacing[ax];
                    match mask.slot[other] {
                        NONE => {
                            inv[k] = 1.0 / (cut_distance(mask.theta[s][k], p) * h);
                            pinned[k] = values[other];
                        }
                        o => {
                            nb[k] = o;
                            inv[k] = 1.0 / h;
                        }
                    }
                }
            });
        Stencil { nb, inv, pinned, xy, vol: grid.cell_volume() }
    }

    fn len(&self) -> usize {
        self.nb.len()
    }

    /// One-sided differences at slot `s`; pinned data enters only when `with_data`.
    #[inline]
    fn diffs(&self, s: usize, u: &[f64], with_data: bool) -> [f64; 6] {
        let us = u[s];
        let nb = &self.nb[s];
        let inv = &self.inv[s];
        std::array::from_fn(|k| {
            let v = match nb[k] {
                NONE => {
                    if with_data {
                        self.pinned[s][k]
                    } else {
                        0.0
                    }
                }
                o => u[o as usize],
            };
            (v - us) * inv[k]
        })
    }

    #[inline]
    fn g(&self, s: usize, d: &[f64; 6], c: usize) -> (f64, f64) {
        let (kx, ky, kt) = combo_dirs(c);
        let [x, y] = self.xy[s];
        let dt = sgn(kt) * d[kt];
        (sgn(kx) * d[kx] + 2.0 * y * dt, sgn(ky) * d[ky] - 2.0 * x * dt)
    }

    /// Per-direction duals `sum_c dE_c/dd_k * inv_k` from fluxes `(f0, f1) = dE_c/dg`.
    #[inline]
    fn duals(&self, s: usize, flux: &[(f64, f64); 8]) -> [f64; 6] {
        let [x, y] = self.xy[s];
        let mut out = [0.0; 6];
        for (c, &(f0, f1)) in flux.iter().enumerate() {
            let (kx, ky, kt) = combo_dirs(c);
            out[kx] += sgn(kx) * f0;
            out[ky] += sgn(ky) * f1;
            out[kt] += sgn(kt) * (2.0 * y * f0 - 2.0 * x * f1);
        }
        for k in 0..6 {
            out[k] *= self.inv[s][k];
        }
        out
    }

    /// Assembles `dF/du` on free slots from per-slot duals.
    fn gather(&self, duals: &[[f64; 6]], out: &mut [f64]) {
        out.par_iter_mut().enumerate().for_each(|(s, o)| {
            let own = &duals[s];
            let mut acc = -(own[0] + own[1] + own[2] + own[3] + own[4] + own[5]);
            for k in 0..6 {
                let nb = self.nb[s][k];
                if nb != NONE {
                    acc += duals[nb as usize][opposite(k)];
                }
            }
            *o = acc;
        });
    }

    /// Energy divided by cell volume.
    fn energy(&self, u: &[f64], p: f64, eps: f64) -> f64 {
        let e2 = eps * eps;
        chunked_sum(self.len(), |s| {
            let d = self.diffs(s, u, true);
            let mut acc = 0.0;
            for c in 0..8 {
                let (g0, g1) = self.g(s, &d, c);
                acc += pow_half(g0 * g0 + g1 * g1 + e2, p);
            }
            acc / 8.0
        })
    }

    /// Gradient of the energy divided by cell volume.
    fn gradient(&self, u: &[f64], p: f64, eps: f64, duals: &mut [[f64; 6]], out: &mut [f64]) {
        let e2 = eps * eps;
        duals.par_iter_mut().enumerate().for_each(|(s, dual)| {
            let d = self.diffs(s, u, true);
            let mut flux = [(0.0, 0.0); 8];
            for (c, f) in flux.iter_mut().enumerate() {
                let (g0, g1) = self.g(s, &d, c);
                let w = p / 8.0 * pow_half(g0 * g0 + g1 * g1 + e2, p - 2.0);
                *f = (w * g0, w * g1);
            }
            *dual = self.duals(s, &flux);
        });
        self.gather(duals, out);
    }

    /// Linearization weights at `u`: Picard freezes the diffusivity, Newton adds the rank-one term.
    fn weights(&self, u: &[f64], p: f64, eps: f64, kind: Linearization) -> Vec<ComboWeights> {
        let e2 = eps * eps;
        (0..self.len())
            .into_par_iter()
            .map(|s| {
                let d = self.diffs(s, u, true);
                std::array::from_fn(|c| {
                    let (g0, g1) = self.g(s, &d, c);
                    let q = g0 * g0 + g1 * g1 + e2;
                    let k = pow_half(q, p - 2.0) / 8.0;
                    match kind {
                        Linearization::Picard => [k, 0.0, k],
                        Linearization::Newton => {
                            let r = (p - 2.0) * k / q;
                            [k + r * g0 * g0, r * g0 * g1, k + r * g1 * g1]
                        }
                    }
                })
            })
            .collect()
    }

    /// `out = A v` for the linearized operator (pinned values zero).
    fn apply(&self, w: &[ComboWeights], v: &[f64], duals: &mut [[f64; 6]], out: &mut [f64]) {
        duals.par_iter_mut().enumerate().for_each(|(s, dual)| {
            let d = self.diffs(s, v, false);
            let m = &w[s];
            let flux: [(f64, f64); 8] = std::array::from_fn(|c| {
                let (g0, g1) = self.g(s, &d, c);
                (m[c][0] * g0 + m[c][1] * g1, m[c][1] * g0 + m[c][2] * g1)
            });
            *dual = self.duals(s, &flux);
        });
        self.gather(duals, out);
    }

    fn diagonal(&self, w: &[ComboWeights]) -> Vec<f64> {
        // contributions of each owner to the diagonal entries of itself and its neighbours
        let parts: Vec<(f64, [f64; 6])> = (0..self.len())
            .into_par_iter()
            .map(|s| {
                let [x, y] = self.xy[s];
                let inv = &self.inv[s];
                let mut own = 0.0;
                let mut nbr = [0.0; 6];
                for c in 0..8 {
                    let (kx, ky, kt) = combo_dirs(c);
                    let m = &w[s][c];
                    let ct = sgn(kt) * inv[kt];
                    let c0 = -(sgn(kx) * inv[kx] + 2.0 * y * ct);
                    let c1 = -(sgn(ky) * inv[ky] - 2.0 * x * ct);
                    own += m[0] * c0 * c0 + 2.0 * m[1] * c0 * c1 + m[2] * c1 * c1;
                    nbr[kx] += m[0] * inv[kx] * inv[kx];
                    nbr[ky] += m[2] * inv[ky] * inv[ky];
                    let (a0, a1) = (2.0 * y * ct, -2.0 * x * ct);
                    nbr[kt] += m[0] * a0 * a0 + 2.0 * m[1] * a0 * a1 + m[2] * a1 * a1;
                }
                (own, nbr)
            })
            .collect();
        (0..self.len())
            .into_par_iter()
            .map(|s| {
                let mut acc = parts[s].0;
                for k in 0..6 {
                    let nb = self.nb[s][k];
                    if nb != NONE {
                        acc += parts[nb as usize].1[opposite(k)];
                    }
                }
                acc
            })
            .collect()
    }
}

/// Effective length (in units of `h`) of a difference towards a pinned
/// neighbour whose boundary crossing is at fraction `theta`: the half-weighted
/// term `|D|^p / 2` then carries the flux of a full edge of length `theta h`.
fn cut_distance(theta: f64, p: f64) -> f64 {
    (0.5 * theta.powf(p - 1.0)).powf(1.0 / p)
}

/// `q^{e/2}` with fast paths for the common exponents.
#[inline]
fn pow_half(q: f64, e: f64) -> f64 {
    if e == 2.0 {
        q
    } else if e == 0.0 {
        1.0
    } else if e == 1.0 {
        q.sqrt()
    } else if e == -1.0 {
        1.0 / q.sqrt()
    } else {
        q.powf(0.5 * e)
    }
}

fn free_values(field: &ScalarField) -> Vec<f64> {
    field.mask.free.iter().map(|&n| field.values[n]).collect()
}

fn check_exponents(p: f64, eps: f64) -> Result<()> {
    if !(p >= 1.0 && p.is_finite()) {
        return Err(Error::InvalidParameter(format!("p must be >= 1, got {p}")));
    }
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::InvalidParameter(format!("eps must be >= 0, got {eps}")));
    }
    Ok(())
}

/// `E_eps(u) = vol * sum over free nodes of the averaged `(|g|^2 + eps^2)^{p/2}``.
pub fn discrete_p_energy(field: &ScalarField, p: f64, eps: f64) -> Result<f64> {
    check_exponents(p, eps)?;
    let st = Stencil::new(&field.grid, &field.mask, &field.values, p);
    Ok(st.energy(&free_values(field), p, eps) * st.vol)
}

/// `-dE_eps/du / vol` at free nodes, 0 at pinned nodes.
pub fn discrete_p_laplacian_residual(field: &ScalarField, p: f64, eps: f64) -> Result<ScalarField> {
    check_exponents(p, eps)?;
    let st = Stencil::new(&field.grid, &field.mask, &field.values, p);
    let u = free_values(field);
    let mut duals = vec![[0.0; 6]; st.len()];
    let mut grad = vec![0.0; st.len()];
    st.gradient(&u, p, eps, &mut duals, &mut grad);
    let mut values = vec![0.0; field.grid.len()];
    for (s, &node) in field.mask.free.iter().enumerate() {
        values[node] = -grad[s];
    }
    ScalarField::new(field.grid.clone(), field.mask.clone(), values)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Linearization {
    /// Lagged diffusivity.
    Picard,
    /// Full Hessian of the regularized energy.
    Newton,
}

fn default_tolerance() -> f64 {
    1e-8
}

fn default_schedule() -> Vec<f64> {
    vec![1e-2, 1e-4, 1e-6]
}

fn default_max_iterations() -> usize {
    200
}

fn default_inner_value() -> f64 {
    1.0
}

fn default_linearization() -> Linearization {
    Linearization::Newton
}

fn default_max_linear() -> usize {
    20_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveOptions {
    /// Target for the sup-norm of the volume-scaled energy gradient at the final `eps`.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_schedule")]
    pub epsilon_schedule: Vec<f64>,
    /// Cap on nonlinear iterations summed over all stages.
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    /// Dirichlet value on the inner region (the outer value is 0).
    #[serde(default = "default_inner_value")]
    pub inner_value: f64,
    #[serde(default = "default_linearization")]
    pub linearization: Linearization,
    #[serde(default = "default_max_linear")]
    pub max_linear_iterations: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tolerance: default_tolerance(),
            epsilon_schedule: default_schedule(),
            max_iterations: default_max_iterations(),
            inner_value: default_inner_value(),
            linearization: default_linearization(),
            max_linear_iterations: default_max_linear(),
        }
    }
}

impl SolveOptions {
    fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidParameter("tolerance must be positive".into()));
        }
        if self.epsilon_schedule.is_empty() || self.epsilon_schedule.iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
            return Err(Error::InvalidParameter("epsilon schedule must be a nonempty list of finite eps >= 0".into()));
        }
        if !self.inner_value.is_finite() {
            return Err(Error::NonFinite("inner value"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub linear_iterations: usize,
    pub fallback_steps: usize,
    /// `E_eps` at the final `eps` (volume included).
    pub final_energy: f64,
    /// Sup-norm of the volume-scaled energy gradient over free nodes at the final `eps`.
    pub final_residual: f64,
    pub epsilon_schedule: Vec<f64>,
    /// Energy after each accepted iteration, with the stage start values interleaved.
    pub energy_history: Vec<f64>,
    pub converged: bool,
    /// Largest excursion of free values outside `[min data, max data]`.
    pub bound_violation: f64,
    pub wall_time_s: f64,
}

/// Field and report of a run that stopped before reaching the tolerance.
#[derive(Clone, Debug, PartialEq)]
pub struct PartialSolve {
    pub field: ScalarField,
    pub report: SolveReport,
}

/// Dilation parameter at which the flow from `z` meets `{phi = 0}`;
/// `outward` follows `delta_lambda`, otherwise `delta_{-lambda}`.
fn flow_hit(d: &ImplicitDomain, z: [f64; 3], outward: bool) -> f64 {
    let sign = if outward { 1.0 } else { -1.0 };
    let at = |lambda: f64| {
        let e = (sign * lambda).exp();
        d.phi_coords(&[z[0] * e, z[1] * e, z[2] * e * e])
    };
    // outward flow ends outside, inward flow ends inside
    let done = |lambda: f64| if outward { at(lambda) >= 0.0 } else { at(lambda) <= 0.0 };
    let mut hi = 0.1;
    while !done(hi) && hi < 64.0 {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..50 {
        let mid = 0.5 * (lo + hi);
        if done(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// Initial field: interpolation of the data in the dilation parameter, pinned nodes at their data.
pub fn initial_field(problem: &AnnulusProblem, grid: &Grid, mask: &RegionMask, inner_value: f64) -> Result<ScalarField> {
    let values = (0..grid.len())
        .into_par_iter()
        .map(|node| match mask.labels[node] {
            NodeLabel::Inner => inner_value,
            NodeLabel::Outer => 0.0,
            NodeLabel::Free => {
                let z = grid.coords(node);
                let l1 = flow_hit(problem.inner(), z, false);
                let l2 = flow_hit(problem.outer(), z, true);
                inner_value * l2 / (l1 + l2)
            }
        })
        .collect();
    ScalarField::new(grid.clone(), mask.clone(), values)
}

fn pcg(
    st: &Stencil,
    w: &[ComboWeights],
    diag: &[f64],
    rhs: &[f64],
    rtol: f64,
    max_it: usize,
) -> (Vec<f64>, usize) {
    let n = st.len();
    let mut x = vec![0.0; n];
    let mut r = rhs.to_vec();
    let mut z: Vec<f64> = r.par_iter().zip(diag).map(|(r, d)| r / d).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut duals = vec![[0.0; 6]; n];
    let mut rz = dot(&r, &z);
    let target = rtol * dot(rhs, rhs).sqrt();
    let mut it = 0;
    while it < max_it {
        if dot(&r, &r).sqrt() <= target {
            break;
        }
        st.apply(w, &p, &mut duals, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            break;
        }
        let alpha = rz / pap;
        x.par_iter_mut().zip(&p).for_each(|(x, p)| *x += alpha * p);
        r.par_iter_mut().zip(&ap).for_each(|(r, ap)| *r -= alpha * ap);
        z.par_iter_mut().zip(&r).zip(diag).for_each(|((z, r), d)| *z = r / d);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        p.par_iter_mut().zip(&z).for_each(|(p, z)| *p = z + beta * *p);
        it += 1;
    }
    (x, it)
}

struct LineSearchOutcome {
    u: Vec<f64>,
    energy: f64,
    grad: Vec<f64>,
}

/// Backtracking along `d`. Accepts on sufficient decrease, or, when the
/// energy change is below round-off, when the slope at the trial point is
/// still non-positive (so the exact energy decreased along the segment).
#[allow(clippy::too_many_arguments)]
fn line_search(
    st: &Stencil,
    u: &[f64],
    e0: f64,
    g0: &[f64],
    d: &[f64],
    p: f64,
    eps: f64,
    duals: &mut [[f64; 6]],
) -> Option<LineSearchOutcome> {
    let slope0 = dot(g0, d);
    if !(slope0 < 0.0) {
        return None;
    }
    let mut alpha = 1.0;
    let mut grad = vec![0.0; u.len()];
    for _ in 0..40 {
        let trial: Vec<f64> = u.par_iter().zip(d).map(|(u, d)| u + alpha * d).collect();
        let e = st.energy(&trial, p, eps);
        let sufficient = e <= e0 + 1e-4 * alpha * slope0;
        let roundoff = (e - e0).abs() <= 1e-12 * e0.abs().max(f64::MIN_POSITIVE);
        if sufficient || roundoff {
            st.gradient(&trial, p, eps, duals, &mut grad);
            if sufficient || dot(&grad, d) <= 0.0 {
                return Some(LineSearchOutcome { u: trial, energy: e, grad });
            }
        }
        alpha *= 0.5;
    }
    None
}

/// Minimizes the regularized energy with boundary values pinned; see [`solve_from`].
pub fn solve(problem: &AnnulusProblem, grid: &Grid, options: &SolveOptions) -> Result<(ScalarField, SolveReport)> {
    require_n1(problem)?;
    options.validate()?;
    let mask = classify_nodes(grid, problem)?;
    let init = initial_field(problem, grid, &mask, options.inner_value)?;
    solve_from(init, problem.p().value(), options)
}

/// Minimizes `E_eps` over the free values of `init`, pinned values held fixed,
/// through the `eps` schedule. Each iteration solves the linearized equation by
/// Jacobi-preconditioned conjugate gradients and backtracks on the energy; a
/// stalled step falls back to a Barzilai-Borwein gradient step.
pub fn solve_from(init: ScalarField, p: f64, options: &SolveOptions) -> Result<(ScalarField, SolveReport)> {
    options.validate()?;
    check_exponents(p, 0.0)?;
    let start = Instant::now();
    let st = Stencil::new(&init.grid, &init.mask, &init.values, p);
    let n = st.len();
    let mut u = free_values(&init);
    let mut duals = vec![[0.0; 6]; n];
    let mut grad = vec![0.0; n];
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut linear_iterations = 0;
    let mut fallback_steps = 0;
    let mut residual = f64::INFINITY;
    let mut stalled = false;
    let last_stage = options.epsilon_schedule.len() - 1;

    'stages: for (stage, &eps) in options.epsilon_schedule.iter().enumerate() {
        let stage_tol = if stage == last_stage { options.tolerance } else { options.tolerance.max(1e-5) };
        let mut energy = st.energy(&u, p, eps);
        st.gradient(&u, p, eps, &mut duals, &mut grad);
        residual = sup_norm(&grad);
        history.push(energy * st.vol);
        let mut prev_step: Option<(Vec<f64>, Vec<f64>)> = None;
        while residual > stage_tol {
            if iterations >= options.max_iterations {
                break 'stages;
            }
            iterations += 1;
            let w = st.weights(&u, p, eps, options.linearization);
            let diag = st.diagonal(&w);
            let rhs: Vec<f64> = grad.par_iter().map(|g| -g / p).collect();
            let rtol = (0.1 * stage_tol / residual).clamp(1e-6, 1e-2);
            let (d, its) = pcg(&st, &w, &diag, &rhs, rtol, options.max_linear_iterations);
            linear_iterations += its;
            let mut outcome = line_search(&st, &u, energy, &grad, &d, p, eps, &mut duals);
            if outcome.is_none() {
                // scaled gradient step with a Barzilai-Borwein length
                fallback_steps += 1;
                let bb = match &prev_step {
                    Some((ds, dg)) => {
                        let sy = dot(ds, dg);
                        if sy > 0.0 {
                            dot(ds, ds) / sy
                        } else {
                            1.0
                        }
                    }
                    None => 1.0,
                };
                let dir: Vec<f64> = grad.par_iter().zip(&diag).map(|(g, dg)| -bb * g / dg.max(f64::MIN_POSITIVE)).collect();
                outcome = line_search(&st, &u, energy, &grad, &dir, p, eps, &mut duals);
            }
            let Some(next) = outcome else {
                stalled = true;
                break 'stages;
            };
            let ds: Vec<f64> = next.u.iter().zip(&u).map(|(a, b)| a - b).collect();
            let dg: Vec<f64> = next.grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
            prev_step = Some((ds, dg));
            u = next.u;
            energy = next.energy;
            grad = next.grad;
            residual = sup_norm(&grad);
            history.push(energy * st.vol);
            log::debug!("eps {eps:e} iter {iterations}: energy {:.12e} residual {residual:e} cg {its}", energy * st.vol);
        }
    }
    let final_eps = *options.epsilon_schedule.last().expect("validated nonempty");
    let converged = !stalled && residual <= options.tolerance && history.len() > last_stage;

    let mut values = init.values.clone();
    for (s, &node) in init.mask.free.iter().enumerate() {
        values[node] = u[s];
    }
    let (lo, hi) = data_range(&init);
    let bound_violation = u.iter().map(|v| (lo - v).max(v - hi).max(0.0)).fold(0.0, f64::max);
    let field = ScalarField::new(init.grid.clone(), init.mask.clone(), values)?;
    let report = SolveReport {
        iterations,
        linear_iterations,
        fallback_steps,
        final_energy: st.energy(&u, p, final_eps) * st.vol,
        final_residual: residual,
        epsilon_schedule: options.epsilon_schedule.clone(),
        energy_history: history,
        converged,
        bound_violation,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    if converged {
        Ok((field, report))
    } else {
        Err(Error::NotConverged(Box::new(PartialSolve { field, report })))
    }
}

fn data_range(field: &ScalarField) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (node, l) in field.mask.labels.iter().enumerate() {
        if *l != NodeLabel::Free {
            lo = lo.min(field.values[node]);
            hi = hi.max(field.values[node]);
        }
    }
    (lo, hi)
}

/// `u_lambda(z) = u(delta_lambda z)` on the grid over `delta_{-lambda}(box)`.
pub fn resample_dilated(field: &ScalarField, lambda: f64) -> Result<ScalarField> {
    if !lambda.is_finite() {
        return Err(Error::NonFinite("dilation parameter"));
    }
    if lambda == 0.0 {
        return Ok(field.clone());
    }
    let grid = field.grid.dilated(-lambda);
    let e = lambda.exp();
    let values: Option<Vec<f64>> = (0..grid.len())
        .into_par_iter()
        .map(|node| {
            let z = grid.coords(node);
            field.sample_trilinear([z[0] * e, z[1] * e, z[2] * e * e])
        })
        .collect();
    let values = values.ok_or(Error::OutOfGrid)?;
    ScalarField::new(grid, field.mask.clone(), values)
}
