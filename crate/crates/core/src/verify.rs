//! Certified quantities of a solved field: the pairing `<grad u, Z>`, the
//! empirical constant `M`, level surfaces and their starshapedness, and
//! dilation difference quotients.
//!
//! Everything is evaluated on certified nodes only: free nodes whose
//! Chebyshev distance to every pinned node is at least `m`.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domains::StarshapednessReport;
use crate::error::{Error, Result};
use crate::heis::{FullVector, Point};
use crate::solver::{Grid, ScalarField};

/// Default certified-layer margin.
pub const DEFAULT_MARGIN: usize = 2;

/// Stated in every certificate: the discrete check samples the whole grid and
/// cannot single out points where the continuum gradient might fail to exist.
pub const DIFFERENTIABILITY_NOTE: &str =
    "pairing sampled at all certified nodes; points of non-differentiability of the continuum solution are not detectable";

/// Central-difference gradient at free nodes; zero elsewhere.
pub fn full_gradient(field: &ScalarField) -> Vec<[f64; 3]> {
    let g = field.grid();
    let h = g.spacing();
    let strides = [g.stride(0), g.stride(1), g.stride(2)];
    let v = field.values();
    (0..g.len())
        .into_par_iter()
        .map(|node| {
            if !field.mask().is_free(node) {
                return [0.0; 3];
            }
            std::array::from_fn(|ax| (v[node + strides[ax]] - v[node - strides[ax]]) / (2.0 * h[ax]))
        })
        .collect()
}

pub fn full_gradient_at(field: &ScalarField, node: usize) -> Result<FullVector> {
    if node >= field.grid().len() || !field.mask().is_free(node) {
        return Err(Error::NotFree(node));
    }
    let g = field.grid();
    let v = field.values();
    Ok(FullVector(
        (0..3)
            .map(|ax| {
                let s = g.stride(ax);
                (v[node + s] - v[node - s]) / (2.0 * g.spacing()[ax])
            })
            .collect(),
    ))
}

/// `<grad, Z(z)>` with `Z = (x, y, 2t)`.
fn pair_z(grad: [f64; 3], z: [f64; 3]) -> f64 {
    grad[0] * z[0] + grad[1] * z[1] + 2.0 * grad[2] * z[2]
}

/// Free nodes at Chebyshev distance at least `m` from every non-free node.
pub fn certified_nodes(field: &ScalarField, m: usize) -> Result<Vec<bool>> {
    if m == 0 {
        return Err(Error::InvalidParameter("margin m must be at least 1".into()));
    }
    let g = field.grid();
    let mut bad: Vec<bool> = (0..g.len()).map(|i| !field.mask().is_free(i)).collect();
    let reach = m - 1;
    if reach > 0 {
        // separable max filter of half-width m - 1
        for ax in 0..3 {
            let n = g.resolution()[ax];
            let stride = g.stride(ax);
            let src = bad.clone();
            bad.par_iter_mut().enumerate().for_each(|(node, b)| {
                if *b {
                    return;
                }
                let i = g.ijk(node)[ax];
                let lo = i.saturating_sub(reach);
                let hi = (i + reach).min(n - 1);
                *b = (lo..=hi).any(|j| src[node + j * stride - i * stride]);
            });
        }
    }
    Ok(bad.into_iter().map(|b| !b).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairingField {
    pub margin: usize,
    pub nodes: Vec<usize>,
    pub values: Vec<f64>,
}

pub fn pairing_field(field: &ScalarField, m: usize) -> Result<PairingField> {
    let certified = certified_nodes(field, m)?;
    let grad = full_gradient(field);
    let g = field.grid();
    let nodes: Vec<usize> = (0..g.len()).filter(|&i| certified[i]).collect();
    if nodes.is_empty() {
        return Err(Error::NoCertifiedNodes(m));
    }
    let values = nodes.par_iter().map(|&n| pair_z(grad[n], g.coords(n))).collect();
    Ok(PairingField { margin: m, nodes, values })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignCertificate {
    /// `-max <grad u, Z>` over certified nodes.
    pub empirical_m: f64,
    pub worst_node: Point,
    pub margin: usize,
    pub certified_count: usize,
    /// Smallest full-gradient norm over certified nodes.
    pub min_gradient_norm: f64,
    pub pass: bool,
    pub note: String,
}

pub fn sign_certificate(field: &ScalarField, m: usize) -> Result<SignCertificate> {
    let pf = pairing_field(field, m)?;
    let grad = full_gradient(field);
    let g = field.grid();
    let (mut worst, mut max) = (pf.nodes[0], f64::NEG_INFINITY);
    for (&n, &v) in pf.nodes.iter().zip(&pf.values) {
        if v > max {
            max = v;
            worst = n;
        }
    }
    let min_gradient_norm = pf
        .nodes
        .iter()
        .map(|&n| grad[n].iter().map(|c| c * c).sum::<f64>().sqrt())
        .fold(f64::INFINITY, f64::min);
    Ok(SignCertificate {
        empirical_m: -max,
        worst_node: g.point(worst),
        margin: m,
        certified_count: pf.nodes.len(),
        min_gradient_norm,
        pass: -max > 0.0,
        note: DIFFERENTIABILITY_NOTE.to_string(),
    })
}

/// Triangulated level set `{u = t}` with unit normals `-grad u / |grad u|`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelSurface {
    pub level: f64,
    pub vertices: Vec<[f64; 3]>,
    pub normals: Vec<[f64; 3]>,
    /// `<normal, Z>` at each vertex.
    pub pairing: Vec<f64>,
    pub triangles: Vec<[usize; 3]>,
    /// Edges used by exactly one triangle; zero for a closed mesh.
    pub boundary_edge_count: usize,
}

impl LevelSurface {
    pub fn vertex_point(&self, i: usize) -> Point {
        let v = self.vertices[i];
        Point::h1(v[0], v[1], v[2])
    }
}

/// Kuhn split of the unit cube: one tetrahedron per axis permutation, all
/// sharing the diagonal from corner 0 to corner 7 (corner bits are x, y, t).
const KUHN: [[usize; 4]; 6] = [
    [0, 1, 3, 7],
    [0, 1, 5, 7],
    [0, 2, 3, 7],
    [0, 2, 6, 7],
    [0, 4, 5, 7],
    [0, 4, 6, 7],
];

fn corner_node(g: &Grid, base: [usize; 3], corner: usize) -> usize {
    g.index([base[0] + (corner & 1), base[1] + (corner >> 1 & 1), base[2] + (corner >> 2 & 1)])
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

struct MeshBuilder<'a> {
    field: &'a ScalarField,
    grad: &'a [[f64; 3]],
    level: f64,
    ids: HashMap<(usize, usize), usize>,
    vertices: Vec<[f64; 3]>,
    normals: Vec<[f64; 3]>,
    triangles: Vec<[usize; 3]>,
}

impl MeshBuilder<'_> {
    fn vertex(&mut self, a: usize, b: usize) -> usize {
        let key = (a.min(b), a.max(b));
        if let Some(&id) = self.ids.get(&key) {
            return id;
        }
        let (a, b) = key;
        let g = self.field.grid();
        let (ua, ub) = (self.field.value(a), self.field.value(b));
        let s = ((self.level - ua) / (ub - ua)).clamp(0.0, 1.0);
        let (za, zb) = (g.coords(a), g.coords(b));
        let pos = std::array::from_fn(|k| za[k] + s * (zb[k] - za[k]));
        let mut n: [f64; 3] = std::array::from_fn(|k| -(self.grad[a][k] + s * (self.grad[b][k] - self.grad[a][k])));
        let norm = dot3(n, n).sqrt();
        if norm > 0.0 {
            n = n.map(|c| c / norm);
        } else {
            // degenerate gradient: fall back to the edge direction towards lower values
            let d = sub(zb, za);
            let sign = if ub > ua { -1.0 } else { 1.0 };
            let dn = dot3(d, d).sqrt();
            n = d.map(|c| sign * c / dn);
        }
        let id = self.vertices.len();
        self.vertices.push(pos);
        self.normals.push(n);
        self.ids.insert(key, id);
        id
    }

    fn triangle(&mut self, mut t: [usize; 3]) {
        if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
            return;
        }
        let [a, b, c] = t.map(|i| self.vertices[i]);
        let geo = cross(sub(b, a), sub(c, a));
        let avg: [f64; 3] = std::array::from_fn(|k| self.normals[t[0]][k] + self.normals[t[1]][k] + self.normals[t[2]][k]);
        if dot3(geo, avg) < 0.0 {
            t.swap(1, 2);
        }
        self.triangles.push(t);
    }

    fn tetra(&mut self, nodes: [usize; 4]) {
        let above: Vec<bool> = nodes.iter().map(|&n| self.field.value(n) >= self.level).collect();
        let ins: Vec<usize> = (0..4).filter(|&i| above[i]).collect();
        let outs: Vec<usize> = (0..4).filter(|&i| !above[i]).collect();
        match ins.len() {
            1 | 3 => {
                let (lone, rest) = if ins.len() == 1 { (ins[0], &outs) } else { (outs[0], &ins) };
                let v: Vec<usize> = rest.iter().map(|&r| self.vertex(nodes[lone], nodes[r])).collect();
                self.triangle([v[0], v[1], v[2]]);
            }
            2 => {
                let (a, b) = (ins[0], ins[1]);
                let (c, d) = (outs[0], outs[1]);
                let v_ac = self.vertex(nodes[a], nodes[c]);
                let v_ad = self.vertex(nodes[a], nodes[d]);
                let v_bc = self.vertex(nodes[b], nodes[c]);
                let v_bd = self.vertex(nodes[b], nodes[d]);
                // quad ac-ad-bd-bc
                self.triangle([v_ac, v_ad, v_bd]);
                self.triangle([v_ac, v_bd, v_bc]);
            }
            _ => {}
        }
    }
}

/// Marching tetrahedra over cubes whose eight corners are certified.
pub fn extract_level_surface_with_margin(field: &ScalarField, t: f64, m: usize) -> Result<LevelSurface> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::InvalidParameter(format!("level must lie in (0, 1), got {t}")));
    }
    let certified = certified_nodes(field, m)?;
    let grad = full_gradient(field);
    let g = field.grid();
    let res = g.resolution();
    let mut mb = MeshBuilder {
        field,
        grad: &grad,
        level: t,
        ids: HashMap::new(),
        vertices: Vec::new(),
        normals: Vec::new(),
        triangles: Vec::new(),
    };
    for k in 0..res[2] - 1 {
        for j in 0..res[1] - 1 {
            for i in 0..res[0] - 1 {
                let base = [i, j, k];
                let corners: [usize; 8] = std::array::from_fn(|c| corner_node(g, base, c));
                if !corners.iter().all(|&n| certified[n]) {
                    continue;
                }
                let vals = corners.map(|n| field.value(n) >= t);
                if vals.iter().all(|&a| a) || vals.iter().all(|&a| !a) {
                    continue;
                }
                for tet in KUHN {
                    mb.tetra(tet.map(|c| corners[c]));
                }
            }
        }
    }
    if mb.triangles.is_empty() {
        return Err(Error::EmptySurface(t));
    }
    let mut edge_use: HashMap<(usize, usize), u32> = HashMap::new();
    for tri in &mb.triangles {
        for e in 0..3 {
            let (a, b) = (tri[e], tri[(e + 1) % 3]);
            *edge_use.entry((a.min(b), a.max(b))).or_default() += 1;
        }
    }
    let boundary_edge_count = edge_use.values().filter(|&&c| c == 1).count();
    let pairing = mb.vertices.iter().zip(&mb.normals).map(|(v, n)| pair_z(*n, *v)).collect();
    Ok(LevelSurface {
        level: t,
        vertices: mb.vertices,
        normals: mb.normals,
        pairing,
        triangles: mb.triangles,
        boundary_edge_count,
    })
}

pub fn extract_level_surface(field: &ScalarField, t: f64) -> Result<LevelSurface> {
    extract_level_surface_with_margin(field, t, DEFAULT_MARGIN)
}

/// Minimum of `<normal, Z>` over the surface vertices.
pub fn level_starshape(surface: &LevelSurface) -> Result<StarshapednessReport> {
    StarshapednessReport::from_pairs(surface.vertices.iter().zip(&surface.normals).map(|(v, n)| (&v[..], &n[..])))
        .ok_or(Error::EmptySurface(surface.level))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DilationComparisonReport {
    pub lambda: f64,
    pub margin: usize,
    /// `max (u(delta_lambda z) - u(z)) / lambda` over certified nodes.
    pub max_quotient: f64,
    pub worst_node: Point,
    pub certified_count: usize,
    pub pass: bool,
}

/// `u(delta_lambda z)`, extended by the pinned value outside the box when all
/// box faces carry the same pinned value.
struct DilatedSampler<'a> {
    field: &'a ScalarField,
    face_value: Option<f64>,
}

impl<'a> DilatedSampler<'a> {
    fn new(field: &'a ScalarField) -> Self {
        let g = field.grid();
        let mut face_value = None;
        let mut uniform = true;
        for node in (0..g.len()).filter(|&n| g.on_face(n)) {
            let v = field.value(node);
            match face_value {
                None => face_value = Some(v),
                Some(f) if f != v => uniform = false,
                _ => {}
            }
        }
        DilatedSampler { field, face_value: face_value.filter(|_| uniform) }
    }

    fn at(&self, z: [f64; 3], lambda: f64) -> Result<f64> {
        let e = lambda.exp();
        let w = [z[0] * e, z[1] * e, z[2] * e * e];
        match self.field.sample_trilinear(w) {
            Some(v) => Ok(v),
            None => self.face_value.ok_or(Error::OutOfGrid),
        }
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidParameter(format!("lambda must be positive, got {lambda}")));
    }
    Ok(())
}

/// `(u(delta_lambda z) - u(z)) / lambda` at one node.
pub fn dilation_quotient_at(field: &ScalarField, node: usize, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    if node >= field.grid().len() {
        return Err(Error::OutOfGrid);
    }
    let s = DilatedSampler::new(field);
    Ok((s.at(field.grid().coords(node), lambda)? - field.value(node)) / lambda)
}

/// Passes when the largest quotient is below `-tolerance`.
pub fn dilation_comparison_check(
    field: &ScalarField,
    lambda: f64,
    m: usize,
    tolerance: f64,
) -> Result<DilationComparisonReport> {
    check_lambda(lambda)?;
    let certified = certified_nodes(field, m)?;
    let g = field.grid();
    let nodes: Vec<usize> = (0..g.len()).filter(|&i| certified[i]).collect();
    if nodes.is_empty() {
        return Err(Error::NoCertifiedNodes(m));
    }
    let sampler = DilatedSampler::new(field);
    let quotients: Vec<f64> = nodes
        .par_iter()
        .map(|&n| Ok((sampler.at(g.coords(n), lambda)? - field.value(n)) / lambda))
        .collect::<Result<_>>()?;
    let (mut worst, mut max) = (nodes[0], f64::NEG_INFINITY);
    for (&n, &q) in nodes.iter().zip(&quotients) {
        if q > max {
            max = q;
            worst = n;
        }
    }
    Ok(DilationComparisonReport {
        lambda,
        margin: m,
        max_quotient: max,
        worst_node: g.point(worst),
        certified_count: nodes.len(),
        pass: max < -tolerance,
    })
}
