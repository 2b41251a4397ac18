//! Heisenberg group algebra in exponential coordinates.
//!
//! A point of `H^n` is stored as `(x_1..x_n, y_1..y_n, t)`. The group law is
//!
//! ```text
//! (x, y, t) . (x', y', t') = (x + x', y + y', t + t' + 2 sum_i (x'_i y_i - x_i y'_i))
//! ```
//!
//! which is the law whose left-invariant frame is
//! `X_i = d/dx_i + 2 y_i d/dt`, `Y_i = d/dy_i - 2 x_i d/dt`.

use std::ops::Index;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ambient dimension data: `n` and the homogeneous dimension `Q = 2n + 2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AmbientParams {
    n: usize,
}

impl AmbientParams {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter("n must be at least 1".into()));
        }
        Ok(AmbientParams { n })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Homogeneous dimension.
    pub fn q(&self) -> usize {
        2 * self.n + 2
    }

    /// Euclidean dimension `2n + 1` of the underlying space.
    pub fn dim(&self) -> usize {
        2 * self.n + 1
    }
}

impl Default for AmbientParams {
    fn default() -> Self {
        AmbientParams { n: 1 }
    }
}

/// A point of `H^n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Point {
    coords: Vec<f64>,
}

impl Point {
    pub fn new(x: &[f64], y: &[f64], t: f64) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch { expected: x.len(), found: y.len() });
        }
        let mut coords = Vec::with_capacity(2 * x.len() + 1);
        coords.extend_from_slice(x);
        coords.extend_from_slice(y);
        coords.push(t);
        Self::from_coords(coords)
    }

    /// Builds a point from the flat layout `(x_1..x_n, y_1..y_n, t)`.
    pub fn from_coords(coords: Vec<f64>) -> Result<Self> {
        let len = coords.len();
        if len < 3 || len % 2 == 0 {
            return Err(Error::BadCoordinateLength(len));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("point coordinates"));
        }
        Ok(Point { coords })
    }

    pub fn origin(n: usize) -> Self {
        Point { coords: vec![0.0; 2 * n + 1] }
    }

    /// Shorthand for `n = 1` points.
    pub fn h1(x: f64, y: f64, t: f64) -> Self {
        Point { coords: vec![x, y, t] }
    }

    pub fn n(&self) -> usize {
        self.coords.len() / 2
    }

    pub fn x(&self) -> &[f64] {
        &self.coords[..self.n()]
    }

    pub fn y(&self) -> &[f64] {
        let n = self.n();
        &self.coords[n..2 * n]
    }

    pub fn t(&self) -> f64 {
        self.coords[self.coords.len() - 1]
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn is_origin(&self) -> bool {
        self.coords.iter().all(|&c| c == 0.0)
    }

    fn check_same(&self, other: &Point) -> Result<()> {
        if self.n() != other.n() {
            return Err(Error::DimensionMismatch { expected: self.n(), found: other.n() });
        }
        Ok(())
    }
}

impl TryFrom<Vec<f64>> for Point {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Point::from_coords(v)
    }
}

impl From<Point> for Vec<f64> {
    fn from(p: Point) -> Vec<f64> {
        p.coords
    }
}

/// Euclidean tangent vector of `R^{2n+1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FullVector(pub Vec<f64>);

/// Coefficients in the horizontal frame `X_1..X_n, Y_1..Y_n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizontalVector(pub Vec<f64>);

macro_rules! vector_impls {
    ($ty:ident) => {
        impl $ty {
            pub fn zeros(len: usize) -> Self {
                $ty(vec![0.0; len])
            }

            pub fn len(&self) -> usize {
                self.0.len()
            }

            pub fn is_empty(&self) -> bool {
                self.0.is_empty()
            }

            pub fn dot(&self, other: &Self) -> f64 {
                self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
            }

            pub fn norm(&self) -> f64 {
                self.dot(self).sqrt()
            }

            pub fn as_slice(&self) -> &[f64] {
                &self.0
            }
        }

        impl Index<usize> for $ty {
            type Output = f64;

            fn index(&self, i: usize) -> &f64 {
                &self.0[i]
            }
        }
    };
}

vector_impls!(FullVector);
vector_impls!(HorizontalVector);

impl FullVector {
    /// Euclidean pairing with a point viewed as a vector field value.
    pub fn scaled(&self, s: f64) -> FullVector {
        FullVector(self.0.iter().map(|c| c * s).collect())
    }
}

// Slice kernels. Callers guarantee equal odd lengths.

pub(crate) fn product_into(a: &[f64], b: &[f64], out: &mut [f64]) {
    let n = a.len() / 2;
    let mut symp = 0.0;
    for i in 0..n {
        let (xa, ya) = (a[i], a[n + i]);
        let (xb, yb) = (b[i], b[n + i]);
        symp += xb * ya - xa * yb;
        out[i] = xa + xb;
        out[n + i] = ya + yb;
    }
    out[2 * n] = a[2 * n] + b[2 * n] + 2.0 * symp;
}

/// `rho^4 = (sum x_i^2 + y_i^2)^2 + t^2`.
pub(crate) fn rho4(z: &[f64]) -> f64 {
    let n = z.len() / 2;
    let s: f64 = z[..2 * n].iter().map(|c| c * c).sum();
    s * s + z[2 * n] * z[2 * n]
}

/// Euclidean gradient of `rho^4` at `z`, written into `out`.
pub(crate) fn rho4_gradient_into(z: &[f64], out: &mut [f64]) {
    let n = z.len() / 2;
    let s: f64 = z[..2 * n].iter().map(|c| c * c).sum();
    for k in 0..2 * n {
        out[k] = 4.0 * s * z[k];
    }
    out[2 * n] = 2.0 * z[2 * n];
}

/// `w^{-1} . z` on slices.
pub(crate) fn left_translate_inverse(w: &[f64], z: &[f64], out: &mut [f64]) {
    let n = z.len() / 2;
    let mut symp = 0.0;
    for i in 0..n {
        // (-w) . z
        symp += z[i] * (-w[n + i]) - (-w[i]) * z[n + i];
        out[i] = z[i] - w[i];
        out[n + i] = z[n + i] - w[n + i];
    }
    out[2 * n] = z[2 * n] - w[2 * n] + 2.0 * symp;
}

/// Pulls a covector at `w^{-1} z` back through `z -> w^{-1} z`.
///
/// `g` is the gradient of some `F` at `w^{-1} z`; the result is the gradient of
/// `z -> F(w^{-1} z)` at `z`.
pub(crate) fn pullback_left_inverse(w: &[f64], g: &[f64], out: &mut [f64]) {
    let n = w.len() / 2;
    let gt = g[2 * n];
    for i in 0..n {
        out[i] = g[i] - 2.0 * w[n + i] * gt;
        out[n + i] = g[n + i] + 2.0 * w[i] * gt;
    }
    out[2 * n] = gt;
}

pub fn group_product(a: &Point, b: &Point) -> Result<Point> {
    a.check_same(b)?;
    let mut out = vec![0.0; a.coords.len()];
    product_into(&a.coords, &b.coords, &mut out);
    Ok(Point { coords: out })
}

pub fn group_inverse(a: &Point) -> Point {
    Point { coords: a.coords.iter().map(|c| -c).collect() }
}

/// Koranyi gauge `rho(z)`.
pub fn gauge_norm(a: &Point) -> f64 {
    rho4(&a.coords).sqrt().sqrt()
}

/// Gauge distance `rho(w^{-1} . z)` between `z` and `w`.
pub fn gauge_distance(z: &Point, w: &Point) -> Result<f64> {
    z.check_same(w)?;
    let mut v = vec![0.0; z.coords.len()];
    left_translate_inverse(&w.coords, &z.coords, &mut v);
    Ok(rho4(&v).sqrt().sqrt())
}

/// Anisotropic dilation `(x, y, t) -> (e^l x, e^l y, e^{2l} t)`.
pub fn dilate_point(a: &Point, lambda: f64) -> Point {
    let mut coords = a.coords.clone();
    dilate_in_place(&mut coords, lambda);
    Point { coords }
}

pub(crate) fn dilate_in_place(z: &mut [f64], lambda: f64) {
    let e = lambda.exp();
    let last = z.len() - 1;
    for c in &mut z[..last] {
        *c *= e;
    }
    z[last] *= e * e;
}

/// Dilation-generating field `Z = (x, y, 2t)`.
pub fn z_field(a: &Point) -> FullVector {
    let mut v = a.coords.clone();
    let last = v.len() - 1;
    v[last] *= 2.0;
    FullVector(v)
}

/// The frame `X_1..X_n, Y_1..Y_n` at `a`, as Euclidean vectors.
pub fn horizontal_frame(a: &Point) -> Vec<FullVector> {
    let n = a.n();
    let dim = 2 * n + 1;
    let mut frame = Vec::with_capacity(2 * n);
    for i in 0..n {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        v[2 * n] = 2.0 * a.coords[n + i];
        frame.push(FullVector(v));
    }
    for j in 0..n {
        let mut v = vec![0.0; dim];
        v[n + j] = 1.0;
        v[2 * n] = -2.0 * a.coords[j];
        frame.push(FullVector(v));
    }
    frame
}

/// Horizontal part of a Euclidean gradient `g = grad f(a)`: `(X_1 f, .., Y_n f)`.
pub fn project_horizontal(g: &FullVector, a: &Point) -> Result<HorizontalVector> {
    if g.len() != a.coords.len() {
        return Err(Error::DimensionMismatch { expected: a.n(), found: g.len() / 2 });
    }
    let n = a.n();
    let gt = g.0[2 * n];
    let mut h = Vec::with_capacity(2 * n);
    for i in 0..n {
        h.push(g.0[i] + 2.0 * a.coords[n + i] * gt);
    }
    for j in 0..n {
        h.push(g.0[n + j] - 2.0 * a.coords[j] * gt);
    }
    Ok(HorizontalVector(h))
}

/// Euclidean gradient of `rho^4` (smooth everywhere, unlike `rho`).
pub fn gauge_norm4_gradient(a: &Point) -> FullVector {
    let mut g = vec![0.0; a.coords.len()];
    rho4_gradient_into(&a.coords, &mut g);
    FullVector(g)
}

/// Euclidean gradient of `rho` away from the origin.
pub fn gauge_norm_gradient(a: &Point) -> Result<FullVector> {
    let r4 = rho4(&a.coords);
    if r4 == 0.0 {
        return Err(Error::Singularity { distance: 0.0, guard: 0.0 });
    }
    let r = r4.sqrt().sqrt();
    Ok(gauge_norm4_gradient(a).scaled(1.0 / (4.0 * r * r * r)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn identity_and_inverse() {
        let z = Point::h1(0.3, -1.2, 2.5);
        let o = Point::origin(1);
        assert_eq!(group_product(&o, &z).unwrap(), z);
        assert_eq!(group_product(&z, &o).unwrap(), z);
        let zi = group_inverse(&z);
        assert!(group_product(&z, &zi).unwrap().is_origin());
        assert_eq!(group_inverse(&Point::h1(1.0, 2.0, 3.0)).coords(), &[-1.0, -2.0, -3.0]);
        assert!(group_inverse(&o).is_origin());
    }

    #[test]
    fn hand_evaluated_product() {
        let p = group_product(&Point::h1(1.0, 0.0, 0.0), &Point::h1(0.0, 1.0, 0.0)).unwrap();
        assert_eq!(p.coords(), &[1.0, 1.0, -2.0]);
        // non-abelian: the reverse order flips the sign of the bilinear term
        let q = group_product(&Point::h1(0.0, 1.0, 0.0), &Point::h1(1.0, 0.0, 0.0)).unwrap();
        assert_eq!(q.coords(), &[1.0, 1.0, 2.0]);
    }

    #[test]
    fn dimension_mismatch() {
        let a = Point::origin(1);
        let b = Point::origin(2);
        assert!(matches!(group_product(&a, &b), Err(Error::DimensionMismatch { .. })));
        assert!(Point::from_coords(vec![1.0, 2.0]).is_err());
        assert!(Point::from_coords(vec![1.0, f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn gauge_values() {
        assert_eq!(gauge_norm(&Point::origin(1)), 0.0);
        assert_eq!(gauge_norm(&Point::h1(1.0, 0.0, 0.0)), 1.0);
        assert!((gauge_norm(&Point::h1(0.0, 0.0, 4.0)) - 2.0).abs() < 1e-15);
        let z = Point::h1(0.2, 0.7, -0.4);
        assert_eq!(gauge_distance(&z, &z).unwrap(), 0.0);
        assert_eq!(gauge_distance(&z, &Point::origin(1)).unwrap(), gauge_norm(&z));
        let a = Point::h1(1.0, 0.0, 0.0);
        let b = Point::h1(0.0, 1.0, 0.0);
        let composed = gauge_norm(&group_product(&group_inverse(&b), &a).unwrap());
        assert!((gauge_distance(&a, &b).unwrap() - composed).abs() < 1e-15);
        // (-b).a = (1, -1, 2(1*(-1) - 0)) = (1, -1, -2): rho = (4 + 4)^(1/4)
        assert!((composed - 8f64.powf(0.25)).abs() < 1e-14);
    }

    #[test]
    fn dilation_examples() {
        let z = Point::h1(1.0, 1.0, 1.0);
        assert_eq!(dilate_point(&z, 0.0), z);
        let d = dilate_point(&z, 2f64.ln());
        assert!(close(d.coords(), &[2.0, 2.0, 4.0], 1e-14));
    }

    #[test]
    fn z_field_and_frame() {
        assert_eq!(z_field(&Point::origin(1)).0, vec![0.0; 3]);
        assert_eq!(z_field(&Point::h1(1.0, 2.0, 3.0)).0, vec![1.0, 2.0, 6.0]);
        let f = horizontal_frame(&Point::origin(1));
        assert_eq!(f[0].0, vec![1.0, 0.0, 0.0]);
        assert_eq!(f[1].0, vec![0.0, 1.0, 0.0]);
        let f = horizontal_frame(&Point::h1(1.0, 2.0, 0.0));
        assert_eq!(f[0].0, vec![1.0, 0.0, 4.0]);
        assert_eq!(f[1].0, vec![0.0, 1.0, -2.0]);
    }

    #[test]
    fn horizontal_projection_examples() {
        let a = Point::h1(0.3, -0.8, 1.1);
        // f = t
        let h = project_horizontal(&FullVector(vec![0.0, 0.0, 1.0]), &a).unwrap();
        assert!(close(&h.0, &[2.0 * -0.8, -2.0 * 0.3], 1e-15));
        // f = x
        let h = project_horizontal(&FullVector(vec![1.0, 0.0, 0.0]), &a).unwrap();
        assert_eq!(h.0, vec![1.0, 0.0]);
        // f = rho^4 at (1,1,1)
        let p = Point::h1(1.0, 1.0, 1.0);
        let g = gauge_norm4_gradient(&p);
        assert_eq!(g.0, vec![8.0, 8.0, 2.0]);
        assert_eq!(project_horizontal(&g, &p).unwrap().0, vec![12.0, 4.0]);
    }

    #[test]
    fn frame_is_left_invariant() {
        // d/ds (a . s e_x)|_{s=0} must equal X_1(a)
        let a = Point::h1(0.4, -1.3, 0.7);
        let h = 1e-6;
        for (k, v) in horizontal_frame(&a).iter().enumerate() {
            let mut e = vec![0.0; 3];
            e[k] = h;
            let plus = group_product(&a, &Point::from_coords(e.clone()).unwrap()).unwrap();
            e[k] = -h;
            let minus = group_product(&a, &Point::from_coords(e).unwrap()).unwrap();
            let fd: Vec<f64> =
                plus.coords().iter().zip(minus.coords()).map(|(p, m)| (p - m) / (2.0 * h)).collect();
            assert!(close(&fd, &v.0, 1e-8), "{fd:?} vs {:?}", v.0);
        }
    }

    #[test]
    fn commutator_is_minus_four_t() {
        // [X, Y] f = X(Y f) - Y(X f) on the polynomial f = t + x^2 y.
        let f = |z: &[f64]| z[2] + z[0] * z[0] * z[1];
        let deriv = |g: &dyn Fn(&[f64]) -> f64, z: &[f64], dir: &[f64]| {
            let h = 1e-4;
            let p: Vec<f64> = z.iter().zip(dir).map(|(a, d)| a + h * d).collect();
            let m: Vec<f64> = z.iter().zip(dir).map(|(a, d)| a - h * d).collect();
            (g(&p) - g(&m)) / (2.0 * h)
        };
        let xf = |z: &[f64]| deriv(&f, z, &[1.0, 0.0, 2.0 * z[1]]);
        let yf = |z: &[f64]| deriv(&f, z, &[0.0, 1.0, -2.0 * z[0]]);
        let z = [0.3, 0.5, -0.2];
        let xy = deriv(&yf, &z, &[1.0, 0.0, 2.0 * z[1]]);
        let yx = deriv(&xf, &z, &[0.0, 1.0, -2.0 * z[0]]);
        // T f = 1, plus the x^2 y part which commutes: [X,Y](x^2 y) = 0.
        assert!((xy - yx - (-4.0)).abs() < 1e-5, "{}", xy - yx);
    }

    #[test]
    fn higher_n_layout() {
        let p = Point::new(&[1.0, 2.0], &[3.0, 4.0], 5.0).unwrap();
        assert_eq!(p.n(), 2);
        assert_eq!(p.x(), &[1.0, 2.0]);
        assert_eq!(p.y(), &[3.0, 4.0]);
        assert_eq!(p.t(), 5.0);
        let q = Point::new(&[0.5, -1.0], &[0.0, 2.0], 0.0).unwrap();
        let pq = group_product(&p, &q).unwrap();
        // 2 * sum(x'_i y_i - x_i y'_i) = 2 * ((0.5*3 - 1*0) + (-1*4 - 2*2))
        assert!((pq.t() - (5.0 + 2.0 * (1.5 - 8.0))).abs() < 1e-14);
    }
}
