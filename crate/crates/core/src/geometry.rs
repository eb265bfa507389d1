//! Poincaré-ball primitives at curvature −1.
//!
//! Every constructed point is kept at Euclidean norm ≤ `1 − BALL_EPS`, so the
//! conformal factor and the distance stay finite under arbitrary composition.
//! The exponential map at the origin uses the `tanh(λ₀‖v‖/2)` normalization
//! with `λ₀ = 2`, i.e. `exp0(v) = tanh(‖v‖) v/‖v‖`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Radial margin kept between every point and the unit sphere.
pub const BALL_EPS: f64 = 1e-5;

/// Largest admissible Euclidean norm of a ball point.
pub const MAX_NORM: f64 = 1.0 - BALL_EPS;

/// A point strictly inside the unit ball.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct PoincarePoint {
    coords: Vec<f64>,
}

impl PoincarePoint {
    pub fn origin(dim: usize) -> Self {
        assert!(dim >= 1, "ball dimension must be at least 1");
        Self {
            coords: vec![0.0; dim],
        }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.coords)
    }

    pub fn norm_sq(&self) -> f64 {
        dot(&self.coords, &self.coords)
    }

    /// Möbius negation, which is plain coordinate negation on the ball.
    pub fn neg(&self) -> Self {
        Self {
            coords: self.coords.iter().map(|c| -c).collect(),
        }
    }
}

impl TryFrom<Vec<f64>> for PoincarePoint {
    type Error = Error;

    fn try_from(coords: Vec<f64>) -> Result<Self> {
        project_to_ball(&coords)
    }
}

impl From<PoincarePoint> for Vec<f64> {
    fn from(p: PoincarePoint) -> Self {
        p.coords
    }
}

/// A tangent vector anchored at a ball point.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentVector {
    base: PoincarePoint,
    direction: Vec<f64>,
}

impl TangentVector {
    pub fn new(base: PoincarePoint, direction: Vec<f64>) -> Result<Self> {
        if direction.len() != base.dim() {
            return Err(invalid(format!(
                "tangent direction has dimension {}, base point has {}",
                direction.len(),
                base.dim()
            )));
        }
        if direction.iter().any(|v| !v.is_finite()) {
            return Err(invalid("tangent direction is not finite"));
        }
        Ok(Self { base, direction })
    }

    pub fn zero(base: PoincarePoint) -> Self {
        let dim = base.dim();
        Self {
            base,
            direction: vec![0.0; dim],
        }
    }

    pub fn base(&self) -> &PoincarePoint {
        &self.base
    }

    pub fn direction(&self) -> &[f64] {
        &self.direction
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            base: self.base.clone(),
            direction: self.direction.iter().map(|v| v * s).collect(),
        }
    }

    /// Length measured by the Riemannian metric at the base point.
    pub fn metric_norm(&self) -> f64 {
        conformal_factor(&self.base) * norm(&self.direction)
    }
}

/// A sampled curve, parameterized uniformly on `[0, 1]`.
#[derive(Clone, Debug)]
pub struct Curve {
    samples: Vec<PoincarePoint>,
}

impl Curve {
    pub fn new(samples: Vec<PoincarePoint>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(invalid("a curve needs at least two samples"));
        }
        let dim = samples[0].dim();
        if samples.iter().any(|p| p.dim() != dim) {
            return Err(invalid("curve samples differ in dimension"));
        }
        Ok(Self { samples })
    }

    /// Samples the geodesic from `x` to `y` at `n` uniformly spaced parameters.
    pub fn geodesic(x: &PoincarePoint, y: &PoincarePoint, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(invalid("a curve needs at least two samples"));
        }
        let dir = log_at(x, y);
        let samples = (0..n)
            .map(|i| {
                let t = i as f64 / (n - 1) as f64;
                match i {
                    0 => x.clone(),
                    _ if i == n - 1 => y.clone(),
                    _ => exp_at(x, &dir.scaled(t)),
                }
            })
            .collect();
        Self::new(samples)
    }

    pub fn samples(&self) -> &[PoincarePoint] {
        &self.samples
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn check_dims(x: &PoincarePoint, y: &PoincarePoint) {
    assert_eq!(x.dim(), y.dim(), "ball points have mismatched dimensions");
}

/// Rescales `v` onto the closed ball of radius `1 − BALL_EPS` when it lies outside.
pub fn project_to_ball(v: &[f64]) -> Result<PoincarePoint> {
    if v.is_empty() {
        return Err(invalid("ball points need dimension ≥ 1"));
    }
    if v.iter().any(|c| !c.is_finite()) {
        return Err(invalid("cannot project a non-finite vector onto the ball"));
    }
    let mut coords = v.to_vec();
    clamp_in_place(&mut coords);
    Ok(PoincarePoint { coords })
}

/// Clamps a finite vector to the admissible radius. Returns whether it fired.
pub(crate) fn clamp_in_place(v: &mut [f64]) -> bool {
    let n = norm(v);
    if n > MAX_NORM {
        let mut s = MAX_NORM / n;
        // rounding can leave the rescaled norm an ulp above the bound
        while n * s > MAX_NORM || norm(&v.iter().map(|c| c * s).collect::<Vec<_>>()) > MAX_NORM {
            s *= 1.0 - f64::EPSILON;
        }
        v.iter_mut().for_each(|c| *c *= s);
        true
    } else {
        false
    }
}

/// `λ_x = 2 / (1 − ‖x‖²)`.
pub fn conformal_factor(x: &PoincarePoint) -> f64 {
    2.0 / (1.0 - x.norm_sq())
}

/// Unclamped Möbius sum written into `out`.
pub(crate) fn mobius_add_into(x: &[f64], y: &[f64], out: &mut [f64]) {
    let xy = dot(x, y);
    let xx = dot(x, x);
    let yy = dot(y, y);
    let a = 1.0 + 2.0 * xy + yy;
    let b = 1.0 - xx;
    let den = 1.0 + 2.0 * xy + xx * yy;
    for ((o, xi), yi) in out.iter_mut().zip(x).zip(y) {
        *o = (a * xi + b * yi) / den;
    }
}

pub fn mobius_add(x: &PoincarePoint, y: &PoincarePoint) -> PoincarePoint {
    check_dims(x, y);
    let mut out = vec![0.0; x.dim()];
    mobius_add_into(&x.coords, &y.coords, &mut out);
    clamp_in_place(&mut out);
    PoincarePoint { coords: out }
}

/// `acosh(1 + u)` evaluated as `log1p(u + √(u² + 2u))`.
pub fn acosh1p(u: f64) -> f64 {
    (u + (u * (u + 2.0)).sqrt()).ln_1p()
}

/// The argument `u` of `acosh(1 + u)` in the distance formula.
pub(crate) fn distance_arg(x: &[f64], y: &[f64]) -> f64 {
    let diff: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    let ax = 1.0 - dot(x, x);
    let ay = 1.0 - dot(y, y);
    2.0 * diff / (ax * ay)
}

pub(crate) fn distance_raw(x: &[f64], y: &[f64]) -> f64 {
    acosh1p(distance_arg(x, y))
}

/// Geodesic distance on the ball.
pub fn distance(x: &PoincarePoint, y: &PoincarePoint) -> f64 {
    check_dims(x, y);
    distance_raw(&x.coords, &y.coords)
}

fn check_finite(v: &[f64]) -> Result<()> {
    if v.iter().all(|c| c.is_finite()) {
        Ok(())
    } else {
        Err(invalid("non-finite tangent vector"))
    }
}

/// `tanh(n)/n`, with its series near zero.
pub(crate) fn tanh_ratio(n: f64) -> f64 {
    if n < 1e-4 {
        1.0 - n * n / 3.0
    } else {
        n.tanh() / n
    }
}

/// `artanh(n)/n`, with its series near zero.
pub(crate) fn artanh_ratio(n: f64) -> f64 {
    if n < 1e-4 {
        1.0 + n * n / 3.0
    } else {
        n.atanh() / n
    }
}

/// Exponential map at the origin.
pub fn exp0(v: &[f64]) -> Result<PoincarePoint> {
    if v.is_empty() {
        return Err(invalid("ball points need dimension ≥ 1"));
    }
    check_finite(v)?;
    let s = tanh_ratio(norm(v));
    let mut coords: Vec<f64> = v.iter().map(|c| c * s).collect();
    clamp_in_place(&mut coords);
    Ok(PoincarePoint { coords })
}

/// Logarithmic map at the origin; the inverse of [`exp0`].
pub fn log0(x: &PoincarePoint) -> Vec<f64> {
    let s = artanh_ratio(x.norm());
    x.coords.iter().map(|c| c * s).collect()
}

/// Exponential map at an arbitrary base point.
pub fn exp_at(x: &PoincarePoint, v: &TangentVector) -> PoincarePoint {
    check_dims(x, v.base());
    let mut out = vec![0.0; x.dim()];
    exp_at_into(&x.coords, &v.direction, &mut out);
    PoincarePoint { coords: out }
}

/// Slice form of [`exp_at`]. Returns whether the result had to be clamped.
pub(crate) fn exp_at_into(x: &[f64], v: &[f64], out: &mut [f64]) -> bool {
    let n = norm(v);
    if n == 0.0 {
        out.copy_from_slice(x);
        return false;
    }
    let lambda = 2.0 / (1.0 - dot(x, x));
    let s = (lambda * n / 2.0).tanh() / n;
    let mut step: Vec<f64> = v.iter().map(|c| c * s).collect();
    let mut clamped = clamp_in_place(&mut step);
    mobius_add_into(x, &step, out);
    clamped |= clamp_in_place(out);
    clamped
}

/// Logarithmic map at `x`; the inverse of [`exp_at`].
pub fn log_at(x: &PoincarePoint, y: &PoincarePoint) -> TangentVector {
    check_dims(x, y);
    let mut w = vec![0.0; x.dim()];
    mobius_add_into(&x.neg().coords, &y.coords, &mut w);
    let n = norm(&w);
    let lambda = conformal_factor(x);
    let s = 2.0 / lambda * artanh_ratio(n);
    TangentVector {
        base: x.clone(),
        direction: w.iter().map(|c| c * s).collect(),
    }
}

/// Point at fraction `t` of the way along the geodesic from `x` to `y`.
pub fn geodesic_point(x: &PoincarePoint, y: &PoincarePoint, t: f64) -> Result<PoincarePoint> {
    check_dims(x, y);
    if !(0.0..=1.0).contains(&t) {
        return Err(invalid(format!("geodesic parameter {t} outside [0, 1]")));
    }
    if t == 0.0 {
        return Ok(x.clone());
    }
    if t == 1.0 {
        return Ok(y.clone());
    }
    Ok(exp_at(x, &log_at(x, y).scaled(t)))
}

/// Riemannian length of a sampled curve by the midpoint rule.
pub fn curve_length_numeric(c: &Curve) -> f64 {
    c.samples
        .windows(2)
        .map(|w| {
            let (a, b) = (w[0].coords(), w[1].coords());
            let mid_sq: f64 = a.iter().zip(b).map(|(p, q)| (0.5 * (p + q)).powi(2)).sum();
            let seg: f64 = a.iter().zip(b).map(|(p, q)| (q - p).powi(2)).sum();
            2.0 / (1.0 - mid_sq) * seg.sqrt()
        })
        .sum()
}

const FRECHET_STEP: f64 = 0.2;
const FRECHET_MAX_ITERS: usize = 1000;

/// Minimizer of the summed squared distances, by Riemannian gradient descent.
pub fn frechet_mean(points: &[PoincarePoint], tol: f64) -> Result<PoincarePoint> {
    let first = points
        .first()
        .ok_or_else(|| invalid("Fréchet mean of an empty set"))?;
    let dim = first.dim();
    if points.iter().any(|p| p.dim() != dim) {
        return Err(invalid("Fréchet mean over points of different dimension"));
    }
    if points.len() == 1 {
        return Ok(first.clone());
    }

    let k = points.len() as f64;
    let mut avg = vec![0.0; dim];
    for p in points {
        for (a, c) in avg.iter_mut().zip(p.coords()) {
            *a += c / k;
        }
    }
    let mut mean = project_to_ball(&avg)?;

    let mut last_step = f64::INFINITY;
    for _ in 0..FRECHET_MAX_ITERS {
        let mut dir = vec![0.0; dim];
        for p in points {
            let l = log_at(&mean, p);
            for (d, c) in dir.iter_mut().zip(l.direction()) {
                *d += FRECHET_STEP * c / k;
            }
        }
        let step = TangentVector {
            base: mean.clone(),
            direction: dir,
        };
        last_step = step.metric_norm();
        mean = exp_at(&mean, &step);
        if last_step < tol {
            return Ok(mean);
        }
    }
    Err(Error::Convergence {
        iterations: FRECHET_MAX_ITERS,
        last_step,
        last: mean,
    })
}
