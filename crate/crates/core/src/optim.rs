//! Space-aware parameter updates.
//!
//! Euclidean tensors take ordinary SGD/Adam steps. Manifold tensors hold one
//! ball point per row; their Euclidean gradient is rescaled by the inverse
//! metric and the update is applied through the exponential map at the point.
//! Adam moments of manifold rows stay in ambient coordinates and are not
//! transported between steps.

use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{invalid, Error, Result};
use crate::geometry::{dot, exp_at_into, norm, PoincarePoint, TangentVector, MAX_NORM};
use crate::layers::{Parameterized, Space};
use crate::serialize::Container;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub space: Space,
    pub value: Tensor,
    m: Tensor,
    /// For manifold rows every entry of a row holds that row's scalar moment.
    v: Tensor,
}

impl Param {
    pub fn first_moment(&self) -> &Tensor {
        &self.m
    }

    pub fn second_moment(&self) -> &Tensor {
        &self.v
    }
}

/// Named parameters with their optimizer state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGroup {
    params: Vec<Param>,
    step: u64,
}

/// What happened during one update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepReport {
    /// Manifold rows whose update left the admissible ball and was clamped.
    pub boundary_hits: usize,
}

fn check_ball_rows(name: &str, t: &Tensor) -> Result<()> {
    for i in 0..t.rows() {
        if norm(t.row(i)) > MAX_NORM {
            return Err(invalid(format!(
                "manifold parameter `{name}` row {i} is off the ball"
            )));
        }
    }
    Ok(())
}

impl ParamGroup {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, space: Space, value: Tensor) -> Result<()> {
        let name = name.into();
        if !value.is_finite() {
            return Err(invalid(format!("parameter `{name}` is not finite")));
        }
        if space == Space::Manifold {
            check_ball_rows(&name, &value)?;
        }
        let zeros = Tensor::zeros(value.shape());
        self.params.push(Param {
            name,
            space,
            m: zeros.clone(),
            v: zeros,
            value,
        });
        Ok(())
    }

    /// Collects every parameter of `module` in visit order.
    pub fn from_module(module: &impl Parameterized) -> Result<Self> {
        let mut group = Self::new();
        let mut err = None;
        module.visit("", &mut |name, space, t| {
            if err.is_none() {
                err = group.push(name, space, t.clone()).err();
            }
        });
        err.map_or(Ok(group), Err)
    }

    /// Copies current values back into `module`, matched by visit order.
    pub fn write_to(&self, module: &mut impl Parameterized) -> Result<()> {
        let mut it = self.params.iter();
        let mut err = None;
        module.visit_mut("", &mut |name, _, t| match it.next() {
            Some(p) if p.name == name && p.value.shape() == t.shape() => {
                t.data_mut().copy_from_slice(p.value.data())
            }
            _ => {
                err = Some(invalid(format!(
                    "parameter `{name}` does not match the group"
                )))
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    fn check_grads(&self, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(invalid(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.params.len()
            )));
        }
        for (p, g) in self.params.iter().zip(grads) {
            if p.value.shape() != g.shape() {
                return Err(invalid(format!("gradient shape mismatch for `{}`", p.name)));
            }
            if !g.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite gradient for `{}`",
                    p.name
                )));
            }
        }
        Ok(())
    }

    /// Appends values, moments and the step count to a container.
    pub fn save_into(&self, c: &mut Container) {
        for p in &self.params {
            c.push(p.name.clone(), p.space, p.value.clone());
            c.push(format!("{}#m", p.name), Space::Euclidean, p.m.clone());
            c.push(format!("{}#v", p.name), Space::Euclidean, p.v.clone());
        }
        c.push("#step", Space::Euclidean, Tensor::scalar(self.step as f64));
    }

    /// Restores values and state for every parameter already in the group.
    pub fn load_from(&mut self, c: &Container) -> Result<()> {
        for p in &mut self.params {
            let value = c.take(&p.name)?;
            let m = c.take(&format!("{}#m", p.name))?;
            let v = c.take(&format!("{}#v", p.name))?;
            if [&value, &m, &v]
                .iter()
                .any(|t| t.shape() != p.value.shape())
            {
                return Err(Error::Format(format!("shape mismatch for `{}`", p.name)));
            }
            if p.space == Space::Manifold {
                check_ball_rows(&p.name, &value)?;
            }
            p.value = value;
            p.m = m;
            p.v = v;
        }
        self.step = c.take("#step")?.item() as u64;
        Ok(())
    }
}

/// `egrad · (1 − ‖x‖²)² / 4`, the gradient under the ball metric.
pub fn riemannian_grad(x: &PoincarePoint, euclid_grad: &[f64]) -> Result<TangentVector> {
    let s = inverse_metric(x.coords());
    TangentVector::new(x.clone(), euclid_grad.iter().map(|g| g * s).collect())
}

fn inverse_metric(x: &[f64]) -> f64 {
    let a = 1.0 - dot(x, x);
    a * a / 4.0
}

/// Riemannian SGD: `x ← exp_x(−lr · rgrad)` on manifold rows, `x ← x − lr·g` elsewhere.
pub fn rsgd_step(group: &mut ParamGroup, grads: &[Tensor], lr: f64) -> Result<StepReport> {
    group.check_grads(grads)?;
    let mut report = StepReport::default();
    for (p, g) in group.params.iter_mut().zip(grads) {
        match p.space {
            Space::Euclidean => {
                for (x, gi) in p.value.data_mut().iter_mut().zip(g.data()) {
                    *x -= lr * gi;
                }
            }
            Space::Manifold => {
                let mut out = vec![0.0; p.value.cols()];
                for i in 0..p.value.rows() {
                    let x = p.value.row(i);
                    let s = -lr * inverse_metric(x);
                    let v: Vec<f64> = g.row(i).iter().map(|gi| s * gi).collect();
                    report.boundary_hits += exp_at_into(x, &v, &mut out) as usize;
                    p.value.row_mut(i).copy_from_slice(&out);
                }
            }
        }
    }
    group.step += 1;
    Ok(report)
}

/// Adam on Euclidean tensors and Riemannian Adam on manifold rows.
///
/// For a manifold row the first moment tracks the Riemannian gradient and the
/// second moment tracks its squared metric norm `λ_x² ‖rgrad‖²`.
pub fn radam_step(
    group: &mut ParamGroup,
    grads: &[Tensor],
    lr: f64,
    cfg: AdamConfig,
) -> Result<StepReport> {
    group.check_grads(grads)?;
    let t = (group.step + 1) as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let mut report = StepReport::default();
    for (p, g) in group.params.iter_mut().zip(grads) {
        match p.space {
            Space::Euclidean => {
                let it = p
                    .value
                    .data_mut()
                    .iter_mut()
                    .zip(p.m.data_mut())
                    .zip(p.v.data_mut())
                    .zip(g.data());
                for (((x, m), v), gi) in it {
                    *m = b1 * *m + (1.0 - b1) * gi;
                    *v = b2 * *v + (1.0 - b2) * gi * gi;
                    *x -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
                }
            }
            Space::Manifold => {
                let dim = p.value.cols();
                let mut out = vec![0.0; dim];
                for i in 0..p.value.rows() {
                    let x = p.value.row(i);
                    let xx = dot(x, x);
                    let s = inverse_metric(x);
                    let lambda = 2.0 / (1.0 - xx);
                    let rgrad: Vec<f64> = g.row(i).iter().map(|gi| s * gi).collect();
                    let sq_norm = lambda * lambda * dot(&rgrad, &rgrad);

                    let v_old = p.v.row(i)[0];
                    let v_new = b2 * v_old + (1.0 - b2) * sq_norm;
                    p.v.row_mut(i).fill(v_new);
                    let denom = (v_new / c2).sqrt() + cfg.eps;

                    let m = p.m.row_mut(i);
                    for (mk, rk) in m.iter_mut().zip(&rgrad) {
                        *mk = b1 * *mk + (1.0 - b1) * rk;
                    }
                    let dir: Vec<f64> = m.iter().map(|mk| -lr * (mk / c1) / denom).collect();
                    report.boundary_hits += exp_at_into(x, &dir, &mut out) as usize;
                    p.value.row_mut(i).copy_from_slice(&out);
                }
            }
        }
    }
    group.step += 1;
    Ok(report)
}

/// Counts consecutive steps in which some manifold update had to be clamped.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DivergenceGuard {
    limit: usize,
    run: usize,
}

impl Default for DivergenceGuard {
    fn default() -> Self {
        Self::new(100)
    }
}

impl DivergenceGuard {
    pub fn new(limit: usize) -> Self {
        Self {
            limit: limit.max(1),
            run: 0,
        }
    }

    /// Returns true when the run of boundary-hitting steps reaches a multiple
    /// of the limit, which is when a warning should be emitted.
    pub fn observe(&mut self, report: StepReport) -> bool {
        if report.boundary_hits == 0 {
            self.run = 0;
            return false;
        }
        self.run += 1;
        self.run.is_multiple_of(self.limit)
    }

    pub fn consecutive(&self) -> usize {
        self.run
    }

    /// A guard that continues an earlier run of `consecutive` hits.
    pub fn resume(limit: usize, consecutive: usize) -> Self {
        Self {
            limit: limit.max(1),
            run: consecutive,
        }
    }
}
