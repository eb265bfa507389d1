//! Central finite-difference verification of analytic adjoints.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Graph, Tensor, Var};
use crate::error::{invalid, Result};
use crate::geometry::{norm, MAX_NORM};

/// Constraint an input must respect so that perturbed copies stay valid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Domain {
    Free,
    /// Each row is a point of the ball.
    Ball,
    /// Each element lies in the open interval.
    Interval(f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_error: f64,
    pub step: f64,
    pub pass: bool,
}

fn check_margin(t: &Tensor, domain: Domain, step: f64, which: usize) -> Result<()> {
    let margin = 10.0 * step;
    let ok = match domain {
        Domain::Free => true,
        Domain::Ball => (0..t.rows()).all(|i| norm(t.row(i)) <= MAX_NORM - margin),
        Domain::Interval(lo, hi) => t
            .data()
            .iter()
            .all(|&v| v >= lo + margin && v <= hi - margin),
    };
    if ok && t.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!(
            "grad_check: input {which} is not interior to {domain:?} by margin {margin:e}"
        )))
    }
}

fn evaluate<F>(
    f: &F,
    inputs: &[Tensor],
    weights: &mut Option<Vec<f64>>,
) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let out = if g.value(out).is_scalar() {
        out
    } else {
        // a fixed random weighting catches errors a plain sum can cancel
        let n = g.value(out).len();
        let w = weights
            .get_or_insert_with(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
                (0..n).map(|_| rng.gen_range(0.5..1.5)).collect()
            })
            .clone();
        g.weighted_sum(out, w)?
    };
    Ok((g, vars, out))
}

/// Compares the adjoints of `f` against central differences of width `2·step`.
///
/// Non-scalar outputs are reduced by a fixed positive weighting of their
/// entries. Relative error is `|a − n| / max(1, |a|, |n|)`.
pub fn grad_check<F>(
    name: &str,
    f: F,
    inputs: &[(Tensor, Domain)],
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(invalid("grad_check: step must be positive"));
    }
    for (i, (t, d)) in inputs.iter().enumerate() {
        check_margin(t, *d, step, i)?;
    }
    let base: Vec<Tensor> = inputs.iter().map(|(t, _)| t.clone()).collect();
    let mut weights = None;
    let (mut g, vars, out) = evaluate(&f, &base, &mut weights)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| g.adjoint(*v).clone()).collect();

    let mut worst = 0.0f64;
    let mut probe = base.clone();
    for (k, t) in base.iter().enumerate() {
        for j in 0..t.len() {
            probe[k].data_mut()[j] = t.data()[j] + step;
            let (g, _, o) = evaluate(&f, &probe, &mut weights)?;
            let plus = g.value(o).item();
            probe[k].data_mut()[j] = t.data()[j] - step;
            let (g, _, o) = evaluate(&f, &probe, &mut weights)?;
            let minus = g.value(o).item();
            probe[k].data_mut()[j] = t.data()[j];

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[k].data()[j];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
        }
    }
    Ok(GradCheckReport {
        op: name.to_string(),
        max_rel_error: worst,
        step,
        pass: worst < tol,
    })
}

/// A differentiable primitive with a sampler for valid inputs.
pub struct Primitive {
    pub name: &'static str,
    pub build: fn(&mut Graph, &[Var]) -> Result<Var>,
    pub sample: fn(&mut ChaCha8Rng) -> Vec<(Tensor, Domain)>,
}

fn free(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> (Tensor, Domain) {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.5..1.5)).collect();
    (
        Tensor::matrix(rows, cols, data).expect("sized"),
        Domain::Free,
    )
}

fn ball(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> (Tensor, Domain) {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let dir: Vec<f64> = (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r = rng.gen_range(0.05..0.9) / norm(&dir).max(1e-3);
        data.extend(dir.iter().map(|d| d * r));
    }
    (
        Tensor::matrix(rows, cols, data).expect("sized"),
        Domain::Ball,
    )
}

fn interval(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> (Tensor, Domain) {
    let span = hi - lo;
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(lo + 0.05 * span..hi - 0.05 * span))
        .collect();
    (
        Tensor::matrix(rows, cols, data).expect("sized"),
        Domain::Interval(lo, hi),
    )
}

/// Rows that sit well inside or well outside the clamp radius.
fn straddling(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> (Tensor, Domain) {
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let dir: Vec<f64> = (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let target = if i % 2 == 0 {
            rng.gen_range(0.1..0.8)
        } else {
            rng.gen_range(1.2..2.0)
        };
        let r = target / norm(&dir).max(1e-3);
        data.extend(dir.iter().map(|d| d * r));
    }
    (
        Tensor::matrix(rows, cols, data).expect("sized"),
        Domain::Free,
    )
}

/// Every differentiable graph operation, each with an input sampler.
pub fn primitives() -> Vec<Primitive> {
    use super::DistanceKind::{Euclidean, Hyperbolic};
    vec![
        Primitive {
            name: "add",
            build: |g, v| g.add(v[0], v[1]),
            sample: |r| vec![free(r, 2, 3), free(r, 2, 3)],
        },
        Primitive {
            name: "sub",
            build: |g, v| g.sub(v[0], v[1]),
            sample: |r| vec![free(r, 2, 3), free(r, 2, 3)],
        },
        Primitive {
            name: "mul",
            build: |g, v| g.mul(v[0], v[1]),
            sample: |r| vec![free(r, 2, 3), free(r, 2, 3)],
        },
        Primitive {
            name: "scale",
            build: |g, v| Ok(g.scale(v[0], -1.7)),
            sample: |r| vec![free(r, 2, 3)],
        },
        Primitive {
            name: "add_row",
            build: |g, v| g.add_row(v[0], v[1]),
            sample: |r| vec![free(r, 3, 2), free(r, 1, 2)],
        },
        Primitive {
            name: "linear",
            build: |g, v| g.linear(v[0], v[1], Some(v[2])),
            sample: |r| vec![free(r, 2, 3), free(r, 4, 3), free(r, 1, 4)],
        },
        Primitive {
            name: "matmul",
            build: |g, v| g.matmul(v[0], v[1]),
            sample: |r| vec![free(r, 2, 3), free(r, 3, 4)],
        },
        Primitive {
            name: "tanh",
            build: |g, v| Ok(g.tanh(v[0])),
            sample: |r| vec![free(r, 2, 3)],
        },
        Primitive {
            name: "sigmoid",
            build: |g, v| Ok(g.sigmoid(v[0])),
            sample: |r| vec![free(r, 2, 3)],
        },
        Primitive {
            name: "artanh",
            build: |g, v| Ok(g.artanh(v[0])),
            sample: |r| vec![interval(r, 2, 3, -0.95, 0.95)],
        },
        Primitive {
            name: "acosh1p",
            build: |g, v| Ok(g.acosh1p(v[0])),
            sample: |r| vec![interval(r, 2, 3, 0.0, 4.0)],
        },
        Primitive {
            name: "concat_cols",
            build: |g, v| g.concat_cols(&[v[0], v[1]]),
            sample: |r| vec![free(r, 2, 3), free(r, 2, 1)],
        },
        Primitive {
            name: "concat_rows",
            build: |g, v| g.concat_rows(&[v[0], v[1]]),
            sample: |r| vec![free(r, 2, 3), free(r, 1, 3)],
        },
        Primitive {
            name: "select_rows",
            build: |g, v| g.select_rows(v[0], &[2, 0, 2]),
            sample: |r| vec![free(r, 3, 2)],
        },
        Primitive {
            name: "exp0",
            build: |g, v| Ok(g.exp0(v[0])),
            sample: |r| vec![free(r, 3, 3)],
        },
        Primitive {
            name: "log0",
            build: |g, v| Ok(g.log0(v[0])),
            sample: |r| vec![ball(r, 3, 3)],
        },
        Primitive {
            name: "mobius_add",
            build: |g, v| g.mobius_add(v[0], v[1]),
            sample: |r| vec![ball(r, 2, 3), ball(r, 2, 3)],
        },
        Primitive {
            name: "mobius_add_broadcast",
            build: |g, v| g.mobius_add(v[0], v[1]),
            sample: |r| vec![ball(r, 3, 2), ball(r, 1, 2)],
        },
        Primitive {
            name: "project",
            build: |g, v| Ok(g.project(v[0])),
            sample: |r| vec![straddling(r, 4, 3)],
        },
        Primitive {
            name: "row_distance",
            build: |g, v| g.row_distance(v[0], v[1]),
            sample: |r| vec![ball(r, 3, 3), ball(r, 3, 3)],
        },
        Primitive {
            name: "pairwise_sq_dist_hyperbolic",
            build: |g, v| g.pairwise_sq_dist(v[0], v[1], Hyperbolic),
            sample: |r| vec![ball(r, 2, 3), ball(r, 3, 3)],
        },
        Primitive {
            name: "pairwise_sq_dist_euclidean",
            build: |g, v| g.pairwise_sq_dist(v[0], v[1], Euclidean),
            sample: |r| vec![free(r, 2, 3), free(r, 3, 3)],
        },
        Primitive {
            name: "mlr_logits",
            build: |g, v| g.mlr_logits(v[0], v[1], v[2]),
            sample: |r| vec![ball(r, 2, 3), ball(r, 4, 3), free(r, 4, 3)],
        },
        Primitive {
            name: "logsumexp_rows",
            build: |g, v| Ok(g.logsumexp_rows(v[0])),
            sample: |r| vec![free(r, 2, 4)],
        },
        Primitive {
            name: "cross_entropy",
            build: |g, v| g.cross_entropy(v[0], &[3, 0, 1]),
            sample: |r| vec![free(r, 3, 4)],
        },
        Primitive {
            name: "sum",
            build: |g, v| Ok(g.sum(v[0])),
            sample: |r| vec![free(r, 2, 3)],
        },
        Primitive {
            name: "mean",
            build: |g, v| Ok(g.mean(v[0])),
            sample: |r| vec![free(r, 2, 3)],
        },
        Primitive {
            name: "weighted_sum",
            build: |g, v| g.weighted_sum(v[0], vec![0.5, -2.0, 1.0, 3.0, 0.0, -0.25]),
            sample: |r| vec![free(r, 2, 3)],
        },
    ]
}

/// Grad-checks one primitive on a seeded input draw.
pub fn check_primitive(p: &Primitive, seed: u64, step: f64, tol: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = (p.sample)(&mut rng);
    grad_check(p.name, p.build, &inputs, step, tol)
}
