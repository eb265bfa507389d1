//! Oracle battery behind `hyperpredict selfcheck`.
//!
//! The distance function is a parameter so that a deliberately broken one can
//! be shown to trip the metric-axiom check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::diff::gradcheck::{check_primitive, primitives};
use crate::geometry::{
    conformal_factor, curve_length_numeric, exp0, exp_at, frechet_mean, geodesic_point, log0,
    log_at, norm, Curve, PoincarePoint, TangentVector,
};
use crate::metrics::{compute_level_thresholds, hier_acc_paths, Weighting};

pub type DistanceFn = fn(&PoincarePoint, &PoincarePoint) -> f64;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

/// Uniform direction, radius uniform in `[0, max_r]`.
pub fn random_point(rng: &mut impl Rng, dim: usize, max_r: f64) -> PoincarePoint {
    let dir: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = norm(&dir).max(1e-12);
    let r = rng.gen_range(0.0..=max_r);
    PoincarePoint::try_from(dir.iter().map(|d| d * r / n).collect::<Vec<_>>())
        .expect("inside the ball")
}

fn outcome(name: &'static str, failures: Vec<String>, summary: String) -> CheckOutcome {
    match failures.first() {
        None => CheckOutcome {
            name,
            pass: true,
            detail: summary,
        },
        Some(f) => CheckOutcome {
            name,
            pass: false,
            detail: format!("{} failure(s), first: {f}", failures.len()),
        },
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Symmetry, identity, positivity and the triangle inequality on random triples.
pub fn check_metric_axioms(dist: DistanceFn, samples: usize, seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    let mut worst_slack = f64::NEG_INFINITY;
    for i in 0..samples {
        let dim = [2, 16, 64][i % 3];
        let x = random_point(&mut rng, dim, 0.99);
        let y = random_point(&mut rng, dim, 0.99);
        let z = random_point(&mut rng, dim, 0.99);
        let (dxy, dyx) = (dist(&x, &y), dist(&y, &x));
        if dxy != dyx {
            failures.push(format!("asymmetric: {dxy} vs {dyx}"));
        }
        let dxx = dist(&x, &x);
        if !(dxx.abs() <= 1e-6) {
            failures.push(format!("d(x, x) = {dxx}"));
        }
        if !(dxy >= 0.0) {
            failures.push(format!("negative distance {dxy}"));
        }
        let slack = dist(&x, &z) - dist(&x, &y) - dist(&y, &z);
        worst_slack = worst_slack.max(slack);
        if !(slack <= 1e-9) {
            failures.push(format!("triangle inequality violated by {slack:e}"));
        }
    }
    outcome(
        "metric axioms",
        failures,
        format!("{samples} triples, worst triangle slack {worst_slack:.2e}"),
    )
}

/// `d(0, x) = 2 artanh ‖x‖`.
pub fn check_radial_form(dist: DistanceFn, samples: usize, seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    for i in 0..samples {
        let dim = [2, 16, 64][i % 3];
        let x = random_point(&mut rng, dim, 0.99);
        let want = 2.0 * x.norm().atanh();
        let err = (dist(&PoincarePoint::origin(dim), &x) - want).abs();
        worst = worst.max(err);
        if !(err <= 1e-9) {
            failures.push(format!("radius {}: error {err:e}", x.norm()));
        }
    }
    outcome(
        "radial closed form",
        failures,
        format!("max error {worst:.2e}"),
    )
}

/// Numeric length of a densely sampled geodesic against the distance.
pub fn check_geodesic_length(dist: DistanceFn, samples: usize, seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    for i in 0..samples {
        let dim = [2, 16, 64][i % 3];
        let x = random_point(&mut rng, dim, 0.95);
        let y = random_point(&mut rng, dim, 0.95);
        let len = match Curve::geodesic(&x, &y, 10_000) {
            Ok(c) => curve_length_numeric(&c),
            Err(e) => {
                failures.push(e.to_string());
                continue;
            }
        };
        let err = (len - dist(&x, &y)).abs();
        worst = worst.max(err);
        if !(err <= 1e-4) {
            failures.push(format!("length {len} vs distance {}", dist(&x, &y)));
        }
    }
    outcome(
        "geodesic length",
        failures,
        format!("max error {worst:.2e}"),
    )
}

/// `exp0∘log0`, `log0∘exp0`, `exp_x∘log_x` and `log_x∘exp_x` round trips.
pub fn check_inverse_maps(samples: usize, seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    let mut record = |what: &str, err: f64, failures: &mut Vec<String>| {
        worst = worst.max(err);
        if !(err <= 1e-9) {
            failures.push(format!("{what}: error {err:e}"));
        }
    };
    for i in 0..samples {
        let dim = [2, 16, 64][i % 3];
        let x = random_point(&mut rng, dim, 0.99);
        let back = exp0(&log0(&x)).map(|p| max_abs_diff(p.coords(), x.coords()));
        record(
            "exp0(log0(x))",
            back.unwrap_or(f64::INFINITY),
            &mut failures,
        );

        let dir: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r = rng.gen_range(0.0..=5.0) / norm(&dir).max(1e-12);
        let v: Vec<f64> = dir.iter().map(|d| d * r).collect();
        let back = exp0(&v).map(|p| max_abs_diff(&log0(&p), &v));
        record(
            "log0(exp0(v))",
            back.unwrap_or(f64::INFINITY),
            &mut failures,
        );

        let base = random_point(&mut rng, dim, 0.9);
        let y = random_point(&mut rng, dim, 0.9);
        let there = exp_at(&base, &log_at(&base, &y));
        record(
            "exp_x(log_x(y))",
            max_abs_diff(there.coords(), y.coords()),
            &mut failures,
        );

        // metric norm λ_x‖w‖ ≤ 5 keeps exp_x clear of the clamp
        let dir: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let len = rng.gen_range(0.0..=5.0) / (conformal_factor(&base) * norm(&dir).max(1e-12));
        let w: Vec<f64> = dir.iter().map(|d| d * len).collect();
        let tv = TangentVector::new(base.clone(), w.clone()).expect("matching dimension");
        let back = log_at(&base, &exp_at(&base, &tv));
        record(
            "log_x(exp_x(v))",
            max_abs_diff(back.direction(), &w),
            &mut failures,
        );
    }
    outcome("inverse maps", failures, format!("max error {worst:.2e}"))
}

/// Every registered primitive against central differences.
pub fn check_gradients(seeds: u64) -> CheckOutcome {
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    let prims = primitives();
    for p in &prims {
        for s in 0..seeds {
            match check_primitive(p, s, 1e-6, 1e-4) {
                Ok(r) => {
                    worst = worst.max(r.max_rel_error);
                    if !r.pass {
                        failures.push(format!("{} (seed {s}): {:e}", p.name, r.max_rel_error));
                    }
                }
                Err(e) => failures.push(format!("{} (seed {s}): {e}", p.name)),
            }
        }
    }
    outcome(
        "gradient checks",
        failures,
        format!(
            "{} primitives × {seeds} seeds, max rel error {worst:.2e}",
            prims.len()
        ),
    )
}

/// Two points of radius 0.9: the iterative mean agrees with the geodesic
/// midpoint and with a grid search, and lies strictly inside radius 0.9.
pub fn check_frechet_mean(dist: DistanceFn) -> CheckOutcome {
    let a = PoincarePoint::try_from(vec![0.9, 0.0]).expect("inside");
    let b = PoincarePoint::try_from(vec![0.0, 0.9]).expect("inside");
    let mut failures = Vec::new();
    let mid = match geodesic_point(&a, &b, 0.5) {
        Ok(m) => m,
        Err(e) => return outcome("frechet mean", vec![e.to_string()], String::new()),
    };
    match frechet_mean(&[a.clone(), b.clone()], 1e-12) {
        Ok(m) => {
            let err = max_abs_diff(m.coords(), mid.coords());
            if !(err <= 1e-6) {
                failures.push(format!("iterative mean off the midpoint by {err:e}"));
            }
        }
        Err(e) => failures.push(e.to_string()),
    }
    let grid = grid_search_mean(dist, &[a, b]);
    let err = (grid.norm() - mid.norm()).abs();
    if !(err <= 1e-3) {
        failures.push(format!(
            "grid radius {} vs midpoint radius {}",
            grid.norm(),
            mid.norm()
        ));
    }
    if !(mid.norm() < 0.9) {
        failures.push(format!("midpoint radius {} is not below 0.9", mid.norm()));
    }
    outcome(
        "frechet mean",
        failures,
        format!(
            "midpoint radius {:.6}, grid radius {:.6}",
            mid.norm(),
            grid.norm()
        ),
    )
}

/// Multi-resolution 2-D grid search for the minimizer of `Σ d²`.
pub fn grid_search_mean(dist: DistanceFn, points: &[PoincarePoint]) -> PoincarePoint {
    let cost = |x: f64, y: f64| -> f64 {
        match PoincarePoint::try_from(vec![x, y]) {
            Ok(p) => points.iter().map(|q| dist(&p, q).powi(2)).sum(),
            Err(_) => f64::INFINITY,
        }
    };
    let (mut cx, mut cy, mut half) = (0.0, 0.0, 0.99);
    for _ in 0..12 {
        let mut best = (f64::INFINITY, cx, cy);
        for i in 0..=40 {
            for j in 0..=40 {
                let x = cx - half + 2.0 * half * i as f64 / 40.0;
                let y = cy - half + 2.0 * half * j as f64 / 40.0;
                let c = cost(x, y);
                if c < best.0 {
                    best = (c, x, y);
                }
            }
        }
        (cx, cy) = (best.1, best.2);
        half *= 0.25;
    }
    PoincarePoint::try_from(vec![cx, cy]).expect("grid stays inside the ball")
}

/// The hand-worked hierarchical accuracy and threshold cases.
pub fn check_metric_cases() -> CheckOutcome {
    let mut failures = Vec::new();
    let case = |pred: Vec<usize>, truth: Vec<usize>, w: Weighting| {
        hier_acc_paths(&[pred], &[truth], w).ok()
    };
    let checks = [
        (
            "bottom-up, leaf miss",
            case(vec![1, 4], vec![1, 3], Weighting::BottomUp),
            1.0 / 3.0,
        ),
        (
            "top-down, leaf miss",
            case(vec![1, 4], vec![1, 3], Weighting::TopDown),
            2.0 / 3.0,
        ),
        (
            "top-down, depth 3",
            case(vec![1, 4, 9], vec![1, 3, 7], Weighting::TopDown),
            4.0 / 7.0,
        ),
    ];
    for (name, got, want) in checks {
        if got != Some(want) {
            failures.push(format!("{name}: {got:?} vs {want}"));
        }
    }
    let radii = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
    match compute_level_thresholds(&radii) {
        Ok(t) if t.r_low == 0.3 && t.r_high == 0.6 => {}
        other => failures.push(format!("thresholds of 0.1..0.9: {other:?}")),
    }
    outcome("metric cases", failures, "hand-worked cases exact".into())
}

/// Runs the full battery.
pub fn run_selfcheck(dist: DistanceFn) -> Vec<CheckOutcome> {
    vec![
        check_metric_axioms(dist, 1000, 1),
        check_radial_form(dist, 1000, 2),
        check_geodesic_length(dist, 30, 3),
        check_inverse_maps(500, 4),
        check_gradients(3),
        check_frechet_mean(dist),
        check_metric_cases(),
    ]
}

/// Fixed-width pass/fail table.
pub fn render_table(results: &[CheckOutcome]) -> String {
    let width = results
        .iter()
        .map(|r| r.name.len())
        .max()
        .unwrap_or(5)
        .max(5);
    let mut out = format!("{:<width$}  result  detail\n", "check");
    for r in results {
        let status = if r.pass { "PASS" } else { "FAIL" };
        out.push_str(&format!("{:<width$}  {status:<6}  {}\n", r.name, r.detail));
    }
    out
}

pub fn all_pass(results: &[CheckOutcome]) -> bool {
    results.iter().all(|r| r.pass)
}
