//! Evaluation metrics: plain and hierarchical accuracy, radius-based level
//! selection, threshold retrieval, and the per-epoch report rows.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{distance, PoincarePoint};
pub use crate::taxonomy::{TaxonNode, Taxonomy};

/// Percentiles separating the general, middle and specific level buckets.
pub const LOW_PERCENTILE: f64 = 33.0;
pub const HIGH_PERCENTILE: f64 = 66.0;

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(pred.len(), truth.len())?;
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(invalid(format!("{a} predictions for {b} labels")));
    }
    if a == 0 {
        return Err(invalid("metrics over an empty set"));
    }
    Ok(())
}

/// Which end of the hierarchy receives the largest weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Weighting {
    /// Level 1 (just below the root) weighs 1, halving toward the leaves.
    TopDown,
    /// The leaf level weighs 1, halving toward the root.
    BottomUp,
}

/// Weights for levels `1..=levels`, as exact powers of two.
pub fn level_weights(levels: usize, weighting: Weighting) -> Vec<f64> {
    (1..=levels)
        .map(|l| {
            let e = match weighting {
                Weighting::TopDown => l - 1,
                Weighting::BottomUp => levels - l,
            };
            0.5f64.powi(e as i32)
        })
        .collect()
}

/// Weighted per-level agreement of predicted and true paths, averaged over samples.
///
/// Each path lists a node per level `1..=L`; levels are compared independently.
pub fn hier_acc_paths(
    pred: &[Vec<usize>],
    truth: &[Vec<usize>],
    weighting: Weighting,
) -> Result<f64> {
    check_lengths(pred.len(), truth.len())?;
    let levels = truth[0].len();
    if levels == 0 || pred.iter().chain(truth).any(|p| p.len() != levels) {
        return Err(invalid(
            "hierarchical paths must all have the same nonzero length",
        ));
    }
    let w = level_weights(levels, weighting);
    let total: f64 = w.iter().sum();
    let sum: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| {
            // fold from +0.0: an empty float `sum` is −0.0
            let hit = (0..levels)
                .filter(|&l| p[l] == t[l])
                .fold(0.0, |a, l| a + w[l]);
            hit / total
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

fn leaf_paths(ids: &[usize], tax: &Taxonomy) -> Result<Vec<Vec<usize>>> {
    ids.iter().map(|&id| tax.path(id)).collect()
}

pub fn bottom_up_hier_acc(pred: &[usize], truth: &[usize], tax: &Taxonomy) -> Result<f64> {
    check_lengths(pred.len(), truth.len())?;
    hier_acc_paths(
        &leaf_paths(pred, tax)?,
        &leaf_paths(truth, tax)?,
        Weighting::BottomUp,
    )
}

pub fn top_down_hier_acc(pred: &[usize], truth: &[usize], tax: &Taxonomy) -> Result<f64> {
    check_lengths(pred.len(), truth.len())?;
    hier_acc_paths(
        &leaf_paths(pred, tax)?,
        &leaf_paths(truth, tax)?,
        Weighting::TopDown,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelThresholds {
    pub r_low: f64,
    pub r_high: f64,
}

/// Nearest-rank percentile: the value at 1-based rank `⌈p/100 · n⌉` of the sorted sample.
pub fn nearest_rank(sorted: &[f64], percentile: f64) -> f64 {
    let n = sorted.len();
    let rank = ((percentile / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

pub fn compute_level_thresholds(radii: &[f64]) -> Result<LevelThresholds> {
    if radii.len() < 3 {
        return Err(invalid("level thresholds need at least three radii"));
    }
    if radii
        .iter()
        .any(|r| !r.is_finite() || *r < 0.0 || *r >= 1.0)
    {
        return Err(invalid("radii must lie in [0, 1)"));
    }
    let mut sorted = radii.to_vec();
    // stable sort keeps input order among equal values
    sorted.sort_by(f64::total_cmp);
    Ok(LevelThresholds {
        r_low: nearest_rank(&sorted, LOW_PERCENTILE),
        r_high: nearest_rank(&sorted, HIGH_PERCENTILE),
    })
}

/// Maps a prediction radius to a level in `1..=levels`.
///
/// Below `r_low` selects level 1, at or above `r_high` selects the leaf level,
/// and the band between is split evenly over the interior levels. With two
/// levels the band is split at its midpoint.
pub fn select_level(radius: f64, t: &LevelThresholds, levels: usize) -> usize {
    if levels <= 1 || radius < t.r_low {
        return 1;
    }
    if radius >= t.r_high {
        return levels;
    }
    let frac = (radius - t.r_low) / (t.r_high - t.r_low);
    if levels == 2 {
        return if frac < 0.5 { 1 } else { 2 };
    }
    let interior = levels - 2;
    2 + ((frac * interior as f64).floor() as usize).min(interior - 1)
}

/// Mean distance over every (query, pool) pair.
pub fn mean_pairwise_distance(queries: &[PoincarePoint], pool: &[PoincarePoint]) -> Result<f64> {
    if queries.is_empty() || pool.is_empty() {
        return Err(invalid("mean distance over an empty set"));
    }
    let sum: f64 = queries
        .iter()
        .map(|q| pool.iter().map(|p| distance(q, p)).sum::<f64>())
        .sum();
    Ok(sum / (queries.len() * pool.len()) as f64)
}

/// Number of pool points within `threshold` of `query`.
pub fn retrieved_within_threshold(
    query: &PoincarePoint,
    pool: &[PoincarePoint],
    threshold: f64,
) -> Result<usize> {
    if pool.is_empty() {
        return Err(invalid("retrieval from an empty pool"));
    }
    Ok(pool
        .iter()
        .filter(|p| distance(query, p) <= threshold)
        .count())
}

/// One line of the metrics stream.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub epoch: usize,
    pub split: String,
    pub loss: Option<f64>,
    pub acc: Option<f64>,
    pub td_acc: Option<f64>,
    pub bu_acc: Option<f64>,
    pub mean_radius: Option<f64>,
    pub radius_p33: Option<f64>,
    pub radius_p66: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Mean and the two selection percentiles of a radius sample.
pub fn radius_summary(radii: &[f64]) -> Option<(f64, f64, f64)> {
    if radii.is_empty() {
        return None;
    }
    let mut sorted = radii.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = radii.iter().sum::<f64>() / radii.len() as f64;
    Some((
        mean,
        nearest_rank(&sorted, LOW_PERCENTILE),
        nearest_rank(&sorted, HIGH_PERCENTILE),
    ))
}

/// Spearman rank correlation, with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    check_lengths(a.len(), b.len())?;
    let ranks = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    };
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (va * vb).sqrt())
}
