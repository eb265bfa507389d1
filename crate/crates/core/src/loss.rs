//! Contrastive predictive objective over a pool of candidate targets.
//!
//! For prediction `i` with positive target `π(i)` the per-prediction loss is
//! `−log softmax_j(−d²(ẑ_i, z_j)/τ)[π(i)]`, mean-reduced over predictions.

use serde::{Deserialize, Serialize};

use crate::diff::{DistanceKind, Graph, Tensor, Var};
use crate::error::{invalid, Result};
use crate::geometry::PoincarePoint;

/// Position of an embedding within a minibatch of sequences.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StepTag {
    pub sequence: usize,
    pub step: usize,
}

/// Predictions scored against a shared pool of targets.
///
/// Every pool entry other than a prediction's positive acts as a negative.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveBatch {
    predictions: Vec<PoincarePoint>,
    pool: Vec<PoincarePoint>,
    positives: Vec<usize>,
    pool_tags: Vec<StepTag>,
}

impl ContrastiveBatch {
    /// Index-aligned batch: target `i` is the positive for prediction `i`.
    pub fn aligned(predictions: Vec<PoincarePoint>, targets: Vec<PoincarePoint>) -> Result<Self> {
        if predictions.len() != targets.len() {
            return Err(invalid(format!(
                "{} predictions for {} targets",
                predictions.len(),
                targets.len()
            )));
        }
        let positives = (0..predictions.len()).collect();
        let tags = (0..targets.len())
            .map(|i| StepTag {
                sequence: i,
                step: 0,
            })
            .collect();
        Self::with_pool(predictions, targets, positives, tags)
    }

    pub fn with_pool(
        predictions: Vec<PoincarePoint>,
        pool: Vec<PoincarePoint>,
        positives: Vec<usize>,
        pool_tags: Vec<StepTag>,
    ) -> Result<Self> {
        if pool.len() < 2 {
            return Err(invalid("contrastive batch needs at least two targets"));
        }
        if predictions.is_empty() || positives.len() != predictions.len() {
            return Err(invalid("every prediction needs exactly one positive"));
        }
        if pool_tags.len() != pool.len() {
            return Err(invalid("one tag per pool entry required"));
        }
        if let Some(&bad) = positives.iter().find(|&&p| p >= pool.len()) {
            return Err(invalid(format!(
                "positive {bad} outside a pool of {}",
                pool.len()
            )));
        }
        let dim = pool[0].dim();
        if predictions.iter().chain(&pool).any(|p| p.dim() != dim) {
            return Err(invalid("contrastive batch mixes dimensions"));
        }
        Ok(Self {
            predictions,
            pool,
            positives,
            pool_tags,
        })
    }

    pub fn predictions(&self) -> &[PoincarePoint] {
        &self.predictions
    }

    pub fn pool(&self) -> &[PoincarePoint] {
        &self.pool
    }

    pub fn positives(&self) -> &[usize] {
        &self.positives
    }

    pub fn pool_tags(&self) -> &[StepTag] {
        &self.pool_tags
    }

    /// Number of negatives each prediction is contrasted against.
    pub fn negatives_per_prediction(&self) -> usize {
        self.pool.len() - 1
    }
}

/// Pool layout for a minibatch: which pool row is each prediction's positive.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativePlan {
    pub pool_tags: Vec<StepTag>,
    pub positives: Vec<usize>,
}

/// Builds the pool from every `(sequence, step)` target and locates each
/// prediction's positive. All other entries are batch or temporal negatives.
pub fn plan_negatives(steps_per_sequence: &[usize], predicted: &[StepTag]) -> Result<NegativePlan> {
    let mut offsets = Vec::with_capacity(steps_per_sequence.len());
    let mut pool_tags = Vec::new();
    for (s, &n) in steps_per_sequence.iter().enumerate() {
        offsets.push(pool_tags.len());
        pool_tags.extend((0..n).map(|step| StepTag { sequence: s, step }));
    }
    if pool_tags.len() < 2 {
        return Err(invalid("negative pool has fewer than two targets"));
    }
    let positives = predicted
        .iter()
        .map(|tag| match steps_per_sequence.get(tag.sequence) {
            Some(&n) if tag.step < n => Ok(offsets[tag.sequence] + tag.step),
            _ => Err(invalid(format!("prediction for missing target {tag:?}"))),
        })
        .collect::<Result<_>>()?;
    Ok(NegativePlan {
        pool_tags,
        positives,
    })
}

/// Pairs predictions with per-sequence, per-step targets.
pub fn assemble_negatives(
    targets: &[Vec<PoincarePoint>],
    predictions: Vec<(StepTag, PoincarePoint)>,
) -> Result<ContrastiveBatch> {
    let lengths: Vec<usize> = targets.iter().map(Vec::len).collect();
    let (tags, preds): (Vec<StepTag>, Vec<PoincarePoint>) = predictions.into_iter().unzip();
    let plan = plan_negatives(&lengths, &tags)?;
    let pool = targets.iter().flatten().cloned().collect();
    ContrastiveBatch::with_pool(preds, pool, plan.positives, plan.pool_tags)
}

/// Wires the loss into a graph. `predictions` is `m × n`, `pool` is `k × n`.
pub fn contrastive_loss_var(
    g: &mut Graph,
    predictions: Var,
    pool: Var,
    positives: &[usize],
    kind: DistanceKind,
    temperature: f64,
) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(invalid("temperature must be positive"));
    }
    if g.value(pool).rows() < 2 {
        return Err(invalid("contrastive loss needs at least two targets"));
    }
    let d2 = g.pairwise_sq_dist(predictions, pool, kind)?;
    let logits = g.scale(d2, -1.0 / temperature);
    g.cross_entropy(logits, positives)
}

fn rows_of(points: &[PoincarePoint]) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = points.iter().map(|p| p.coords().to_vec()).collect();
    Tensor::from_rows(&rows)
}

/// Hyperbolic contrastive loss of a batch, with unit temperature.
pub fn contrastive_loss(batch: &ContrastiveBatch) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(rows_of(&batch.predictions)?);
    let z = g.constant(rows_of(&batch.pool)?);
    let l = contrastive_loss_var(
        &mut g,
        p,
        z,
        &batch.positives,
        DistanceKind::Hyperbolic,
        1.0,
    )?;
    Ok(g.value(l).item())
}

/// The same objective with squared Euclidean distance, for unconstrained vectors.
pub fn euclidean_contrastive_loss(
    predictions: &[Vec<f64>],
    pool: &[Vec<f64>],
    positives: &[usize],
    temperature: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(Tensor::from_rows(predictions)?);
    let z = g.constant(Tensor::from_rows(pool)?);
    let l = contrastive_loss_var(
        &mut g,
        p,
        z,
        positives,
        DistanceKind::Euclidean,
        temperature,
    )?;
    Ok(g.value(l).item())
}
