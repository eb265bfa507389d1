//! Training loop, checkpoints, evaluation with per-level probe heads, and the
//! analysis exports.
//!
//! Output files:
//! - `metrics.jsonl`: one [`MetricsReport`] per epoch, plus warning rows
//! - `checkpoint_epochNNNN.bin`, `model.bin`: model and optimizer state
//! - `eval_metrics.jsonl`, `eval_levels.jsonl`, `predictions.jsonl`,
//!   `level_select.json`: evaluation results
//!
//! Every JSON file carries [`SCHEMA_VERSION`] in its checkpoint meta or is a
//! flat row type documented here.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DataConfig, EvalConfig, OptimizerKind, RunConfig};
use crate::diff::{Graph, Tensor};
use crate::error::{invalid, Error, Result};
use crate::geometry::{norm, PoincarePoint};
use crate::layers::{EuclideanLinear, HyperbolicMLR, Parameterized, Space};
use crate::metrics::{
    accuracy, compute_level_thresholds, hier_acc_paths, mean_pairwise_distance, radius_summary,
    retrieved_within_threshold, select_level, LevelThresholds, MetricsReport, Weighting,
};
use crate::model::{prediction_radius, ModelSpace, PredictiveModel, StepPredictions};
use crate::optim::{radam_step, rsgd_step, AdamConfig, DivergenceGuard, ParamGroup};
use crate::serialize::Container;
use crate::synthdata::{build_taxonomy, make_splits, read_jsonl, SequenceSample, Splits};
use crate::taxonomy::Taxonomy;

pub const SCHEMA_VERSION: &str = "hyperpredict/1";

/// A labelled taxonomy together with its three splits.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub taxonomy: Taxonomy,
    pub splits: Splits,
}

impl Dataset {
    pub fn load(cfg: &DataConfig) -> Result<Self> {
        match cfg {
            DataConfig::Synthetic(s) => {
                let g = &s.generator;
                let tax = build_taxonomy(g.branching, g.depth, g.d_in, g.seed)?;
                let splits = make_splits(&tax, g, [s.splits.train, s.splits.val, s.splits.test])?;
                Ok(Self {
                    taxonomy: tax.taxonomy,
                    splits,
                })
            }
            DataConfig::Files(f) => {
                let taxonomy = Taxonomy::complete(f.branching, f.depth)?;
                let splits = Splits {
                    train: read_jsonl(&f.train, &taxonomy)?,
                    val: read_jsonl(&f.val, &taxonomy)?,
                    test: read_jsonl(&f.test, &taxonomy)?,
                };
                if splits.train.is_empty() || splits.val.len() < 3 || splits.test.is_empty() {
                    return Err(Error::Config(
                        "data files need train ≥ 1, val ≥ 3, test ≥ 1 rows".into(),
                    ));
                }
                Ok(Self { taxonomy, splits })
            }
        }
    }

    pub fn split(&self, name: &str) -> Result<&[SequenceSample]> {
        match name {
            "train" => Ok(&self.splits.train),
            "val" => Ok(&self.splits.val),
            "test" => Ok(&self.splits.test),
            other => Err(invalid(format!("unknown split `{other}`"))),
        }
    }
}

fn features(samples: &[&SequenceSample]) -> Vec<Vec<Vec<f64>>> {
    samples.iter().map(|s| s.features.clone()).collect()
}

fn stack_rows(samples: &[&SequenceSample]) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = samples
        .iter()
        .flat_map(|s| s.features.iter().cloned())
        .collect();
    Tensor::from_rows(&rows)
}

/// Outcome of a single optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    /// Radii of `ẑ_N(c_{N−1})` for the batch (empty in Euclidean mode).
    pub final_radii: Vec<f64>,
    pub warning: Option<String>,
}

/// Model, optimizer state and the position in the schedule.
#[derive(Clone, Debug)]
pub struct Trainer {
    config: RunConfig,
    model: PredictiveModel,
    group: ParamGroup,
    guard: DivergenceGuard,
    epoch: usize,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let t = &config.training;
        let model =
            PredictiveModel::new(config.space, config.dims, t.delta_max, t.horizon, t.seed)?;
        let group = ParamGroup::from_module(&model)?;
        let guard = DivergenceGuard::new(t.divergence_guard);
        Ok(Self {
            config,
            model,
            group,
            guard,
            epoch: 0,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn model(&self) -> &PredictiveModel {
        &self.model
    }

    pub fn group(&self) -> &ParamGroup {
        &self.group
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn step_count(&self) -> u64 {
        self.group.step_count()
    }

    /// Shuffled minibatches of `0..n` for a 1-based epoch; depends only on
    /// the training seed and the epoch.
    pub fn batch_order(&self, n: usize, epoch: usize) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.training.seed);
        rng.set_stream(epoch as u64);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        idx.chunks(self.config.training.batch)
            .map(<[usize]>::to_vec)
            .collect()
    }

    pub fn train_step(&mut self, batch: &[&SequenceSample]) -> Result<StepOutcome> {
        let first = batch.first().ok_or_else(|| invalid("empty minibatch"))?;
        let n = first.features.len();
        let t = &self.config.training;
        let mut g = Graph::new();
        let m = self.model.bind(&mut g);
        let x = g.constant(stack_rows(batch)?);
        let out = m.batch_loss(&mut g, x, batch.len(), n, t.temperature, t.stop_target_grad)?;
        let loss = g.value(out.loss).item();
        if !loss.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite loss at step {}",
                self.step_count() + 1
            )));
        }
        let final_radii = match self.config.space {
            ModelSpace::Hyperbolic => {
                let k = out
                    .horizons
                    .iter()
                    .position(|&h| h == (n - 1, 1))
                    .expect("δ = 1 is always paired");
                let p = g.value(out.predictions);
                (k * batch.len()..(k + 1) * batch.len())
                    .map(|i| norm(p.row(i)))
                    .collect()
            }
            ModelSpace::Euclidean => Vec::new(),
        };
        g.backward(out.loss)?;
        let grads: Vec<Tensor> = m.params.iter().map(|&v| g.adjoint(v).clone()).collect();
        let o = &self.config.optimizer;
        let report = match o.kind {
            OptimizerKind::Radam => radam_step(&mut self.group, &grads, o.lr, o.adam())?,
            OptimizerKind::Rsgd => rsgd_step(&mut self.group, &grads, o.lr)?,
        };
        self.group.write_to(&mut self.model)?;
        let warning = self.guard.observe(report).then(|| {
            format!(
                "{} consecutive steps clamped manifold parameters at the ball boundary",
                self.guard.consecutive()
            )
        });
        Ok(StepOutcome {
            loss,
            final_radii,
            warning,
        })
    }

    /// Runs the next epoch and returns its rows, warning rows first.
    pub fn train_epoch(&mut self, train: &[SequenceSample]) -> Result<Vec<MetricsReport>> {
        let epoch = self.epoch + 1;
        let mut rows = Vec::new();
        let (mut loss_sum, mut count) = (0.0, 0usize);
        let mut radii = Vec::new();
        for batch in self.batch_order(train.len(), epoch) {
            let samples: Vec<&SequenceSample> = batch.iter().map(|&i| &train[i]).collect();
            let out = self.train_step(&samples)?;
            loss_sum += out.loss * samples.len() as f64;
            count += samples.len();
            radii.extend(out.final_radii);
            if let Some(w) = out.warning {
                rows.push(MetricsReport {
                    epoch,
                    split: "train".into(),
                    warning: Some(w),
                    ..Default::default()
                });
            }
        }
        self.epoch = epoch;
        let summary = radius_summary(&radii);
        rows.push(MetricsReport {
            epoch,
            split: "train".into(),
            loss: Some(loss_sum / count as f64),
            mean_radius: summary.map(|s| s.0),
            radius_p33: summary.map(|s| s.1),
            radius_p66: summary.map(|s| s.2),
            ..Default::default()
        });
        Ok(rows)
    }

    pub fn to_checkpoint(&self) -> Result<Container> {
        let mut c = Container::default();
        self.group.save_into(&mut c);
        c.meta = serde_json::json!({
            "schema": SCHEMA_VERSION,
            "config": serde_json::to_value(&self.config)?,
            "epoch": self.epoch,
            "guard_run": self.guard.consecutive(),
        });
        Ok(c)
    }

    pub fn from_checkpoint(c: &Container) -> Result<Self> {
        if c.meta.get("schema").and_then(|v| v.as_str()) != Some(SCHEMA_VERSION) {
            return Err(Error::Format("not a model checkpoint".into()));
        }
        let config: RunConfig = serde_json::from_value(c.meta["config"].clone())?;
        let field = |k: &str| {
            c.meta[k]
                .as_u64()
                .ok_or_else(|| Error::Format(format!("checkpoint meta lacks `{k}`")))
        };
        let epoch = field("epoch")? as usize;
        let guard_run = field("guard_run")? as usize;
        let mut t = Self::new(config)?;
        t.group.load_from(c)?;
        t.group.write_to(&mut t.model)?;
        t.guard = DivergenceGuard::resume(t.config.training.divergence_guard, guard_run);
        t.epoch = epoch;
        Ok(t)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Container::load(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }
}

/// Where a training run left its artifacts.
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub epochs: usize,
    pub final_loss: f64,
    pub metrics: PathBuf,
    pub model: PathBuf,
}

fn write_json_line(w: &mut impl Write, value: &impl Serialize) -> Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Trains to `config.training.epochs`, from scratch or from `resume`.
/// Metrics rows are appended when resuming.
pub fn run_training(config: &RunConfig, resume: Option<Trainer>) -> Result<TrainSummary> {
    let out = &config.output;
    fs::create_dir_all(out)?;
    fs::write(
        out.join("config.json"),
        serde_json::to_string_pretty(config)?,
    )?;
    let data = Dataset::load(&config.data)?;
    let mut trainer = match resume {
        Some(t) => t,
        None => Trainer::new(config.clone())?,
    };
    let metrics = out.join("metrics.jsonl");
    let file = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(trainer.epoch() > 0)
        .truncate(trainer.epoch() == 0)
        .open(&metrics)?;
    let mut w = BufWriter::new(file);
    let mut final_loss = f64::NAN;
    while trainer.epoch() < config.training.epochs {
        let rows = trainer.train_epoch(&data.splits.train)?;
        for r in &rows {
            write_json_line(&mut w, r)?;
            if let Some(l) = r.loss {
                final_loss = l;
            }
        }
        w.flush()?;
        let e = trainer.epoch();
        let k = config.training.checkpoint_every;
        if k > 0 && e % k == 0 {
            trainer.save(out.join(format!("checkpoint_epoch{e:04}.bin")))?;
        }
    }
    let model = out.join("model.bin");
    trainer.save(&model)?;
    Ok(TrainSummary {
        epochs: trainer.epoch(),
        final_loss,
        metrics,
        model,
    })
}

/// Plain and hierarchical accuracies of predicted label paths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub acc: f64,
    pub td_acc: f64,
    pub bu_acc: f64,
    /// Accuracy at levels `1..=L`.
    pub level_acc: Vec<f64>,
}

/// Scores per-sample paths (one predicted node per level).
pub fn score_paths(pred: &[Vec<usize>], truth: &[Vec<usize>]) -> Result<Scores> {
    let levels = truth
        .first()
        .map(Vec::len)
        .ok_or_else(|| invalid("nothing to score"))?;
    if pred.len() != truth.len() || pred.iter().chain(truth).any(|p| p.len() != levels) {
        return Err(invalid("prediction and label paths differ in shape"));
    }
    let at = |v: &[Vec<usize>], l: usize| v.iter().map(|p| p[l]).collect::<Vec<_>>();
    let level_acc = (0..levels)
        .map(|l| accuracy(&at(pred, l), &at(truth, l)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Scores {
        acc: level_acc[levels - 1],
        td_acc: hier_acc_paths(pred, truth, Weighting::TopDown)?,
        bu_acc: hier_acc_paths(pred, truth, Weighting::BottomUp)?,
        level_acc,
    })
}

/// Classifier for one hierarchy level, read from frozen predictions.
#[derive(Clone, Debug, PartialEq)]
pub enum ProbeHead {
    Hyperbolic(HyperbolicMLR),
    Euclidean(EuclideanLinear),
}

impl Parameterized for ProbeHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Space, &Tensor)) {
        match self {
            ProbeHead::Hyperbolic(h) => h.visit(prefix, f),
            ProbeHead::Euclidean(h) => h.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, Space, &mut Tensor)) {
        match self {
            ProbeHead::Hyperbolic(h) => h.visit_mut(prefix, f),
            ProbeHead::Euclidean(h) => h.visit_mut(prefix, f),
        }
    }
}

impl ProbeHead {
    fn logits_var(
        &self,
        g: &mut Graph,
        x: Tensor,
    ) -> Result<(crate::diff::Var, Vec<crate::diff::Var>)> {
        let vars = self.bind_all(g);
        let x = g.constant(x);
        let y = match self {
            ProbeHead::Hyperbolic(_) => g.mlr_logits(x, vars[0], vars[1])?,
            ProbeHead::Euclidean(_) => g.linear(x, vars[0], Some(vars[1]))?,
        };
        Ok((y, vars))
    }

    /// Full-batch fit with (Riemannian) Adam on softmax cross-entropy.
    pub fn fit(
        space: ModelSpace,
        x: &Tensor,
        labels: &[usize],
        classes: usize,
        cfg: &EvalConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let dim = x.cols();
        let mut head = match space {
            ModelSpace::Hyperbolic => ProbeHead::Hyperbolic(HyperbolicMLR::init(dim, classes, rng)),
            ModelSpace::Euclidean => ProbeHead::Euclidean(EuclideanLinear::init(dim, classes, rng)),
        };
        let mut group = ParamGroup::from_module(&head)?;
        for _ in 0..cfg.probe_steps {
            let mut g = Graph::new();
            let (logits, vars) = head.logits_var(&mut g, x.clone())?;
            let loss = g.cross_entropy(logits, labels)?;
            g.backward(loss)?;
            let grads: Vec<Tensor> = vars.iter().map(|&v| g.adjoint(v).clone()).collect();
            radam_step(&mut group, &grads, cfg.probe_lr, AdamConfig::default())?;
            group.write_to(&mut head)?;
        }
        Ok(head)
    }

    /// Arg-max class index per row.
    pub fn classify(&self, x: &Tensor) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let (logits, _) = self.logits_var(&mut g, x.clone())?;
        let v = g.value(logits);
        Ok((0..v.rows())
            .map(|i| {
                let r = v.row(i);
                (0..r.len()).fold(0, |best, k| if r[k] > r[best] { k } else { best })
            })
            .collect())
    }
}

/// `ẑ_N(c_{N−1})` for each sample.
pub fn final_predictions(
    model: &PredictiveModel,
    samples: &[SequenceSample],
) -> Result<Vec<Vec<f64>>> {
    let refs: Vec<&SequenceSample> = samples.iter().collect();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in refs.chunks(256) {
        for per_seq in model.final_step_predictions(&features(chunk))? {
            let (_, z) = per_seq
                .into_iter()
                .last()
                .expect("δ = 1 always within δ_max");
            out.push(z);
        }
    }
    Ok(out)
}

/// Contrastive loss of a frozen model on `samples`, averaged over minibatches.
pub fn split_loss(
    model: &PredictiveModel,
    samples: &[SequenceSample],
    batch: usize,
    temperature: f64,
) -> Result<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    let refs: Vec<&SequenceSample> = samples.iter().collect();
    for chunk in refs.chunks(batch.max(1)) {
        let mut g = Graph::new();
        let m = model.bind(&mut g);
        let x = g.constant(stack_rows(chunk)?);
        let n = chunk[0].features.len();
        let out = m.batch_loss(&mut g, x, chunk.len(), n, temperature, false)?;
        sum += g.value(out.loss).item() * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(sum / count as f64)
}

/// Per-level probes fitted on the training split.
#[derive(Clone, Debug)]
pub struct Probes {
    pub heads: Vec<ProbeHead>,
}

impl Probes {
    pub fn fit(
        space: ModelSpace,
        tax: &Taxonomy,
        train_features: &[Vec<f64>],
        train: &[SequenceSample],
        cfg: &EvalConfig,
        seed: u64,
    ) -> Result<Self> {
        let x = Tensor::from_rows(train_features)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x7072_6f62);
        let heads = (1..=tax.levels())
            .map(|level| {
                let labels = train
                    .iter()
                    .map(|s| Ok(tax.node(s.level_labels[level - 1])?.class_index))
                    .collect::<Result<Vec<_>>>()?;
                ProbeHead::fit(
                    space,
                    &x,
                    &labels,
                    tax.level_nodes(level).len(),
                    cfg,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { heads })
    }

    /// Predicted node id per level for each row.
    pub fn predict_paths(&self, tax: &Taxonomy, features: &[Vec<f64>]) -> Result<Vec<Vec<usize>>> {
        let x = Tensor::from_rows(features)?;
        let per_level = self
            .heads
            .iter()
            .map(|h| h.classify(&x))
            .collect::<Result<Vec<_>>>()?;
        Ok((0..features.len())
            .map(|i| {
                per_level
                    .iter()
                    .enumerate()
                    .map(|(l, classes)| tax.level_nodes(l + 1)[classes[i]])
                    .collect()
            })
            .collect())
    }
}

/// One line of `predictions.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplePrediction {
    pub seq_id: u64,
    pub split: String,
    pub leaf_id: usize,
    pub level_labels: Vec<usize>,
    pub predicted: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selected_level: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selected_node: Option<usize>,
}

/// One line of `eval_levels.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelRow {
    pub split: String,
    pub level: usize,
    pub acc: f64,
}

/// Radius-driven level selection on the test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelSelection {
    pub r_low: f64,
    pub r_high: f64,
    /// Fraction of test samples whose selected-level class is correct.
    pub accuracy: f64,
    /// How many samples chose each level, `1..=L`.
    pub level_counts: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct EvalOutput {
    pub rows: Vec<MetricsReport>,
    pub scores: Vec<(String, Scores)>,
    pub samples: Vec<SamplePrediction>,
    pub level_selection: Option<LevelSelection>,
}

impl EvalOutput {
    pub fn scores(&self, split: &str) -> Option<&Scores> {
        self.scores.iter().find(|(s, _)| s == split).map(|(_, s)| s)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(File::create(dir.join("eval_metrics.jsonl"))?);
        for r in &self.rows {
            write_json_line(&mut w, r)?;
        }
        w.flush()?;
        let mut w = BufWriter::new(File::create(dir.join("eval_levels.jsonl"))?);
        for (split, s) in &self.scores {
            for (l, acc) in s.level_acc.iter().enumerate() {
                let row = LevelRow {
                    split: split.clone(),
                    level: l + 1,
                    acc: *acc,
                };
                write_json_line(&mut w, &row)?;
            }
        }
        w.flush()?;
        let mut w = BufWriter::new(File::create(dir.join("predictions.jsonl"))?);
        for s in &self.samples {
            write_json_line(&mut w, s)?;
        }
        w.flush()?;
        if let Some(sel) = &self.level_selection {
            fs::write(
                dir.join("level_select.json"),
                serde_json::to_string_pretty(sel)?,
            )?;
        }
        Ok(())
    }
}

/// Fits probes on the training split and scores validation and test.
/// With `level_select`, thresholds come from validation radii and are applied
/// to the test split.
pub fn evaluate(
    model: &PredictiveModel,
    config: &RunConfig,
    data: &Dataset,
    epoch: usize,
    level_select: bool,
) -> Result<EvalOutput> {
    let space = model.space;
    if level_select && space == ModelSpace::Euclidean {
        return Err(Error::UnsupportedMode {
            mode: "euclidean",
            what: "radius-based level selection".into(),
        });
    }
    let tax = &data.taxonomy;
    let train_z = final_predictions(model, &data.splits.train)?;
    let probes = Probes::fit(
        space,
        tax,
        &train_z,
        &data.splits.train,
        &config.eval,
        config.training.seed,
    )?;

    let mut rows = Vec::new();
    let mut scores = Vec::new();
    let mut samples = Vec::new();
    let mut val_radii = Vec::new();
    let mut test_cache = None;
    for split in ["val", "test"] {
        let set = data.split(split)?;
        let z = final_predictions(model, set)?;
        let pred = probes.predict_paths(tax, &z)?;
        let truth: Vec<Vec<usize>> = set.iter().map(|s| s.level_labels.clone()).collect();
        let s = score_paths(&pred, &truth)?;
        let radii: Option<Vec<f64>> = match space {
            ModelSpace::Hyperbolic => Some(
                z.iter()
                    .map(|v| prediction_radius(space, v))
                    .collect::<Result<_>>()?,
            ),
            ModelSpace::Euclidean => None,
        };
        let summary = radii.as_deref().and_then(radius_summary);
        rows.push(MetricsReport {
            epoch,
            split: split.into(),
            loss: Some(split_loss(
                model,
                set,
                config.training.batch,
                config.training.temperature,
            )?),
            acc: Some(s.acc),
            td_acc: Some(s.td_acc),
            bu_acc: Some(s.bu_acc),
            mean_radius: summary.map(|v| v.0),
            radius_p33: summary.map(|v| v.1),
            radius_p66: summary.map(|v| v.2),
            warning: None,
        });
        for (i, sample) in set.iter().enumerate() {
            samples.push(SamplePrediction {
                seq_id: sample.seq_id,
                split: split.into(),
                leaf_id: sample.leaf_id,
                level_labels: sample.level_labels.clone(),
                predicted: pred[i].clone(),
                radius: radii.as_ref().map(|r| r[i]),
                selected_level: None,
                selected_node: None,
            });
        }
        if split == "val" {
            val_radii = radii.unwrap_or_default();
        } else {
            test_cache = Some((pred, truth));
        }
        scores.push((split.to_string(), s));
    }

    let level_selection = if level_select {
        let t = compute_level_thresholds(&val_radii)?;
        let (pred, truth) = test_cache.expect("test split scored");
        Some(apply_level_selection(
            &t,
            tax.levels(),
            &pred,
            &truth,
            &mut samples,
        )?)
    } else {
        None
    };
    Ok(EvalOutput {
        rows,
        scores,
        samples,
        level_selection,
    })
}

fn apply_level_selection(
    t: &LevelThresholds,
    levels: usize,
    pred: &[Vec<usize>],
    truth: &[Vec<usize>],
    samples: &mut [SamplePrediction],
) -> Result<LevelSelection> {
    let mut counts = vec![0; levels];
    let mut hits = 0;
    let test = samples.iter_mut().filter(|s| s.split == "test");
    for (i, s) in test.enumerate() {
        let r = s
            .radius
            .ok_or_else(|| invalid("level selection needs radii"))?;
        let level = select_level(r, t, levels);
        counts[level - 1] += 1;
        let node = pred[i][level - 1];
        hits += usize::from(node == truth[i][level - 1]);
        s.selected_level = Some(level);
        s.selected_node = Some(node);
    }
    Ok(LevelSelection {
        r_low: t.r_low,
        r_high: t.r_high,
        accuracy: hits as f64 / pred.len() as f64,
        level_counts: counts,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportKind {
    Trajectories,
    RadiusCurve,
    Retrieval,
}

/// Predictions of the final step from every admissible context, per sample.
fn step_predictions(
    model: &PredictiveModel,
    samples: &[SequenceSample],
) -> Result<Vec<StepPredictions>> {
    let refs: Vec<&SequenceSample> = samples.iter().collect();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in refs.chunks(256) {
        out.extend(model.final_step_predictions(&features(chunk))?);
    }
    Ok(out)
}

fn require_hyperbolic(model: &PredictiveModel, what: &str) -> Result<()> {
    match model.space {
        ModelSpace::Hyperbolic => Ok(()),
        ModelSpace::Euclidean => Err(Error::UnsupportedMode {
            mode: "euclidean",
            what: what.into(),
        }),
    }
}

/// Writes one analysis table as CSV.
///
/// - `trajectories`: `seq_id,step,z<a>,z<b>`, the two coordinates with the
///   largest mean absolute value over all predictions
/// - `radius_curve`: `step,mean_radius,std_radius,count`
/// - `retrieval`: `step,mean_count,threshold`
///
/// `step` is the number of observed steps `t`; each row concerns `ẑ_N(c_t)`.
pub fn export(
    model: &PredictiveModel,
    samples: &[SequenceSample],
    kind: ExportKind,
    w: impl Write,
) -> Result<()> {
    if samples.is_empty() {
        return Err(invalid("nothing to export"));
    }
    let mut csv = csv::Writer::from_writer(w);
    let preds = step_predictions(model, samples)?;
    match kind {
        ExportKind::Trajectories => {
            let dim = model.dims.d_z;
            let mut mean_abs = vec![0.0; dim];
            for (_, z) in preds.iter().flatten() {
                for (m, v) in mean_abs.iter_mut().zip(z) {
                    *m += v.abs();
                }
            }
            let mut order: Vec<usize> = (0..dim).collect();
            order.sort_by(|&a, &b| mean_abs[b].total_cmp(&mean_abs[a]));
            let (a, b) = (order[0], order.get(1).copied().unwrap_or(order[0]));
            csv.write_record([
                "seq_id".to_string(),
                "step".into(),
                format!("z{a}"),
                format!("z{b}"),
            ])?;
            for (s, per) in samples.iter().zip(&preds) {
                for (t, z) in per {
                    csv.write_record([
                        s.seq_id.to_string(),
                        t.to_string(),
                        z[a].to_string(),
                        z[b].to_string(),
                    ])?;
                }
            }
        }
        ExportKind::RadiusCurve => {
            require_hyperbolic(model, "radius curve")?;
            csv.write_record(["step", "mean_radius", "std_radius", "count"])?;
            for (t, radii) in by_step(&preds, norm) {
                let n = radii.len() as f64;
                let mean = radii.iter().sum::<f64>() / n;
                let var = radii.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
                csv.write_record([
                    t.to_string(),
                    mean.to_string(),
                    var.sqrt().to_string(),
                    radii.len().to_string(),
                ])?;
            }
        }
        ExportKind::Retrieval => {
            require_hyperbolic(model, "retrieval counts")?;
            let counts = retrieval_counts(model, samples, &preds)?;
            csv.write_record(["step", "mean_count", "threshold"])?;
            for (t, mean, threshold) in counts {
                csv.write_record([t.to_string(), mean.to_string(), threshold.to_string()])?;
            }
        }
    }
    csv.flush()?;
    Ok(())
}

fn by_step(preds: &[Vec<(usize, Vec<f64>)>], f: impl Fn(&[f64]) -> f64) -> Vec<(usize, Vec<f64>)> {
    let mut steps: Vec<(usize, Vec<f64>)> = Vec::new();
    for (t, z) in preds.iter().flatten() {
        match steps.iter_mut().find(|(s, _)| s == t) {
            Some((_, v)) => v.push(f(z)),
            None => steps.push((*t, vec![f(z)])),
        }
    }
    steps.sort_by_key(|(t, _)| *t);
    steps
}

/// Mean radius of `ẑ_N(c_t)` for each observed step `t`.
pub fn radius_curve(
    model: &PredictiveModel,
    samples: &[SequenceSample],
) -> Result<Vec<(usize, f64)>> {
    require_hyperbolic(model, "radius curve")?;
    let preds = step_predictions(model, samples)?;
    Ok(by_step(&preds, norm)
        .into_iter()
        .map(|(t, r)| (t, r.iter().sum::<f64>() / r.len() as f64))
        .collect())
}

/// `(step, mean retrieved count, threshold)`; the pool is every target
/// embedding of `samples` and the threshold is the mean distance from all
/// predictions to it.
fn retrieval_counts(
    model: &PredictiveModel,
    samples: &[SequenceSample],
    preds: &[Vec<(usize, Vec<f64>)>],
) -> Result<Vec<(usize, f64, f64)>> {
    let refs: Vec<&SequenceSample> = samples.iter().collect();
    let mut pool = Vec::new();
    for chunk in refs.chunks(256) {
        for seq in model.target_embeddings(&features(chunk))? {
            for z in seq {
                pool.push(PoincarePoint::try_from(z)?);
            }
        }
    }
    let queries: Vec<(usize, PoincarePoint)> = preds
        .iter()
        .flatten()
        .map(|(t, z)| Ok((*t, PoincarePoint::try_from(z.clone())?)))
        .collect::<Result<_>>()?;
    let all: Vec<PoincarePoint> = queries.iter().map(|(_, p)| p.clone()).collect();
    let threshold = mean_pairwise_distance(&all, &pool)?;
    let mut steps: Vec<(usize, f64, usize)> = Vec::new();
    for (t, q) in &queries {
        let c = retrieved_within_threshold(q, &pool, threshold)? as f64;
        match steps.iter_mut().find(|(s, _, _)| s == t) {
            Some(e) => {
                e.1 += c;
                e.2 += 1;
            }
            None => steps.push((*t, c, 1)),
        }
    }
    steps.sort_by_key(|e| e.0);
    Ok(steps
        .into_iter()
        .map(|(t, sum, n)| (t, sum / n as f64, threshold))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{SplitSizes, SyntheticData};
    use crate::model::ModelDims;
    use crate::synthdata::GeneratorConfig;

    pub(crate) fn tiny_config(space: ModelSpace) -> RunConfig {
        let generator = GeneratorConfig {
            d_in: 6,
            seq_len: 4,
            branching: 2,
            depth: 2,
            ..Default::default()
        };
        RunConfig {
            space,
            dims: ModelDims {
                d_in: 6,
                d_z: 3,
                d_c: 5,
            },
            training: crate::config::TrainingConfig {
                batch: 8,
                epochs: 2,
                delta_max: 3,
                ..Default::default()
            },
            data: DataConfig::Synthetic(SyntheticData {
                generator,
                splits: SplitSizes {
                    train: 20,
                    val: 9,
                    test: 10,
                },
            }),
            eval: EvalConfig {
                probe_steps: 20,
                probe_lr: 0.05,
            },
            ..Default::default()
        }
    }

    #[test]
    fn perfect_predictions_score_one() {
        let truth = vec![vec![1, 3], vec![2, 6], vec![1, 4]];
        let s = score_paths(&truth, &truth).unwrap();
        assert_eq!((s.acc, s.td_acc, s.bu_acc), (1.0, 1.0, 1.0));
        assert_eq!(s.level_acc, vec![1.0, 1.0]);
    }

    #[test]
    fn batch_order_covers_every_index() {
        let t = Trainer::new(tiny_config(ModelSpace::Hyperbolic)).unwrap();
        let mut all: Vec<usize> = t.batch_order(20, 1).concat();
        assert_ne!(all, (0..20).collect::<Vec<_>>());
        all.sort();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
        assert_eq!(t.batch_order(20, 1), t.batch_order(20, 1));
        assert_ne!(t.batch_order(20, 1), t.batch_order(20, 2));
    }

    #[test]
    fn checkpoint_restores_trainer_state() {
        let cfg = tiny_config(ModelSpace::Hyperbolic);
        let data = Dataset::load(&cfg.data).unwrap();
        let mut t = Trainer::new(cfg).unwrap();
        t.train_epoch(&data.splits.train).unwrap();
        let back = Trainer::from_checkpoint(&t.to_checkpoint().unwrap()).unwrap();
        assert_eq!(back.model(), t.model());
        assert_eq!(back.group(), t.group());
        assert_eq!(back.epoch(), 1);
    }

    #[test]
    fn level_selection_refuses_euclidean_models() {
        let cfg = tiny_config(ModelSpace::Euclidean);
        let data = Dataset::load(&cfg.data).unwrap();
        let t = Trainer::new(cfg.clone()).unwrap();
        let err = evaluate(t.model(), &cfg, &data, 0, true).unwrap_err();
        assert!(matches!(err, Error::UnsupportedMode { .. }));
        let out = evaluate(t.model(), &cfg, &data, 0, false).unwrap();
        assert_eq!(out.rows.len(), 2);
        assert!(out.rows[0].mean_radius.is_none());
    }

    #[test]
    fn evaluation_with_level_selection_annotates_test_samples() {
        let cfg = tiny_config(ModelSpace::Hyperbolic);
        let data = Dataset::load(&cfg.data).unwrap();
        let t = Trainer::new(cfg.clone()).unwrap();
        let out = evaluate(t.model(), &cfg, &data, 0, true).unwrap();
        let sel = out.level_selection.unwrap();
        assert_eq!(sel.level_counts.iter().sum::<usize>(), 10);
        assert!(out
            .samples
            .iter()
            .all(|s| (s.split == "test") == s.selected_level.is_some()));
    }

    #[test]
    fn exports_have_fixed_schemas() {
        let cfg = tiny_config(ModelSpace::Hyperbolic);
        let data = Dataset::load(&cfg.data).unwrap();
        let t = Trainer::new(cfg).unwrap();
        let mut buf = Vec::new();
        export(
            t.model(),
            &data.splits.test,
            ExportKind::Trajectories,
            &mut buf,
        )
        .unwrap();
        let text = String::from_utf8(buf).unwrap();
        let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
        assert_eq!(header.len(), 4);
        assert_eq!(&header[..2], &["seq_id", "step"]);
        // 10 sequences × steps 1..=3
        assert_eq!(text.lines().count(), 1 + 30);

        let mut buf = Vec::new();
        export(
            t.model(),
            &data.splits.test,
            ExportKind::Retrieval,
            &mut buf,
        )
        .unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + 3);
    }
}
