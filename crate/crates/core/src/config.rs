//! Run configuration: one JSON document, validated on load, unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HorizonEncoding, ModelDims, ModelSpace};
use crate::optim::AdamConfig;
use crate::synthdata::GeneratorConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Riemannian Adam on manifold parameters, Adam elsewhere.
    Radam,
    /// Riemannian SGD on manifold parameters, plain SGD elsewhere.
    Rsgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Radam,
            lr: 1e-3,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub delta_max: usize,
    #[serde(default)]
    pub stop_target_grad: bool,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub horizon: HorizonEncoding,
    /// Write a checkpoint every this many epochs; 0 disables intermediate ones.
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    /// Consecutive boundary-clamped steps before a warning row is written.
    #[serde(default = "default_guard")]
    pub divergence_guard: usize,
}

fn default_temperature() -> f64 {
    1.0
}
fn default_checkpoint_every() -> usize {
    10
}
fn default_guard() -> usize {
    100
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch: 128,
            epochs: 100,
            seed: 0,
            delta_max: 4,
            stop_target_grad: false,
            temperature: default_temperature(),
            horizon: HorizonEncoding::Scalar,
            checkpoint_every: default_checkpoint_every(),
            divergence_guard: default_guard(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 512,
            val: 128,
            test: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticData {
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub splits: SplitSizes,
}

/// JSONL splits on disk plus the shape of the complete taxonomy they label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileData {
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
    pub branching: usize,
    pub depth: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic(SyntheticData),
    Files(FileData),
}

/// Settings of the per-level probe heads fitted at evaluation time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub probe_steps: usize,
    pub probe_lr: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            probe_steps: 300,
            probe_lr: 1e-2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub space: ModelSpace,
    #[serde(default)]
    pub dims: ModelDims,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            space: ModelSpace::Hyperbolic,
            dims: ModelDims::default(),
            optimizer: OptimizerConfig::default(),
            training: TrainingConfig::default(),
            data: DataConfig::Synthetic(SyntheticData {
                generator: GeneratorConfig::default(),
                splits: SplitSizes::default(),
            }),
            eval: EvalConfig::default(),
            output: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let d = self.dims;
        if d.d_in == 0 || d.d_z == 0 || d.d_c == 0 {
            return bad("dims must be positive".into());
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return bad(format!("optimizer.lr must be positive, got {}", o.lr));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return bad("optimizer betas must lie in [0, 1)".into());
        }
        if !(o.eps > 0.0) {
            return bad("optimizer.eps must be positive".into());
        }
        let t = &self.training;
        if t.batch == 0 || t.epochs == 0 {
            return bad("training.batch and training.epochs must be positive".into());
        }
        if t.delta_max == 0 {
            return bad("training.delta_max must be at least 1".into());
        }
        if !(t.temperature > 0.0 && t.temperature.is_finite()) {
            return bad("training.temperature must be positive".into());
        }
        if t.divergence_guard == 0 {
            return bad("training.divergence_guard must be positive".into());
        }
        if self.eval.probe_steps == 0 || !(self.eval.probe_lr > 0.0) {
            return bad("eval.probe_steps and eval.probe_lr must be positive".into());
        }
        match &self.data {
            DataConfig::Synthetic(s) => {
                s.generator.validate()?;
                if s.generator.d_in != d.d_in {
                    return bad(format!(
                        "data.d_in {} differs from dims.d_in {}",
                        s.generator.d_in, d.d_in
                    ));
                }
                if t.delta_max >= s.generator.seq_len {
                    return bad(format!(
                        "training.delta_max {} must be below seq_len {}",
                        t.delta_max, s.generator.seq_len
                    ));
                }
                let sp = s.splits;
                if sp.train == 0 || sp.val < 3 || sp.test == 0 {
                    return bad("splits need train ≥ 1, val ≥ 3, test ≥ 1".into());
                }
            }
            DataConfig::Files(f) => {
                if f.branching < 2 || f.depth < 2 {
                    return bad("data.files needs branching ≥ 2 and depth ≥ 2".into());
                }
            }
        }
        Ok(())
    }
}
