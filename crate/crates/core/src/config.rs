//! Experiment configuration, read from TOML.
//!
//! Every section and key is optional and falls back to the defaults below;
//! unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nets::Activation;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Fisher,
    Elbo,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorKind {
    Fpe,
    StdNormal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub loss: LossKind,
    pub prior: PriorKind,
    /// FPE order.
    #[serde(rename = "K")]
    pub k: usize,
    pub d: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub output: Activation,
    pub recon_multiplier: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Fisher,
            prior: PriorKind::Fpe,
            k: 5,
            d: 8,
            hidden: vec![512, 256],
            activation: Activation::Softplus,
            output: Activation::Sigmoid,
            recon_multiplier: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Posterior samples per datum.
    #[serde(rename = "L")]
    pub l: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Global-norm gradient clip; 0 disables it.
    pub clip_norm: f64,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            l: 1,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 128,
            epochs: 100,
            seed: 0,
            clip_norm: 0.0,
            checkpoint_every: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dataset: DatasetKind,
    /// Directory holding the IDX files (relative paths resolve against the
    /// config file's directory).
    pub dir: PathBuf,
    pub train_size: usize,
    pub test_size: usize,
    /// Synthetic data: `x = A z + w` with `A` drawn from `seed`.
    pub synthetic_dim: usize,
    pub synthetic_latent: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Mnist,
            dir: PathBuf::from("data/mnist"),
            train_size: 8000,
            test_size: 2000,
            synthetic_dim: 4,
            synthetic_latent: 2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvgdSection {
    pub particles: usize,
    pub step_size: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for SvgdSection {
    fn default() -> Self {
        Self {
            particles: 64,
            step_size: 1e-3,
            iterations: 15_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub noise_axis: Vec<f64>,
    pub mask_axis: Vec<f64>,
    pub trials: usize,
    pub kmeans_restarts: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            noise_axis: vec![0.0, 0.05, 0.1, 0.2, 0.3],
            mask_axis: vec![0.0, 0.2, 0.4, 0.6, 0.8],
            trials: 5,
            kmeans_restarts: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub svgd: SvgdSection,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(one_line(&e.to_string())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; a relative `data.dir` is resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if cfg.data.dir.is_relative() {
            if let Some(parent) = path.parent() {
                cfg.data.dir = parent.join(&cfg.data.dir);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_toml().as_bytes()).into()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let m = &self.model;
        let t = &self.train;
        if m.d == 0 {
            return bad("model.d must be positive".into());
        }
        if m.prior == PriorKind::Fpe && m.k == 0 {
            return bad("model.K must be positive".into());
        }
        if m.loss == LossKind::Elbo && m.prior != PriorKind::StdNormal {
            return bad("model.loss = \"elbo\" requires model.prior = \"std-normal\"".into());
        }
        if m.hidden.contains(&0) {
            return bad("model.hidden widths must be positive".into());
        }
        if !(m.recon_multiplier > 0.0) {
            return bad("model.recon_multiplier must be positive".into());
        }
        if t.l == 0 || t.batch_size == 0 || t.epochs == 0 || t.checkpoint_every == 0 {
            return bad("train.L, batch_size, epochs and checkpoint_every must be positive".into());
        }
        if !(t.lr > 0.0) || !(t.eps > 0.0) {
            return bad("train.lr and train.eps must be positive".into());
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return bad("train.beta1 and train.beta2 must lie in [0, 1)".into());
        }
        if !(t.clip_norm >= 0.0) {
            return bad("train.clip_norm must be >= 0".into());
        }
        if self.svgd.particles < 2 || !(self.svgd.step_size > 0.0) {
            return bad("svgd.particles must be >= 2 and svgd.step_size positive".into());
        }
        if self.eval.trials == 0 || self.eval.kmeans_restarts == 0 {
            return bad("eval.trials and eval.kmeans_restarts must be positive".into());
        }
        for (name, axis) in [("noise_axis", &self.eval.noise_axis), ("mask_axis", &self.eval.mask_axis)] {
            if axis.windows(2).any(|w| !(w[0] < w[1])) {
                return bad(format!("eval.{name} must be strictly increasing"));
            }
        }
        if self.eval.noise_axis.iter().any(|&v| !(v >= 0.0)) {
            return bad("eval.noise_axis values must be >= 0".into());
        }
        if self.eval.mask_axis.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return bad("eval.mask_axis values must lie in [0, 1]".into());
        }
        Ok(())
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}
