//! Adam and the minibatch training loop.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor};
use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, LossKind, PriorKind};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{
    fisher_ae_objective, standard_normal, vae_elbo_objective, FisherLossOptions, ModelRef,
};
use crate::nets::{AutoEncoder, Module, Parameter, Prior};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[&Parameter], lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.value.raw_dim()))
                .collect::<Vec<_>>()
        };
        Self {
            lr,
            beta1,
            beta2,
            eps,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// One bias-corrected Adam update. Gradients are checked before any
    /// state changes, so a failed step leaves everything untouched.
    pub fn step(&mut self, params: &mut [&mut Parameter], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "adam: {} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if g.shape() != p.value.shape() {
                return Err(Error::shape("adam_step", p.value.shape(), g.shape()));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    name: p.name.clone(),
                });
            }
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (k, p) in params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            ndarray::Zip::from(&mut p.value)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|w, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mhat = *m / c1;
                    let vhat = *v / c2;
                    *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }
    norm
}

pub const METRICS_HEADER: &str = "epoch,loss_total,loss_div,loss_rec,loss_stab,wall_ms";

/// Example-weighted means over one epoch. For the ELBO, `loss_div` is the
/// KL term, `loss_rec` the cross-entropy and `loss_stab` zero.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_div: f64,
    pub loss_rec: f64,
    pub loss_stab: f64,
    pub wall_ms: u128,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.loss_total, self.loss_div, self.loss_rec, self.loss_stab, self.wall_ms
        )
    }
}

/// Initialises the model a config describes for data of dimension
/// `data_dim`.
pub fn build_model(cfg: &ExperimentConfig, data_dim: usize) -> Result<AutoEncoder> {
    let m = &cfg.model;
    let prior = match m.prior {
        PriorKind::Fpe => Prior::fpe(m.d, m.k)?,
        PriorKind::StdNormal => Prior::std_normal(m.d),
    };
    Ok(AutoEncoder::init(
        data_dim,
        m.d,
        &m.hidden,
        m.activation,
        m.output,
        prior,
        cfg.train.seed,
    ))
}

/// The model a config describes with weights restored from `ck`. The
/// config hash is not compared, so evaluation settings may differ from
/// the training run's.
pub fn load_model(cfg: &ExperimentConfig, data_dim: usize, ck: &Checkpoint) -> Result<AutoEncoder> {
    let mut model = build_model(cfg, data_dim)?;
    ck.restore_module(&mut model)?;
    Ok(model)
}

fn epoch_rngs(seed: u64, epoch: usize) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut perm = ChaCha8Rng::seed_from_u64(seed);
    perm.set_stream(2 * epoch as u64);
    let mut eps = ChaCha8Rng::seed_from_u64(seed);
    eps.set_stream(2 * epoch as u64 + 1);
    (perm, eps)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct StepLoss {
    total: f64,
    div: f64,
    rec: f64,
    stab: f64,
}

/// Model, optimizer and bookkeeping of a training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: ExperimentConfig,
    pub model: AutoEncoder,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub lr_halved: bool,
}

impl Trainer {
    pub fn new(cfg: &ExperimentConfig, data_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let model = build_model(cfg, data_dim)?;
        let t = &cfg.train;
        let adam = AdamState::new(&model.parameters(), t.lr, t.beta1, t.beta2, t.eps);
        Ok(Self {
            cfg: cfg.clone(),
            model,
            adam,
            epoch: 0,
            lr_halved: false,
        })
    }

    /// Restores model, optimizer moments and learning rate saved at an
    /// epoch boundary.
    pub fn from_checkpoint(cfg: &ExperimentConfig, data_dim: usize, ck: &Checkpoint) -> Result<Self> {
        let mut tr = Self::new(cfg, data_dim)?;
        if ck.config_hash != cfg.hash() {
            return Err(Error::Checkpoint(
                "config hash differs from the one the checkpoint was written with".into(),
            ));
        }
        ck.restore_module(&mut tr.model)?;
        let names: Vec<String> = tr.model.parameters().iter().map(|p| p.name.clone()).collect();
        for (k, name) in names.iter().enumerate() {
            tr.adam.m[k] = ck.require(&format!("adam.m.{name}"))?.clone();
            tr.adam.v[k] = ck.require(&format!("adam.v.{name}"))?.clone();
        }
        tr.adam.t = ck.scalar("adam.t")? as u64;
        tr.adam.lr = ck.scalar("adam.lr")?;
        tr.lr_halved = ck.scalar("train.lr_halved")? != 0.0;
        tr.epoch = ck.epoch as usize;
        Ok(tr)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.cfg.hash(), self.epoch as u64);
        ck.push_module(&self.model);
        let scalar = |v: f64| Tensor::from_elem(IxDyn(&[]), v);
        for (k, p) in self.model.parameters().iter().enumerate() {
            ck.push(format!("adam.m.{}", p.name), self.adam.m[k].clone());
            ck.push(format!("adam.v.{}", p.name), self.adam.v[k].clone());
        }
        ck.push("adam.t", scalar(self.adam.t as f64));
        ck.push("adam.lr", scalar(self.adam.lr));
        ck.push("train.lr_halved", scalar(if self.lr_halved { 1.0 } else { 0.0 }));
        ck
    }

    fn loss_and_grads(&self, x: &Tensor, eps: &Tensor) -> Result<(StepLoss, Vec<Tensor>)> {
        let tape = Tape::new();
        let bound = ModelRef::from(&self.model).bind(&tape, true);
        let params = bound.params();
        let (root, loss) = match self.cfg.model.loss {
            LossKind::Fisher => {
                let opts = FisherLossOptions {
                    recon_multiplier: self.cfg.model.recon_multiplier,
                    include_laplacian: false,
                };
                let (root, b) = fisher_ae_objective(&bound, x, eps, &opts)?;
                let l = StepLoss {
                    total: b.total,
                    div: b.posterior_div,
                    rec: b.reconstruction,
                    stab: b.stability,
                };
                (root, l)
            }
            LossKind::Elbo => {
                let (root, b) = vae_elbo_objective(&bound, x, eps)?;
                let l = StepLoss {
                    total: b.total,
                    div: b.kl,
                    rec: b.bce,
                    stab: 0.0,
                };
                (root, l)
            }
        };
        Ok((loss, tape.grad_values(root, &params)?))
    }

    /// One optimizer step on minibatch `x` with draws `eps`. Returns `None`
    /// when a non-finite value caused the step to be skipped.
    fn step(&mut self, x: &Tensor, eps: &Tensor) -> Result<Option<StepLoss>> {
        let outcome = self.loss_and_grads(x, eps).and_then(|(loss, mut grads)| {
            if self.cfg.train.clip_norm > 0.0 {
                clip_global_norm(&mut grads, self.cfg.train.clip_norm);
            }
            let mut params = self.model.parameters_mut();
            self.adam.step(&mut params, &grads)?;
            Ok(loss)
        });
        match outcome {
            Ok(l) => Ok(Some(l)),
            Err(
                e @ (Error::NonFiniteLoss(_)
                | Error::NonFiniteGradient { .. }
                | Error::NumericOverflow { .. }),
            ) => {
                if self.lr_halved {
                    return Err(e);
                }
                self.lr_halved = true;
                self.adam.lr *= 0.5;
                log::warn!(
                    "epoch {}: skipped step ({e}); learning rate halved to {:e}",
                    self.epoch + 1,
                    self.adam.lr
                );
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }

    /// Runs one pass over `data` in a permutation derived from
    /// `(seed, epoch)`.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<EpochMetrics> {
        let start = Instant::now();
        let n = data.len();
        if n == 0 {
            return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
        }
        let (mut perm_rng, mut eps_rng) = epoch_rngs(self.cfg.train.seed, self.epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut perm_rng);
        let (l, d) = (self.cfg.train.l, self.cfg.model.d);
        let mut acc = StepLoss::default();
        let mut seen = 0usize;
        for batch in order.chunks(self.cfg.train.batch_size) {
            let x = data.items.select(Axis(0), batch).into_dyn();
            let eps = standard_normal(&mut eps_rng, l * batch.len(), d);
            if let Some(s) = self.step(&x, &eps)? {
                let w = batch.len() as f64;
                acc.total += w * s.total;
                acc.div += w * s.div;
                acc.rec += w * s.rec;
                acc.stab += w * s.stab;
                seen += batch.len();
            }
        }
        self.epoch += 1;
        let w = seen.max(1) as f64;
        Ok(EpochMetrics {
            epoch: self.epoch,
            loss_total: acc.total / w,
            loss_div: acc.div / w,
            loss_rec: acc.rec / w,
            loss_stab: acc.stab / w,
            wall_ms: start.elapsed().as_millis(),
        })
    }
}

/// Paths of a run directory's artifacts.
pub fn metrics_path(dir: &Path) -> PathBuf {
    dir.join("metrics.csv")
}

pub fn checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("model.ckpt")
}

/// Rewrites `path` keeping the header and rows for epochs `<= epoch`.
fn truncate_metrics(path: &Path, epoch: usize) -> Result<()> {
    let text = fs::read_to_string(path).unwrap_or_default();
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for line in text.lines().skip(1) {
        let e: Option<usize> = line.split(',').next().and_then(|s| s.parse().ok());
        if e.is_some_and(|e| e <= epoch) {
            out.push_str(line);
            out.push('\n');
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub metrics: Vec<EpochMetrics>,
}

/// Trains until `cfg.train.epochs` epochs are complete.
///
/// With `out_dir`, appends to `metrics.csv` after every epoch and writes
/// `model.ckpt` every `checkpoint_every` epochs and at the end. With
/// `resume`, continues from that checkpoint.
pub fn train(
    cfg: &ExperimentConfig,
    data: &Dataset,
    out_dir: Option<&Path>,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    let mut trainer = match resume {
        Some(ck) => Trainer::from_checkpoint(cfg, data.dim(), ck)?,
        None => Trainer::new(cfg, data.dim())?,
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        truncate_metrics(&metrics_path(dir), trainer.epoch)?;
    }
    let mut metrics = Vec::new();
    while trainer.epoch < cfg.train.epochs {
        let m = trainer.run_epoch(data)?;
        log::info!(
            "epoch {}/{}: loss {:.6} ({} ms)",
            m.epoch,
            cfg.train.epochs,
            m.loss_total,
            m.wall_ms
        );
        if let Some(dir) = out_dir {
            let path = metrics_path(dir);
            let mut f = fs::OpenOptions::new()
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            writeln!(f, "{}", m.csv_row()).map_err(|e| Error::io(&path, e))?;
            if m.epoch % cfg.train.checkpoint_every == 0 || m.epoch == cfg.train.epochs {
                trainer.checkpoint().save(&checkpoint_path(dir))?;
            }
        }
        metrics.push(m);
    }
    Ok(TrainOutcome { trainer, metrics })
}
