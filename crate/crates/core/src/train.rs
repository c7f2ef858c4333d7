//! Training protocol: optimizers, learning-rate schedule, negative-sampling
//! warm-up, checkpointing and validation-based model selection.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use ama_nn::{Adam, Scalar, Tensor};

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::data::{ImageSet, LabeledSet, SplitManifest, Splits};
use crate::eval::auroc;
use crate::latent::{sample_atypical, sample_sipple_negatives, InterpPlan, NegativeMode};
use crate::losses::{critic_pass, generator_pass, LossBreakdown, LossWeights, StepBatch};
use crate::model::Networks;
use crate::scoring::{anomaly_score_from_r, fit_gaussian, r_scores, GaussianScoreModel, ScoreMode};
use crate::{AmaError, Result};

/// Piecewise-constant schedule: `lr * factor^(number of knots <= epoch)`.
pub fn lr_at(epoch: usize, cfg: &ExperimentConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(AmaError::contract(format!("epoch {epoch} outside 0..{}", cfg.epochs)));
    }
    let passed = cfg.lr_decay_epochs.iter().filter(|&&k| k <= epoch).count();
    Ok(cfg.lr * cfg.lr_decay_factor.powi(passed as i32))
}

/// Losses of the last critic update and of the encoder/generator update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub critic: LossBreakdown,
    pub generator: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    /// Means of the generator-pass breakdowns over the epoch.
    pub critic_total: f64,
    pub gen_total: f64,
    pub mirrored: f64,
    pub latent_reg: f64,
    pub interp: Option<f64>,
    pub neg: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub id: String,
    /// Completed epochs.
    pub epoch: usize,
    pub path: Option<String>,
    /// Fit of the training R-scores at this checkpoint.
    pub gaussian: GaussianScoreModel,
    pub val_auroc_r: f64,
    pub val_auroc_a: f64,
}

impl CheckpointRecord {
    pub fn val_auroc(&self, mode: ScoreMode) -> f64 {
        match mode {
            ScoreMode::RScore => self.val_auroc_r,
            ScoreMode::AScore => self.val_auroc_a,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub split: SplitManifest,
    pub n_val: usize,
    pub epochs: Vec<EpochMetrics>,
    pub checkpoints: Vec<CheckpointRecord>,
    /// Best checkpoint under the configured score mode.
    pub best_checkpoint: Option<String>,
    pub wall_clock_seconds: f64,
}

impl RunManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| AmaError::config_general(format!("invalid run manifest: {e}")))
    }

    pub fn checkpoint(&self, id: &str) -> Option<&CheckpointRecord> {
        self.checkpoints.iter().find(|c| c.id == id)
    }
}

/// Checkpoint with the highest validation AUROC under `mode`; ties go to
/// the earliest epoch.
pub fn select_best_checkpoint(run: &RunManifest, mode: ScoreMode) -> Result<&CheckpointRecord> {
    if run.n_val == 0 {
        return Err(AmaError::config("n_validation_anomalies", "model selection needs a validation set"));
    }
    let mut best: Option<&CheckpointRecord> = None;
    for c in &run.checkpoints {
        best = match best {
            Some(b) if c.val_auroc(mode) > b.val_auroc(mode) || (c.val_auroc(mode) == b.val_auroc(mode) && c.epoch < b.epoch) => Some(c),
            Some(b) => Some(b),
            None => Some(c),
        };
    }
    best.ok_or_else(|| AmaError::contract("the run saved no checkpoints"))
}

/// Optimizer state and randomness of one training run.
pub struct Trainer<T> {
    pub nets: Networks<T>,
    pub cfg: ExperimentConfig,
    weights: LossWeights,
    opt_e: Adam<T>,
    opt_g: Adam<T>,
    opt_d: Adam<T>,
    rng: ChaCha8Rng,
    steps: usize,
}

impl<T: Scalar> Trainer<T> {
    /// Networks are initialized from `cfg.seed`.
    pub fn new(cfg: &ExperimentConfig, image_shape: (usize, usize, usize)) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let nets = Networks::new(cfg.model_spec(image_shape), &mut rng)?;
        Self::with_networks(cfg, nets, rng)
    }

    pub fn with_networks(cfg: &ExperimentConfig, mut nets: Networks<T>, rng: ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        nets.train();
        Ok(Self {
            nets,
            weights: cfg.loss_weights(),
            opt_e: Adam::new(cfg.lr, cfg.adam_e_beta1, cfg.adam_e_beta2),
            opt_g: Adam::new(cfg.lr, cfg.adam_gd_beta1, cfg.adam_gd_beta2),
            opt_d: Adam::new(cfg.lr, cfg.adam_gd_beta1, cfg.adam_gd_beta2),
            cfg: cfg.clone(),
            rng,
            steps: 0,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.opt_e.lr = lr;
        self.opt_g.lr = lr;
        self.opt_d.lr = lr;
    }

    /// Interpolation plan and negative codes for a batch of `n` at `epoch`.
    fn step_batch(&mut self, x: Tensor<T>, epoch: usize) -> Result<StepBatch<T>> {
        let n = x.batch();
        let cfg = &self.cfg;
        let interp = if cfg.interp_enabled {
            Some(InterpPlan::sample(n, &cfg.simplex(), &mut self.rng)?)
        } else {
            None
        };
        let z_neg = if epoch < cfg.warmup_epochs {
            None
        } else {
            match cfg.negative_mode {
                NegativeMode::Atypical => Some(sample_atypical::<T>(&cfg.atypical(), n, &mut self.rng)?.codes),
                NegativeMode::Sipple => {
                    Some(sample_sipple_negatives::<T>(cfg.latent_dim, cfg.sipple_half_width, n, &mut self.rng)?.codes)
                }
                NegativeMode::None => None,
            }
        };
        Ok(StepBatch { x, interp, z_neg })
    }

    fn check(&self, b: LossBreakdown, epoch: usize) -> Result<LossBreakdown> {
        if b.is_finite() {
            Ok(b)
        } else {
            log::error!("non-finite loss at epoch {epoch}, step {}: {b}", self.steps);
            Err(AmaError::Divergence {
                epoch,
                step: self.steps,
                breakdown: Box::new(b),
            })
        }
    }

    /// `n_critic` critic updates, then one encoder/generator update.
    pub fn train_step(&mut self, x: Tensor<T>, epoch: usize) -> Result<StepReport> {
        if self.nets.mode() != ama_nn::Mode::Train {
            return Err(AmaError::contract("training needs the networks in training mode"));
        }
        let batch = self.step_batch(x, epoch)?;
        let mut critic = LossBreakdown::default();
        for _ in 0..self.cfg.n_critic.max(1) {
            zero_all(&mut self.nets);
            let b = critic_pass(&mut self.nets, &batch, &self.weights)?;
            critic = self.check(b, epoch)?;
            let c = &mut self.nets.critic;
            let mut params = c.body.params_mut();
            params.extend(c.head.params_mut());
            self.opt_d.step(params);
            c.body.refresh_spectral(true);
            c.head.refresh_spectral(true);
        }
        zero_all(&mut self.nets);
        let b = generator_pass(&mut self.nets, &batch, &self.weights)?;
        let generator = self.check(b, epoch)?;
        self.opt_e.step(self.nets.encoder.net.params_mut());
        self.opt_g.step(self.nets.generator.net.params_mut());
        zero_all(&mut self.nets);
        self.steps += 1;
        Ok(StepReport { critic, generator })
    }

    /// One pass over `train` in a seeded order. A short final batch is
    /// dropped unless it is the only one.
    pub fn train_epoch(&mut self, train: &ImageSet, epoch: usize) -> Result<EpochMetrics> {
        let start = Instant::now();
        let lr = lr_at(epoch, &self.cfg)?;
        self.set_lr(lr);
        let seed: u64 = self.rng.random();
        let bs = self.cfg.batch_size;
        let mut reports = Vec::new();
        for (idx, batch) in train.batches::<T>(bs, Some(seed)) {
            if idx.len() < bs && train.len() >= bs {
                continue;
            }
            reports.push(self.train_step(batch.tensor, epoch)?.generator);
        }
        let n = reports.len().max(1) as f64;
        let mean = |f: &dyn Fn(&LossBreakdown) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let opt_mean = |f: &dyn Fn(&LossBreakdown) -> Option<f64>| {
            let v: Vec<f64> = reports.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        Ok(EpochMetrics {
            epoch,
            lr,
            steps: reports.len(),
            critic_total: mean(&|b| b.critic_total),
            gen_total: mean(&|b| b.gen_total),
            mirrored: mean(&|b| b.terms.mirrored),
            latent_reg: mean(&|b| b.terms.latent_reg),
            interp: opt_mean(&|b| b.terms.interp),
            neg: opt_mean(&|b| b.terms.neg),
            seconds: start.elapsed().as_secs_f64(),
        })
    }
}

fn zero_all<T: Scalar>(nets: &mut Networks<T>) {
    nets.encoder.net.zero_grad();
    nets.generator.net.zero_grad();
    nets.critic.body.zero_grad();
    nets.critic.head.zero_grad();
}

/// Gaussian fit on training R-scores and validation AUROC under both modes.
pub fn validate_networks<T: Scalar>(
    nets: &Networks<T>,
    train: &ImageSet,
    val: &LabeledSet,
    cfg: &ExperimentConfig,
) -> Result<(GaussianScoreModel, f64, f64)> {
    if val.is_empty() {
        return Err(AmaError::config("n_validation_anomalies", "model selection needs a validation set"));
    }
    let fit = r_scores(nets, train, cfg.score_batch_size)?;
    let gaussian = fit_gaussian(&fit, cfg.variance_floor)?;
    let r = r_scores(nets, &val.images, cfg.score_batch_size)?;
    let a = r
        .iter()
        .map(|&v| anomaly_score_from_r(v, Some(&gaussian), ScoreMode::AScore))
        .collect::<Result<Vec<_>>>()?;
    Ok((gaussian, auroc(&r, &val.anomaly)?, auroc(&a, &val.anomaly)?))
}

/// A finished run: its manifest and the best weights under each score mode.
pub struct TrainOutcome<T> {
    pub manifest: RunManifest,
    pub best_r: Checkpoint<T>,
    pub best_a: Checkpoint<T>,
}

impl<T: Clone> TrainOutcome<T> {
    pub fn best(&self, mode: ScoreMode) -> &Checkpoint<T> {
        match mode {
            ScoreMode::RScore => &self.best_r,
            ScoreMode::AScore => &self.best_a,
        }
    }

    pub fn best_record(&self, mode: ScoreMode) -> Result<&CheckpointRecord> {
        select_best_checkpoint(&self.manifest, mode)
    }
}

/// Where a run writes checkpoints and logs; nothing is written without one.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub checkpoints: PathBuf,
    pub log: PathBuf,
    pub split_manifest: Option<String>,
}

fn log_line(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| AmaError::io(path, e))?;
    writeln!(f, "{value}").map_err(|e| AmaError::io(path, e))
}

/// Trains on `splits.train` for `cfg.epochs`, checkpointing every
/// `cfg.checkpoint_every` epochs and after the last one, and selects the
/// best checkpoint on `splits.val`.
pub fn train_run<T: Scalar>(cfg: &ExperimentConfig, splits: &Splits, out: Option<&RunOutput>) -> Result<TrainOutcome<T>> {
    let start = Instant::now();
    let train = &splits.train;
    if train.len() < 2 {
        return Err(AmaError::config_general(format!("training needs at least 2 images, got {}", train.len())));
    }
    if splits.val.is_empty() {
        return Err(AmaError::config("n_validation_anomalies", "model selection needs a validation set"));
    }
    let mut trainer = Trainer::<T>::new(cfg, (train.channels, train.height, train.width))?;
    if let Some(o) = out {
        std::fs::create_dir_all(&o.checkpoints).map_err(|e| AmaError::io(&o.checkpoints, e))?;
        if let Some(dir) = o.log.parent() {
            std::fs::create_dir_all(dir).map_err(|e| AmaError::io(dir, e))?;
        }
    }
    let mut manifest = RunManifest {
        config: cfg.clone(),
        split: splits.manifest.clone(),
        n_val: splits.val.len(),
        epochs: Vec::new(),
        checkpoints: Vec::new(),
        best_checkpoint: None,
        wall_clock_seconds: 0.0,
    };
    let mut best: [Option<(f64, Checkpoint<T>)>; 2] = [None, None];
    for epoch in 0..cfg.epochs {
        let metrics = trainer.train_epoch(train, epoch)?;
        log::info!(
            "epoch {}/{} lr {:.2e} gen {:.4} critic {:.4} ({:.1}s)",
            epoch + 1,
            cfg.epochs,
            metrics.lr,
            metrics.gen_total,
            metrics.critic_total,
            metrics.seconds
        );
        if let Some(o) = out {
            log_line(&o.log, &serde_json::json!({"event": "epoch", "metrics": metrics}))?;
        }
        manifest.epochs.push(metrics);
        let done = epoch + 1;
        if done % cfg.checkpoint_every.max(1) != 0 && done != cfg.epochs {
            continue;
        }
        trainer.nets.eval();
        let (gaussian, val_r, val_a) = validate_networks(&trainer.nets, train, &splits.val, cfg)?;
        let ckpt = Checkpoint::capture(&trainer.nets, cfg, done, out.and_then(|o| o.split_manifest.clone()));
        trainer.nets.train();
        let id = format!("epoch_{done:03}");
        let path = match out {
            Some(o) => {
                let p = o.checkpoints.join(format!("{id}.ckpt"));
                ckpt.save(&p)?;
                Some(p.to_string_lossy().into_owned())
            }
            None => None,
        };
        let record = CheckpointRecord {
            id,
            epoch: done,
            path,
            gaussian,
            val_auroc_r: val_r,
            val_auroc_a: val_a,
        };
        log::info!("checkpoint {}: val AUROC r {:.4} a {:.4}", record.id, val_r, val_a);
        if let Some(o) = out {
            log_line(&o.log, &serde_json::json!({"event": "checkpoint", "record": record}))?;
        }
        for (slot, v) in best.iter_mut().zip([val_r, val_a]) {
            if slot.as_ref().is_none_or(|(b, _)| v > *b) {
                *slot = Some((v, ckpt.clone()));
            }
        }
        manifest.checkpoints.push(record);
    }
    manifest.best_checkpoint = Some(select_best_checkpoint(&manifest, cfg.score_mode)?.id.clone());
    manifest.wall_clock_seconds = start.elapsed().as_secs_f64();
    let [r, a] = best;
    Ok(TrainOutcome {
        manifest,
        best_r: r.expect("at least one checkpoint").1,
        best_a: a.expect("at least one checkpoint").1,
    })
}
