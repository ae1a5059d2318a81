//! Optimization: loss, AdamW, learning-rate schedule, the training loop and
//! evaluation.

pub mod gradcheck;
mod optim;
mod schedule;

pub use optim::{adamw_step, AdamW, AdamWHyper};
pub use schedule::lr_at;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{batches, prefetch, ChannelStats, Dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, Model, ModelConfig};
use crate::nn::{Mode, Module};
use crate::tensor::{Element, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_base_lr")]
    pub base_lr: f64,
    #[serde(default = "d_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    pub epochs: usize,
    #[serde(default = "d_warmup")]
    pub warmup_epochs: usize,
    /// Defaults to `base_lr / 100`.
    #[serde(default)]
    pub min_lr: Option<f64>,
    #[serde(default = "d_warmup_start")]
    pub warmup_start_factor: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub label_smoothing: f64,
}

fn d_base_lr() -> f64 {
    5e-4
}
fn d_weight_decay() -> f64 {
    0.05
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}
fn d_warmup() -> usize {
    20
}
fn d_warmup_start() -> f64 {
    1e-3
}
fn d_batch() -> usize {
    128
}

impl TrainConfig {
    /// Full-length schedule: 300 epochs with 20 of warmup, batch 128.
    pub fn full() -> Self {
        TrainConfig {
            base_lr: d_base_lr(),
            weight_decay: d_weight_decay(),
            beta1: d_beta1(),
            beta2: d_beta2(),
            eps: d_eps(),
            epochs: 300,
            warmup_epochs: d_warmup(),
            min_lr: None,
            warmup_start_factor: d_warmup_start(),
            batch_size: d_batch(),
            seed: 0,
            label_smoothing: 0.0,
        }
    }

    /// CPU-scale schedule: 15 epochs, 2 of warmup, batch 64.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 15,
            warmup_epochs: 2,
            batch_size: 64,
            ..Self::full()
        }
    }

    pub fn min_lr(&self) -> f64 {
        self.min_lr.unwrap_or(self.base_lr * 1e-2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.warmup_epochs == 0 || self.warmup_epochs >= self.epochs {
            return Err(Error::config(
                "train.warmup_epochs",
                format!(
                    "need 0 < warmup_epochs < epochs, got {} and {}",
                    self.warmup_epochs, self.epochs
                ),
            ));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("train.base_lr", "must be positive"));
        }
        let min = self.min_lr();
        if !(0.0..=self.base_lr).contains(&min) {
            return Err(Error::config("train.min_lr", format!("{min} not in [0, base_lr]")));
        }
        if !(0.0..=1.0).contains(&self.warmup_start_factor) {
            return Err(Error::config("train.warmup_start_factor", "must lie in [0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config("train.label_smoothing", "must lie in [0, 1)"));
        }
        for (f, v) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(f, "must lie in [0, 1)"));
            }
        }
        if self.weight_decay < 0.0 || self.eps <= 0.0 {
            return Err(Error::config(
                "train",
                "weight_decay must be non-negative and eps positive",
            ));
        }
        Ok(())
    }

    pub fn hyper(&self) -> AdamWHyper {
        AdamWHyper {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// A complete run description, as read from a TOML file with `[model]`,
/// `[train]` and `[data]` tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DatasetSpec,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let run: RunConfig = toml::from_str(text)?;
        run.validate()?;
        Ok(run)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.kind == crate::data::DatasetKind::Synthetic && self.data.num_classes != self.model.num_classes {
            return Err(Error::config(
                "data.num_classes",
                format!(
                    "{} differs from model.num_classes {}",
                    self.data.num_classes, self.model.num_classes
                ),
            ));
        }
        Ok(())
    }
}

/// Mean cross-entropy of `logits [B, C]` against `labels`, via log-sum-exp.
pub fn cross_entropy<T: Element>(tape: &mut Tape<T>, logits: Var, labels: &[usize], smoothing: f64) -> Result<Var> {
    tape.cross_entropy(logits, labels, T::lit(smoothing))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_top1: f64,
    pub learning_rate: f64,
    pub wall_seconds: f64,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,val_top1,lr,seconds";

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.4},{},{:.3}",
            self.epoch, self.train_loss, self.val_top1, self.learning_rate, self.wall_seconds
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Single thread, and the `seconds` column is written as 0 so that
    /// metrics files are reproducible byte for byte.
    pub deterministic: bool,
    /// Metrics, checkpoint and config are written here when set.
    pub out_dir: Option<PathBuf>,
    /// Per-epoch progress on stderr.
    pub verbose: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<MetricsRecord>,
    pub best_val_top1: f64,
    pub best_epoch: usize,
    /// Model state after the last epoch.
    pub model: Model<f32>,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "best.ckpt";

/// Fraction of correctly classified samples, in eval mode.
pub fn evaluate(model: &mut Model<f32>, data: &Dataset, stats: &ChannelStats, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for batch in batches(data, batch_size, None, crate::data::Augmentation::None, stats)? {
        let logits = model.predict(&batch.images)?;
        correct += argmax_rows(&logits)
            .iter()
            .zip(&batch.labels)
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Index of the largest entry in each row (first on ties).
pub fn argmax_rows<T: Element>(logits: &Tensor<T>) -> Vec<usize> {
    let c = *logits.shape().last().expect("rank ≥ 1");
    logits
        .data()
        .chunks_exact(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, row[0]), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

fn write_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    fs::write(path, s)?;
    Ok(())
}

/// Trains `model` with AdamW under the warmup-cosine schedule, evaluating
/// on `val` after every epoch. The best-validation checkpoint (earliest on
/// ties) and the metrics file are written to `options.out_dir`.
pub fn train_model(
    model: &mut Model<f32>,
    cfg: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    stats: &ChannelStats,
    augmentation: crate::data::Augmentation,
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::config("data.train_size", "training set is empty"));
    }
    if let Some(dir) = &options.out_dir {
        fs::create_dir_all(dir)?;
    }
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let mut opt = AdamW::new(model, cfg.hyper());
    let mut records = Vec::with_capacity(cfg.epochs);
    let (mut best_val, mut best_epoch) = (f64::NEG_INFINITY, 0);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let shuffle = epoch_seed(cfg.seed, epoch);
        let iter = batches(train, cfg.batch_size, Some(shuffle), augmentation, stats)?;
        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        let mut lr = 0.0;
        let mut run_batch = |batch: crate::data::Batch| -> Result<()> {
            lr = lr_at(step as f64 / steps_per_epoch as f64, cfg);
            let mut tape = Tape::new();
            let x = tape.constant(batch.images);
            let logits = model.forward(&mut tape, x, Mode::Train)?;
            let loss = cross_entropy(&mut tape, logits, &batch.labels, cfg.label_smoothing)?;
            let value = f64::from(tape.value(loss).data()[0]);
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: epoch + 1,
                    step,
                    loss: value,
                });
            }
            tape.backward(loss)?;
            model.zero_grad();
            model.absorb_grads(&tape);
            opt.step(model, lr);
            loss_sum += value * batch.labels.len() as f64;
            seen += batch.labels.len();
            step += 1;
            Ok(())
        };
        if options.deterministic {
            for b in iter {
                run_batch(b)?;
            }
        } else {
            prefetch(iter, 2, &mut run_batch)?;
        }
        let train_loss = loss_sum / seen as f64;
        let val_top1 = evaluate(model, val, stats, cfg.batch_size.max(64))?;
        let elapsed = started.elapsed().as_secs_f64();
        let record = MetricsRecord {
            epoch: epoch + 1,
            train_loss,
            val_top1,
            learning_rate: lr,
            wall_seconds: if options.deterministic { 0.0 } else { elapsed },
        };
        if options.verbose {
            eprintln!(
                "epoch {:>3}/{}  loss {:.4}  val_top1 {:.4}  lr {:.3e}  {:.1}s",
                record.epoch, cfg.epochs, train_loss, val_top1, lr, elapsed
            );
        }
        records.push(record);
        if val_top1 > best_val {
            best_val = val_top1;
            best_epoch = epoch + 1;
            if let Some(dir) = &options.out_dir {
                save_checkpoint(model, Some(stats), &dir.join(CHECKPOINT_FILE))?;
            }
        }
        if let Some(dir) = &options.out_dir {
            write_metrics(&dir.join(METRICS_FILE), &records)?;
        }
    }
    Ok(TrainOutcome {
        records,
        best_val_top1: best_val,
        best_epoch,
        model: model.clone(),
    })
}

/// Builds the model and data of `run` and trains them.
pub fn train(run: &RunConfig, options: &TrainOptions) -> Result<(TrainOutcome, String)> {
    run.validate()?;
    let data = run.data.prepare()?;
    if data.train.num_classes > run.model.num_classes {
        return Err(Error::config(
            "model.num_classes",
            format!("dataset has {} classes", data.train.num_classes),
        ));
    }
    let (c, h, w) = (data.train.channels, data.train.height, data.train.width);
    if (c, h, w) != (run.model.in_channels, run.model.image_size, run.model.image_size) {
        return Err(Error::config(
            "model.image_size",
            format!(
                "dataset images are {c}×{h}×{w}, model expects {}×{s}×{s}",
                run.model.in_channels,
                s = run.model.image_size
            ),
        ));
    }
    let mut model = Model::<f32>::build(&run.model)?;
    if let Some(dir) = &options.out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.toml"), run.to_toml())?;
    }
    let outcome = train_model(
        &mut model,
        &run.train,
        &data.train,
        &data.val,
        &data.stats,
        run.data.augmentation,
        options,
    )?;
    Ok((outcome, data.source))
}

/// Independent shuffle seed for each epoch.
fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    use rand::RngCore;
    crate::rng::stream(seed, &format!("shuffle/{epoch}")).next_u64()
}
