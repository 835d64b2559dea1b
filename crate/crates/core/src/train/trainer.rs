use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{metrics, ConfusionMatrix, Metrics};
use super::optim::{clip_grad_norm, grad_norm, AdamW, AdamWConfig};
use super::schedule::lr_schedule;
use crate::data::{preprocess_tile, Augmenter, Label, PreprocessConfig, RasterRegistry, Sample, WeightedSampler};
use crate::error::{Error, Result};
use crate::model::{argmax_rows, HybridModel};
use crate::numerics::{Graph, ParamStore, Precision, Real, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleUnit {
    #[default]
    Epoch,
    Step,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
    /// Batches per epoch; `None` means one pass worth of draws.
    pub steps_per_epoch: Option<usize>,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub schedule: ScheduleUnit,
    pub precision: Precision,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_max: 1e-4,
            weight_decay: 0.05,
            betas: (0.9, 0.999),
            eps: 1e-8,
            warmup_epochs: 5,
            total_epochs: 50,
            batch_size: 32,
            steps_per_epoch: None,
            grad_clip: Some(1.0),
            schedule: ScheduleUnit::Epoch,
            precision: Precision::Single,
            eval_batch_size: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::Config(format!("train.{field}: {why}")));
        if !(self.lr_max > 0.0 && self.lr_max.is_finite()) {
            return bad("lr_max", format!("must be positive, got {}", self.lr_max));
        }
        if self.warmup_epochs == 0 || self.warmup_epochs >= self.total_epochs {
            return bad(
                "warmup_epochs",
                format!("must satisfy 0 < warmup_epochs ({}) < total_epochs ({})", self.warmup_epochs, self.total_epochs),
            );
        }
        if self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) || self.eps <= 0.0 {
            return bad("betas", "weight_decay >= 0, betas in [0, 1) and eps > 0 required".into());
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 || self.steps_per_epoch == Some(0) {
            return bad("batch_size", "batch sizes and steps_per_epoch must be positive".into());
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return bad("grad_clip", "must be positive when set".into());
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            betas: self.betas,
            eps: self.eps,
        }
    }

    pub fn steps_for(&self, n_train: usize) -> usize {
        self.steps_per_epoch.unwrap_or_else(|| n_train.div_ceil(self.batch_size).max(1))
    }

    /// Learning rate for `step` (0-based) of `epoch`.
    pub fn lr_at(&self, epoch: usize, step: usize, steps: usize) -> Result<f64> {
        match self.schedule {
            ScheduleUnit::Epoch => lr_schedule(epoch, self.lr_max, self.warmup_epochs, self.total_epochs),
            ScheduleUnit::Step => lr_schedule(
                epoch * steps + step,
                self.lr_max,
                self.warmup_epochs * steps,
                self.total_epochs * steps,
            ),
        }
    }
}

/// Preprocessed images held in memory, in sample order.
#[derive(Clone, Debug)]
pub struct TensorDataset<T: Real> {
    pub images: Vec<Tensor<T>>,
    pub labels: Vec<Label>,
}

impl<T: Real> TensorDataset<T> {
    pub fn new(images: Vec<Tensor<T>>, labels: Vec<Label>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Dataset(format!("{} images but {} labels", images.len(), labels.len())));
        }
        Ok(Self { images, labels })
    }

    /// Loads and preprocesses `samples` in parallel; order is preserved.
    pub fn load(samples: &[&Sample], band: usize, cfg: &PreprocessConfig) -> Result<Self> {
        let registry = RasterRegistry::default();
        let images = samples
            .par_iter()
            .map(|s| preprocess_tile(&registry.load(&s.path, band)?, cfg))
            .collect::<Result<Vec<_>>>()?;
        Self::new(images, samples.iter().map(|s| s.label).collect())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let images: Vec<Tensor<T>> = idx.iter().map(|&i| self.images[i].clone()).collect();
        Ok((Tensor::stack(&images)?, idx.iter().map(|&i| self.labels[i] as usize).collect()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Mean pre-clip global gradient norm.
    pub grad_norm: f64,
    pub batch_losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
    pub predictions: Vec<usize>,
}

/// Everything that changes during training.
#[derive(Clone, Debug)]
pub struct TrainState<T: Real> {
    pub store: ParamStore<T>,
    pub optimizer: AdamW<T>,
    pub rng: ChaCha8Rng,
    /// Number of completed epochs.
    pub epoch: usize,
    /// Best validation macro-F1 so far and the epoch that achieved it.
    pub best: Option<(usize, f64)>,
}

impl<T: Real> TrainState<T> {
    /// Fresh parameters from `seed`; the training stream is separate from
    /// the initialisation stream.
    pub fn init(model: &HybridModel, cfg: &TrainConfig, seed: u64) -> Result<Self> {
        let store = model.init_store(&mut ChaCha8Rng::seed_from_u64(seed))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Ok(Self {
            optimizer: AdamW::new(cfg.adamw(), &store),
            store,
            rng,
            epoch: 0,
            best: None,
        })
    }
}

/// Runs one epoch of weighted-sampled minibatches and advances `state.epoch`.
pub fn train_epoch<T: Real>(
    model: &HybridModel,
    state: &mut TrainState<T>,
    data: &TensorDataset<T>,
    sampler: &WeightedSampler,
    augmenter: &Augmenter,
    cfg: &TrainConfig,
) -> Result<EpochLog> {
    let epoch = state.epoch;
    let steps = cfg.steps_for(data.len());
    let mut losses = Vec::with_capacity(steps);
    let mut norms = 0.0;
    let epoch_lr = cfg.lr_at(epoch, 0, steps)?;
    for step in 0..steps {
        let lr = cfg.lr_at(epoch, step, steps)?;
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| sampler.draw(&mut state.rng)).collect();
        let images: Vec<Tensor<T>> = idx.iter().map(|&i| augmenter.apply(&data.images[i], &mut state.rng)).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i] as usize).collect();
        let mut g = Graph::new(true, state.rng.random());
        let x = g.input(Tensor::stack(&images)?);
        let logits = model.forward(&mut g, &state.store, x)?;
        let loss = g.softmax_cross_entropy(logits, &labels)?;
        let value = g.value(loss).item()?.as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("training loss at epoch {epoch}, batch {step}")));
        }
        state.store.zero_grad();
        g.backward_into(loss, &mut state.store)?;
        state.store.apply_buffer_updates(g.take_buffer_updates())?;
        norms += match cfg.grad_clip {
            Some(c) => clip_grad_norm(&mut state.store, c),
            None => grad_norm(&state.store),
        };
        state.optimizer.step(&mut state.store, lr)?;
        losses.push(value);
    }
    state.epoch += 1;
    Ok(EpochLog {
        epoch,
        lr: epoch_lr,
        train_loss: losses.iter().sum::<f64>() / steps as f64,
        grad_norm: norms / steps as f64,
        batch_losses: losses,
    })
}

/// Eval-mode logits for every item, in order.
pub fn predict_logits<T: Real>(model: &HybridModel, store: &ParamStore<T>, images: &[Tensor<T>], batch: usize) -> Result<Tensor<T>> {
    let mut rows = Vec::with_capacity(images.len() * 2);
    let mut classes = 2;
    for chunk in images.chunks(batch.max(1)) {
        let mut g = Graph::inference();
        let x = g.input(Tensor::stack(chunk)?);
        let logits = model.forward(&mut g, store, x)?;
        classes = g.shape(logits)[1];
        rows.extend_from_slice(g.value(logits).data());
    }
    Tensor::new(vec![images.len(), classes], rows)
}

/// Argmax predictions, confusion matrix and per-class metrics over a split.
pub fn evaluate<T: Real>(model: &HybridModel, store: &ParamStore<T>, data: &TensorDataset<T>, batch: usize) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Dataset("cannot evaluate an empty split".into()));
    }
    let logits = predict_logits(model, store, &data.images, batch)?;
    if !logits.is_finite() {
        return Err(Error::NonFinite("evaluation logits".into()));
    }
    let predictions = argmax_rows(&logits);
    let confusion = ConfusionMatrix::from_predictions(&data.labels, &predictions);
    Ok(Evaluation {
        metrics: metrics(&confusion)?,
        confusion,
        predictions,
    })
}

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,val_acc,val_f1_flood,val_f1_nonflood";

pub fn metrics_row(log: &EpochLog, val: &Metrics) -> String {
    format!(
        "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
        log.epoch, log.lr, log.train_loss, val.accuracy, val.flooded.f1, val.non_flooded.f1
    )
}

/// Append-only per-epoch CSV.
#[derive(Clone, Debug)]
pub struct MetricsLog {
    path: PathBuf,
}

impl MetricsLog {
    /// Starts a fresh file with just the header.
    pub fn create(path: &Path) -> Result<Self> {
        fs::write(path, format!("{METRICS_HEADER}\n")).map_err(|e| Error::io(path, e))?;
        Ok(Self { path: path.to_path_buf() })
    }

    /// Keeps the header and rows for epochs before `epoch`, dropping the rest
    /// (rows written after the checkpoint being resumed from).
    pub fn resume(path: &Path, epoch: usize) -> Result<Self> {
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Self::create(path),
            Err(e) => return Err(Error::io(path, e)),
        };
        let mut kept = format!("{METRICS_HEADER}\n");
        for line in text.lines().skip(1) {
            let e: usize = line
                .split(',')
                .next()
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| Error::Format {
                    path: path.to_path_buf(),
                    msg: format!("bad metrics row {line:?}"),
                })?;
            if e < epoch {
                kept.push_str(line);
                kept.push('\n');
            }
        }
        fs::write(path, kept).map_err(|e| Error::io(path, e))?;
        Ok(Self { path: path.to_path_buf() })
    }

    pub fn append(&self, row: &str) -> Result<()> {
        let mut f = fs::OpenOptions::new().append(true).open(&self.path).map_err(|e| Error::io(&self.path, e))?;
        writeln!(f, "{row}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}
