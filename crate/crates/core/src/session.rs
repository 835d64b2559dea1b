//! End-to-end runs: scan, split, train with checkpoints, evaluate, predict.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{
    preprocess_tile, scan_dataset, split_dataset, Augmenter, DatasetManifest, RasterRegistry, Sample, Split,
    WeightedSampler, CLASS_NAMES,
};
use crate::error::{Error, Result};
use crate::model::HybridModel;
use crate::numerics::Real;
use crate::train::{
    evaluate, metrics_row, predict_logits, train_epoch, EpochLog, Evaluation, Metrics, MetricsLog, TensorDataset,
    TrainState,
};

pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const LAST_CKPT: &str = "last.ckpt";
pub const BEST_CKPT: &str = "best.ckpt";

/// Scanned, filtered and split dataset for a config.
pub fn prepare_manifest(cfg: &RunConfig) -> Result<DatasetManifest> {
    cfg.validate_paths()?;
    let mut manifest = scan_dataset(&cfg.data.root, cfg.data.band, &cfg.data.quality())?;
    split_dataset(&mut manifest, &cfg.data.split, cfg.seed)?;
    Ok(manifest)
}

pub fn load_split<T: Real>(cfg: &RunConfig, manifest: &DatasetManifest, split: Split) -> Result<TensorDataset<T>> {
    let samples: Vec<&Sample> = manifest.split(split).collect();
    if samples.is_empty() {
        return Err(Error::Dataset(format!("the {} split is empty", split.as_str())));
    }
    TensorDataset::load(&samples, cfg.data.band, &cfg.data.preprocess)
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub resume: Option<PathBuf>,
    /// Stop after this many epochs in this invocation (the schedule still
    /// spans `total_epochs`).
    pub max_epochs: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub logs: Vec<EpochLog>,
    pub last_val: Option<Metrics>,
    pub epochs_done: usize,
    pub circuit_evaluations: u64,
    pub num_params: usize,
    pub metrics_csv: PathBuf,
}

/// Trains per `cfg`, writing `metrics.csv`, `manifest.jsonl`, `last.ckpt`
/// and `best.ckpt` (highest validation macro-F1) into `cfg.output.dir`.
pub fn run_training<T: Real>(cfg: &RunConfig, opts: &RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    let out = &cfg.output.dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let model = HybridModel::new(cfg.model.clone())?;
    let mut state = match &opts.resume {
        Some(path) => {
            let (stored, state) = checkpoint::load::<T>(path)?;
            checkpoint::ensure_compatible(&stored, cfg)?;
            checkpoint::ensure_matches_model(&model, &state.store)?;
            if stored.seed != cfg.seed {
                return Err(Error::Checkpoint(format!(
                    "checkpoint was trained with seed {}, config has {}",
                    stored.seed, cfg.seed
                )));
            }
            state
        }
        None => TrainState::init(&model, &cfg.train, cfg.seed)?,
    };

    let manifest = prepare_manifest(cfg)?;
    manifest.write_jsonl(&out.join(MANIFEST_FILE))?;
    let train = load_split::<T>(cfg, &manifest, Split::Train)?;
    let val = load_split::<T>(cfg, &manifest, Split::Val)?;
    info!(
        "{} mode, {} parameters, {} train / {} val tiles",
        model.mode(),
        model.num_params(),
        train.len(),
        val.len()
    );
    let sampler = WeightedSampler::new(&train.labels, cfg.seed)?;
    let augmenter = Augmenter::new(cfg.data.augment.clone());

    let csv_path = out.join(METRICS_FILE);
    let csv = match opts.resume {
        Some(_) => MetricsLog::resume(&csv_path, state.epoch)?,
        None => MetricsLog::create(&csv_path)?,
    };
    let end = match opts.max_epochs {
        Some(n) => (state.epoch + n).min(cfg.train.total_epochs),
        None => cfg.train.total_epochs,
    };
    let mut logs = Vec::new();
    let mut last_val = None;
    while state.epoch < end {
        let log = train_epoch(&model, &mut state, &train, &sampler, &augmenter, &cfg.train)?;
        let eval = evaluate(&model, &state.store, &val, cfg.train.eval_batch_size)?;
        csv.append(&metrics_row(&log, &eval.metrics))?;
        info!(
            "epoch {} lr {:.3e} loss {:.4} val acc {:.4} macro-F1 {:.4}",
            log.epoch,
            log.lr,
            log.train_loss,
            eval.metrics.accuracy,
            eval.metrics.macro_f1()
        );
        if state.best.is_none_or(|(_, f)| eval.metrics.macro_f1() > f) {
            state.best = Some((log.epoch, eval.metrics.macro_f1()));
            checkpoint::save(&out.join(BEST_CKPT), cfg, &state)?;
        }
        if state.epoch % cfg.output.checkpoint_every == 0 || state.epoch == end {
            checkpoint::save(&out.join(LAST_CKPT), cfg, &state)?;
        }
        last_val = Some(eval.metrics);
        logs.push(log);
    }
    Ok(RunSummary {
        logs,
        last_val,
        epochs_done: state.epoch,
        circuit_evaluations: model.circuit_evaluations(),
        num_params: model.num_params(),
        metrics_csv: csv_path,
    })
}

/// Evaluation of a checkpoint on one split of its own dataset.
pub fn evaluate_checkpoint<T: Real>(ckpt: &Path, split: Split, data_root: Option<&Path>) -> Result<(RunConfig, Evaluation)> {
    let (mut cfg, state) = checkpoint::load::<T>(ckpt)?;
    if let Some(root) = data_root {
        cfg.data.root = root.to_path_buf();
    }
    let model = HybridModel::new(cfg.model.clone())?;
    checkpoint::ensure_matches_model(&model, &state.store)?;
    let manifest = prepare_manifest(&cfg)?;
    let data = load_split::<T>(&cfg, &manifest, split)?;
    let eval = evaluate(&model, &state.store, &data, cfg.train.eval_batch_size)?;
    Ok((cfg, eval))
}

/// `[Non-Flooded, Flooded]` probabilities for one raster tile.
pub fn predict_tile<T: Real>(ckpt: &Path, tile: &Path) -> Result<[f64; 2]> {
    let (cfg, state) = checkpoint::load::<T>(ckpt)?;
    let model = HybridModel::new(cfg.model.clone())?;
    checkpoint::ensure_matches_model(&model, &state.store)?;
    let raster = RasterRegistry::default().load(tile, cfg.data.band)?;
    let image = preprocess_tile::<T>(&raster, &cfg.data.preprocess)?;
    let logits = predict_logits(&model, &state.store, &[image], 1)?.to_f64_vec();
    let max = logits[0].max(logits[1]);
    let e = [(logits[0] - max).exp(), (logits[1] - max).exp()];
    let z = e[0] + e[1];
    Ok([e[0] / z, e[1] / z])
}

/// Table-style report: accuracy, per-class metrics and the confusion matrix.
pub fn format_report(eval: &Evaluation) -> String {
    let m = &eval.metrics;
    let c = &eval.confusion;
    let mut s = format!("accuracy {:.4}\n", m.accuracy);
    s += &format!("{:<12} {:>9} {:>9} {:>9}\n", "class", "precision", "recall", "f1");
    for (name, cm) in [(CLASS_NAMES[1], &m.flooded), (CLASS_NAMES[0], &m.non_flooded)] {
        let flag = if cm.precision_undefined || cm.recall_undefined { "  (undefined ratio reported as 0)" } else { "" };
        s += &format!("{name:<12} {:>9.4} {:>9.4} {:>9.4}{flag}\n", cm.precision, cm.recall, cm.f1);
    }
    s += "confusion (rows = truth, cols = predicted Flooded, Non-Flooded)\n";
    s += &format!("{:<12} {:>9} {:>9}\n", CLASS_NAMES[1], c.tp, c.fn_);
    s += &format!("{:<12} {:>9} {:>9}\n", CLASS_NAMES[0], c.fp, c.tn);
    s
}

/// Confusion matrix as CSV, rows = truth.
pub fn confusion_csv(eval: &Evaluation) -> String {
    let c = &eval.confusion;
    format!(
        "truth,pred_flooded,pred_non_flooded\n{},{},{}\n{},{},{}\n",
        CLASS_NAMES[1], c.tp, c.fn_, CLASS_NAMES[0], c.fp, c.tn
    )
}
