use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::tempdir;

use super::*;
use crate::data::{AugmentConfig, Augmenter, WeightedSampler};
use crate::error::Error;
use crate::model::{HybridModel, ModelConfig};
use crate::numerics::Tensor;

fn small_data(n: usize, seed: u64) -> TensorDataset<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = (0..n)
        .map(|i| {
            let shift = if i % 2 == 0 { 0.5 } else { -0.5 };
            Tensor::from_fn(vec![3, 56, 56], |_| shift + rng.random_range(-1.0f32..1.0))
        })
        .collect();
    TensorDataset::new(images, (0..n).map(|i| (i % 2) as u8).collect()).unwrap()
}

fn cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        steps_per_epoch: Some(2),
        total_epochs: 8,
        ..TrainConfig::default()
    }
}

fn run(epochs: usize, seed: u64) -> Vec<f64> {
    let model = HybridModel::new(ModelConfig::toy()).unwrap();
    let data = small_data(8, 1);
    let sampler = WeightedSampler::new(&data.labels, 0).unwrap();
    let aug = Augmenter::new(AugmentConfig::default());
    let mut st = TrainState::init(&model, &cfg(), seed).unwrap();
    (0..epochs)
        .flat_map(|_| train_epoch(&model, &mut st, &data, &sampler, &aug, &cfg()).unwrap().batch_losses)
        .collect()
}

#[test]
fn first_batch_loss_is_near_ln2() {
    let losses = run(1, 3);
    assert!((losses[0] - 2f64.ln()).abs() <= 0.1, "{}", losses[0]);
}

#[test]
fn same_seed_same_losses() {
    let a = run(2, 5);
    assert_eq!(a, run(2, 5));
    assert_ne!(a, run(2, 6));
}

#[test]
fn step_schedule_agrees_with_epoch_schedule_at_boundaries() {
    let mut c = cfg();
    c.total_epochs = 20;
    let per_epoch: Vec<f64> = (0..20).map(|e| c.lr_at(e, 0, 4).unwrap()).collect();
    c.schedule = ScheduleUnit::Step;
    for e in 5..20 {
        assert!((c.lr_at(e, 0, 4).unwrap() - per_epoch[e]).abs() < 1e-15);
    }
    c.schedule = ScheduleUnit::Epoch;
    assert!(matches!(c.lr_at(20, 0, 4), Err(Error::Contract(_))));
}

#[test]
fn config_validation_names_fields() {
    let bad = TrainConfig { warmup_epochs: 50, ..TrainConfig::default() };
    assert!(bad.validate().unwrap_err().to_string().contains("train.warmup_epochs"));
    let bad = TrainConfig { lr_max: 0.0, ..TrainConfig::default() };
    assert!(bad.validate().unwrap_err().to_string().contains("train.lr_max"));
    TrainConfig::default().validate().unwrap();
}

#[test]
fn evaluation_is_deterministic_and_never_augments() {
    let model = HybridModel::new(ModelConfig::toy()).unwrap();
    let st = TrainState::<f32>::init(&model, &cfg(), 2).unwrap();
    let data = small_data(6, 2);
    let a = evaluate(&model, &st.store, &data, 4).unwrap();
    let b = evaluate(&model, &st.store, &data, 6).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.confusion.total(), 6);
    let empty = TensorDataset::<f32>::new(vec![], vec![]).unwrap();
    assert!(matches!(evaluate(&model, &st.store, &empty, 4), Err(Error::Dataset(_))));
}

#[test]
fn metrics_log_formats_and_resumes() {
    let dir = tempdir().unwrap();
    let p = dir.path().join("metrics.csv");
    let log = MetricsLog::create(&p).unwrap();
    let m = metrics(&ConfusionMatrix { tp: 3, tn: 4, fp: 1, fn_: 2 }).unwrap();
    for e in 0..4 {
        let row = metrics_row(
            &EpochLog {
                epoch: e,
                lr: 1e-4,
                train_loss: 0.5,
                grad_norm: 1.0,
                batch_losses: vec![],
            },
            &m,
        );
        log.append(&row).unwrap();
    }
    let text = std::fs::read_to_string(&p).unwrap();
    assert_eq!(text.lines().next().unwrap(), METRICS_HEADER);
    assert_eq!(text.lines().nth(1).unwrap(), "0,0.000100,0.500000,0.700000,0.666667,0.727273");
    MetricsLog::resume(&p, 2).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().last().unwrap().starts_with("1,"));
}
