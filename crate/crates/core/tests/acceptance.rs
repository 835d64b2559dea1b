//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use qviton::config::{Preset, RunConfig};
use qviton::data::{scan_dataset, synth_generate, AugmentConfig, Augmenter, Sample, SynthConfig, WeightedSampler};
use qviton::model::{HybridModel, Mode, ModelConfig};
use qviton::numerics::{Graph, ParamStore, Tensor};
use qviton::session::{run_training, RunOptions};
use qviton::train::{evaluate, f1_score, lr_schedule, train_epoch, TensorDataset, TrainConfig, TrainState};
use qviton::verify::{self, Scope};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Outcome = Result<(bool, String), Box<dyn std::error::Error>>;

fn quantum_oracle() -> Outcome {
    let t = Instant::now();
    let dev = verify::simulator_oracle_deviation(100, 1)?;
    let secs = t.elapsed().as_secs_f64();
    Ok((dev <= 1e-10 && secs < 1.0, format!("max deviation {dev:.2e} (<= 1e-10), {secs:.3} s (< 1 s)")))
}

fn parameter_shift() -> Outcome {
    let dev = verify::shift_rule_deviation(50, 2, 1e-4)?;
    let single = verify::single_qubit_deviation()?;
    Ok((
        dev <= 1e-5 && single <= 1e-12,
        format!("shift vs FD max |diff| {dev:.2e} (<= 1e-5), 1-qubit -sin(theta) {single:.2e} (<= 1e-12)"),
    ))
}

fn autodiff_gradcheck() -> Outcome {
    let t = Instant::now();
    let mut checks = verify::run(Scope::Numerics, 0)?;
    checks.extend(verify::run(Scope::Model, 0)?);
    let secs = t.elapsed().as_secs_f64();
    // Ops are held to 1e-6 inside the suite; the criterion bound is 1e-5.
    let bound = |c: &verify::Check| c.tolerance.min(1e-5);
    let failed: Vec<_> = checks.iter().filter(|c| !(c.error <= bound(c))).collect();
    let worst = checks
        .iter()
        .filter(|c| c.tolerance >= 1e-6)
        .map(|c| c.error)
        .fold(0.0, f64::max);
    let mut msg = format!(
        "{} checks (ops x10 seeds + toy hybrid), worst rel err {worst:.2e} (<= 1e-5), {secs:.1} s (< 60 s)",
        checks.len()
    );
    for c in &failed {
        msg += &format!("; {}/{} {:.2e}", c.scope, c.name, c.error);
    }
    Ok((failed.is_empty() && secs < 60.0, msg))
}

fn paper_shapes() -> Outcome {
    let cfg = ModelConfig::paper();
    let model = HybridModel::new(cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let store: ParamStore<f32> = model.init_store(&mut rng)?;
    let side = cfg.vit.image_size;
    let image = Tensor::from_fn(vec![1, 3, side, side], |i| ((i % 97) as f32 / 97.0) - 0.5);
    let mut g = Graph::inference();
    let x = g.input(image);
    let trace = model.forward_trace(&mut g, &store, x)?;
    let q = trace.quantum.ok_or("hybrid model without quantum features")?;
    let map = trace.quantum_map.ok_or("hybrid model without quantum map")?;
    let shapes = [g.shape(q).to_vec(), g.shape(trace.context).to_vec(), g.shape(trace.fused).to_vec(), g.shape(trace.logits).to_vec()];
    let map_shape = g.shape(map).to_vec();
    let vit_params = store.num_scalars_with_prefix("vit.");
    let rel = (vit_params as f64 - 304e6).abs() / 304e6;
    let ok = shapes == [vec![1, 64], vec![1, 1024], vec![1, 1088], vec![1, 2]]
        && map_shape == [1, 1, 4, 4]
        && rel <= 0.05
        && vit_params == cfg.vit.parameter_count();
    Ok((
        ok,
        format!(
            "quantum {:?}, vit {:?}, fused {:?}, logits {:?}, map {:?}; ViT parameters {vit_params} ({:+.2}% vs 304M)",
            shapes[0],
            shapes[1],
            shapes[2],
            shapes[3],
            map_shape,
            100.0 * (vit_params as f64 - 304e6) / 304e6
        ),
    ))
}

fn table_f1() -> Outcome {
    let rows = [(0.9418, 0.9781, 0.9596), (0.9514, 0.8765, 0.9124), (0.8561, 0.9242, 0.8888)];
    let mut ok = true;
    let mut parts = Vec::new();
    for (p, r, want) in rows {
        let got = f1_score(p, r);
        ok &= (got - want).abs() <= 5e-4;
        parts.push(format!("F1({p},{r}) = {got:.4} vs {want}"));
    }
    Ok((ok, parts.join(", ")))
}

fn synth_dataset(root: &Path, regions: usize, tiles: usize, seed: u64) -> Result<TensorDataset<f32>, Box<dyn std::error::Error>> {
    let cfg = SynthConfig {
        regions,
        tiles_per_region: tiles,
        size: 56,
        seed,
    };
    synth_generate(&cfg, root)?;
    let run = RunConfig::preset(Preset::Toy);
    let manifest = scan_dataset(root, 0, &run.data.quality())?;
    let samples: Vec<&Sample> = manifest.samples.iter().collect();
    Ok(TensorDataset::load(&samples, 0, &run.data.preprocess)?)
}

fn toy_train_config(total_epochs: usize) -> TrainConfig {
    TrainConfig {
        total_epochs,
        ..RunConfig::preset(Preset::Toy).train
    }
}

fn overfit() -> Outcome {
    let dir = tempfile::tempdir()?;
    let data = synth_dataset(dir.path(), 8, 8, 6)?;
    let cfg = toy_train_config(200);
    let model = HybridModel::new(ModelConfig::toy())?;
    let mut state = TrainState::init(&model, &cfg, 6)?;
    let sampler = WeightedSampler::new(&data.labels, 6)?;
    let augmenter = Augmenter::new(AugmentConfig::off());
    let t = Instant::now();
    let mut best = 0.0;
    for epoch in 0..cfg.total_epochs {
        train_epoch(&model, &mut state, &data, &sampler, &augmenter, &cfg)?;
        let acc = evaluate(&model, &state.store, &data, cfg.eval_batch_size)?.metrics.accuracy;
        best = f64::max(best, acc);
        if acc >= 0.95 {
            return Ok((
                true,
                format!("{} tiles, train accuracy {acc:.4} after {} epochs, {:.1} s", data.len(), epoch + 1, t.elapsed().as_secs_f64()),
            ));
        }
    }
    Ok((false, format!("best train accuracy {best:.4} in 200 epochs")))
}

fn generalization() -> Outcome {
    let dir = tempfile::tempdir()?;
    let train = synth_dataset(&dir.path().join("train"), 20, 10, 7)?;
    let held = synth_dataset(&dir.path().join("held"), 5, 10, 8)?;
    let cfg = toy_train_config(20);
    let augmenter = Augmenter::new(AugmentConfig::default());
    let mut report = vec![format!("{} train / {} held-out tiles", train.len(), held.len())];
    let mut ok = true;
    for mode in [Mode::Hybrid, Mode::Baseline] {
        let model = HybridModel::new(ModelConfig { mode, ..ModelConfig::toy() })?;
        let mut state = TrainState::init(&model, &cfg, 7)?;
        let sampler = WeightedSampler::new(&train.labels, 7)?;
        let mut losses = Vec::new();
        for _ in 0..cfg.total_epochs {
            losses.push(train_epoch(&model, &mut state, &train, &sampler, &augmenter, &cfg)?.train_loss);
        }
        let m = evaluate(&model, &state.store, &held, cfg.eval_batch_size)?.metrics;
        let finite = losses.iter().all(|l| l.is_finite());
        let fell = losses.last() < losses.first();
        match mode {
            Mode::Hybrid => ok &= m.accuracy >= 0.90 && finite,
            Mode::Baseline => ok &= finite && fell,
        }
        report.push(format!(
            "{mode}: held-out accuracy {:.4}, macro-F1 {:.4}, loss {:.4} -> {:.4}",
            m.accuracy,
            m.macro_f1(),
            losses[0],
            losses[losses.len() - 1]
        ));
    }
    Ok((ok, report.join("; ")))
}

fn sampler_balance() -> Outcome {
    let labels: Vec<u8> = (0..1000).map(|i| u8::from(i % 10 == 0)).collect();
    let mut freqs = Vec::new();
    for seed in 0..5 {
        let mut s = WeightedSampler::new(&labels, seed)?;
        let minority = (0..10_000).filter(|_| labels[s.next_index()] == 1).count();
        freqs.push(minority as f64 / 10_000.0);
    }
    let mean = freqs.iter().sum::<f64>() / freqs.len() as f64;
    Ok((
        (mean - 0.5).abs() <= 0.02 && (1.0 - mean - 0.5).abs() <= 0.02,
        format!("minority-class frequency per seed {freqs:.4?}, mean {mean:.4} (0.5 +/- 0.02)"),
    ))
}

fn schedule() -> Outcome {
    let w = 5usize;
    let expected = |e: usize, lr: f64, t: usize| {
        if e < w {
            lr * (e as f64 + 1.0) / w as f64
        } else {
            let progress = (e - w) as f64 / (t - w) as f64;
            lr / 2.0 * (1.0 + (PI * progress).cos())
        }
    };
    let mut worst: f64 = 0.0;
    let mut jump: f64 = 0.0;
    for t in [45usize, 50] {
        for lr in [1e-4, 1.0] {
            for e in [0, 1, 4, 5, (t + 5) / 2, t - 1] {
                worst = worst.max((lr_schedule(e, lr, w, t)? - expected(e, lr, t)).abs());
            }
            jump = jump.max((lr_schedule(4, lr, w, t)? - lr_schedule(5, lr, w, t)?).abs());
        }
    }
    let mid = lr_schedule(25, 1.0, w, 45)?;
    Ok((
        worst <= 1e-9 && jump <= 1e-9 && (mid - 0.5).abs() <= 1e-9,
        format!("max deviation {worst:.1e} (T in {{45, 50}}), |lr(4) - lr(5)| = {jump:.1e}, midpoint {mid}"),
    ))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir()?;
    synth_generate(
        &SynthConfig {
            regions: 8,
            tiles_per_region: 6,
            size: 56,
            seed: 9,
        },
        &dir.path().join("data"),
    )?;
    let config = |name: &str| {
        let mut cfg = RunConfig::preset(Preset::Toy);
        cfg.data.root = dir.path().join("data");
        cfg.output.dir = dir.path().join(name);
        cfg.train.total_epochs = 4;
        cfg.train.warmup_epochs = 1;
        cfg
    };
    let a = run_training::<f32>(&config("a"), &RunOptions::default())?;
    let b = run_training::<f32>(&config("b"), &RunOptions::default())?;
    let csv_a = fs::read(&a.metrics_csv)?;
    let csv_b = fs::read(&b.metrics_csv)?;

    let c = config("c");
    let first = run_training::<f32>(
        &c,
        &RunOptions {
            max_epochs: Some(2),
            ..Default::default()
        },
    )?;
    let second = run_training::<f32>(
        &c,
        &RunOptions {
            resume: Some(c.output.dir.join("last.ckpt")),
            ..Default::default()
        },
    )?;
    let unbroken: Vec<f64> = a.logs.iter().flat_map(|l| l.batch_losses.clone()).collect();
    let resumed: Vec<f64> = first.logs.iter().chain(&second.logs).flat_map(|l| l.batch_losses.clone()).collect();
    let csv_c = fs::read(&second.metrics_csv)?;
    let ok = csv_a == csv_b && unbroken == resumed && csv_c == csv_a;
    Ok((
        ok,
        format!(
            "CSVs identical: {}; resumed {} batch losses bitwise equal: {}; resumed CSV identical: {}",
            csv_a == csv_b,
            resumed.len(),
            unbroken == resumed,
            csv_c == csv_a
        ),
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("quantum oracle equivalence", quantum_oracle),
        ("parameter-shift correctness", parameter_shift),
        ("autodiff gradcheck", autodiff_gradcheck),
        ("paper-preset shape contract", paper_shapes),
        ("F1 reproduction", table_f1),
        ("overfit oracle", overfit),
        ("generalization smoke + baseline", generalization),
        ("sampler balance", sampler_balance),
        ("schedule closed form", schedule),
        ("determinism and resume", determinism),
    ];
    let filter: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let (ok, detail) = match run() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "{} {n:>2}. {name}: {detail} [{:.1} s]",
            if ok { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
