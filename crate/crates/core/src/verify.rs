//! Finite-difference and oracle suites behind `qviton gradcheck`.
//!
//! Every check reports a named error figure and the tolerance it must meet.

use std::f64::consts::PI;
use std::sync::atomic::AtomicU64;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{HybridModel, ModelConfig};
use crate::numerics::gradcheck::{check_params, check_params_with, GradCheck, Stencil, DEFAULT_STEP};
use crate::numerics::{BatchNormOptions, Graph, ParamStore, Tensor, Var};
use crate::quantum::{parameter_shift_grad, reference, CircuitLayout, CircuitSpec, Entangler};
use crate::quanv::{QuanvBranch, QuanvConfig, Readout};
use crate::vit::{EncoderBlock, MultiHeadAttention, ViTConfig};

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Gradchecks one op: every named input is a parameter and the loss is
/// `sum(r * op(inputs))` for a fixed random `r`.
fn op_check(
    label: &str,
    inputs: &[(&str, &[usize])],
    rng: &mut ChaCha8Rng,
    op: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Result<Vec<GradCheck>> {
    op_check_mode(label, true, inputs, rng, op)
}

fn op_check_mode(
    label: &str,
    train: bool,
    inputs: &[(&str, &[usize])],
    rng: &mut ChaCha8Rng,
    op: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Result<Vec<GradCheck>> {
    let mut store = ParamStore::new();
    for (name, shape) in inputs {
        store.register(*name, random(shape, rng))?;
    }
    let names: Vec<String> = inputs.iter().map(|(n, _)| n.to_string()).collect();
    let forward = |s: &ParamStore<f64>, g: &mut Graph<f64>| -> Result<Var> {
        let vars = names.iter().map(|n| g.param(s, n)).collect::<Result<Vec<_>>>()?;
        op(g, &vars)
    };
    let out_shape = {
        let mut g = Graph::new(train, 17);
        let out = forward(&store, &mut g)?;
        g.shape(out).to_vec()
    };
    let weights = random(&out_shape, rng);
    let mut checks = check_params(&store, &names, 0, DEFAULT_STEP, rng, |s| {
        let mut g = Graph::new(train, 17);
        let out = forward(s, &mut g)?;
        let loss = if out_shape.is_empty() {
            out
        } else {
            let w = g.input(weights.clone());
            let prod = g.mul(out, w)?;
            g.sum(prod)
        };
        Ok((g, loss))
    })?;
    for c in &mut checks {
        c.name = format!("{label}/{}", c.name);
    }
    Ok(checks)
}

/// Gradchecks of every differentiable tensor op at double precision.
pub fn numerics_op_checks(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all = Vec::new();
    all.extend(op_check("matmul", &[("a", &[3, 4]), ("b", &[4, 5])], &mut rng, |g, v| g.matmul(v[0], v[1]))?);
    all.extend(op_check("add", &[("a", &[2, 3]), ("b", &[2, 3])], &mut rng, |g, v| g.add(v[0], v[1]))?);
    all.extend(op_check("sub", &[("a", &[2, 3]), ("b", &[2, 3])], &mut rng, |g, v| g.sub(v[0], v[1]))?);
    all.extend(op_check("mul", &[("a", &[2, 3]), ("b", &[2, 3])], &mut rng, |g, v| g.mul(v[0], v[1]))?);
    all.extend(op_check("scale", &[("x", &[4])], &mut rng, |g, v| Ok(g.scale(v[0], -1.7)))?);
    all.extend(op_check("add_bias", &[("x", &[2, 3, 4]), ("b", &[3, 4])], &mut rng, |g, v| g.add_bias(v[0], v[1]))?);
    all.extend(op_check(
        "conv2d",
        &[("x", &[2, 3, 7, 6]), ("w", &[4, 3, 3, 3]), ("b", &[4])],
        &mut rng,
        |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1),
    )?);
    all.extend(op_check(
        "batch_norm_train",
        &[("x", &[3, 2, 3, 3]), ("gamma", &[2]), ("beta", &[2])],
        &mut rng,
        |g, v| {
            let mut s = ParamStore::new();
            s.register_buffer("rm", Tensor::zeros(vec![2]))?;
            s.register_buffer("rv", Tensor::full(vec![2], 1.0))?;
            g.batch_norm2d(v[0], v[1], v[2], &s, "rm", "rv", Default::default())
        },
    )?);
    all.extend(op_check_mode(
        "batch_norm_eval",
        false,
        &[("x", &[2, 2, 3, 3]), ("gamma", &[2]), ("beta", &[2])],
        &mut rng,
        |g, v| {
            let mut s = ParamStore::new();
            s.register_buffer("rm", Tensor::new(vec![2], vec![0.3, -0.2])?)?;
            s.register_buffer("rv", Tensor::new(vec![2], vec![0.5, 2.0])?)?;
            g.batch_norm2d(v[0], v[1], v[2], &s, "rm", "rv", BatchNormOptions::default())
        },
    )?);
    all.extend(op_check(
        "layer_norm",
        &[("x", &[3, 6]), ("gamma", &[6]), ("beta", &[6])],
        &mut rng,
        |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
    )?);
    all.extend(op_check("gelu", &[("x", &[10])], &mut rng, |g, v| Ok(g.gelu(v[0])))?);
    all.extend(op_check("sigmoid", &[("x", &[10])], &mut rng, |g, v| Ok(g.sigmoid(v[0])))?);
    all.extend(op_check("tanh", &[("x", &[10])], &mut rng, |g, v| Ok(g.tanh(v[0])))?);
    all.extend(op_check("dropout", &[("x", &[12])], &mut rng, |g, v| g.dropout(v[0], 0.3))?);
    all.extend(op_check("adaptive_avg_pool2d", &[("x", &[2, 7, 5])], &mut rng, |g, v| {
        g.adaptive_avg_pool2d(v[0], 3, 2)
    })?);
    all.extend(op_check(
        "attention",
        &[("q", &[2, 5, 4]), ("k", &[2, 5, 4]), ("v", &[2, 5, 4])],
        &mut rng,
        |g, v| g.attention(v[0], v[1], v[2], 2),
    )?);
    all.extend(op_check("concat", &[("a", &[2, 3]), ("b", &[2, 2])], &mut rng, |g, v| g.concat(&[v[0], v[1]], 1))?);
    all.extend(op_check("gather", &[("x", &[6])], &mut rng, |g, v| {
        g.gather(v[0], Arc::new(vec![5, 0, 0, 3]), &[2, 2])
    })?);
    all.extend(op_check("mean", &[("x", &[2, 3])], &mut rng, |g, v| Ok(g.mean(v[0])))?);
    all.extend(op_check("softmax_cross_entropy", &[("logits", &[4, 3])], &mut rng, |g, v| {
        g.softmax_cross_entropy(v[0], &[0, 2, 1, 2])
    })?);
    Ok(all)
}

/// Random 4-qubit ring circuit with 0 to 3 layers, measured on qubit 0.
pub fn random_circuit(rng: &mut impl Rng) -> Result<(CircuitSpec, Vec<f64>)> {
    let layout = CircuitLayout {
        n_layers: rng.random_range(0..=3),
        ..CircuitLayout::default()
    };
    let theta = (0..layout.n_theta()).map(|_| rng.random_range(-PI..PI)).collect();
    let inputs = (0..layout.n_qubits).map(|_| rng.random_range(0.0..PI)).collect();
    Ok((CircuitSpec::new(layout, theta)?, inputs))
}

/// Largest amplitude or expectation deviation between the statevector
/// simulator and the dense-matrix oracle over `count` random circuits.
pub fn simulator_oracle_deviation(count: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let (spec, inputs) = random_circuit(&mut rng)?;
        let fast = spec.run(&inputs)?;
        let dense = reference::amplitudes(&spec, &inputs)?;
        for (a, b) in fast.amplitudes().iter().zip(&dense) {
            worst = worst.max((a - b).norm());
        }
        let e = spec.expectation(&inputs)? - reference::expectation(&spec, &inputs)?;
        worst = worst.max(e.abs());
    }
    Ok(worst)
}

/// Largest absolute gap between parameter-shift gradients and central
/// differences with step `h` over `count` random circuits, for both input
/// and trainable angles.
pub fn shift_rule_deviation(count: usize, seed: u64, h: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let (spec, inputs) = random_circuit(&mut rng)?;
        let shift = parameter_shift_grad(&spec, &inputs)?;
        let mut x = inputs.clone();
        for (i, d) in shift.d_inputs.iter().enumerate() {
            x[i] = inputs[i] + h;
            let up = spec.expectation(&x)?;
            x[i] = inputs[i] - h;
            let down = spec.expectation(&x)?;
            x[i] = inputs[i];
            worst = worst.max((d - (up - down) / (2.0 * h)).abs());
        }
        let mut moved = spec.clone();
        for (i, d) in shift.d_theta.iter().enumerate() {
            moved.theta[i] = spec.theta[i] + h;
            let up = moved.expectation(&inputs)?;
            moved.theta[i] = spec.theta[i] - h;
            let down = moved.expectation(&inputs)?;
            moved.theta[i] = spec.theta[i];
            worst = worst.max((d - (up - down) / (2.0 * h)).abs());
        }
    }
    Ok(worst)
}

/// One qubit, one layer, zero input: `<Z> = cos(theta)` and the shift rule
/// must give `-sin(theta)`. Returns the largest deviation over a sweep.
pub fn single_qubit_deviation() -> Result<f64> {
    let layout = CircuitLayout {
        n_qubits: 1,
        n_layers: 1,
        entangler: Entangler::Ring,
        observable_qubit: 0,
    };
    let mut worst: f64 = 0.0;
    for k in 0..=32 {
        let theta = -PI + 2.0 * PI * k as f64 / 32.0;
        let spec = CircuitSpec::new(layout.clone(), vec![theta])?;
        let g = parameter_shift_grad(&spec, &[0.0])?;
        worst = worst.max((g.value - theta.cos()).abs());
        worst = worst.max((g.d_theta[0] + theta.sin()).abs());
    }
    Ok(worst)
}

/// Plain-loop multi-head self-attention over `[B,T,D]` using the
/// `query/key/value/out` projections stored under `prefix`.
pub fn naive_mhsa(x: &Tensor<f64>, s: &ParamStore<f64>, prefix: &str, heads: usize) -> Result<Vec<f64>> {
    let sh = x.shape();
    let (b, t, d) = (sh[0], sh[1], sh[2]);
    let dh = d / heads;
    let weights = |name: &str| -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((
            s.value(&format!("{prefix}.{name}.weight"))?.to_f64_vec(),
            s.value(&format!("{prefix}.{name}.bias"))?.to_f64_vec(),
        ))
    };
    let proj = [weights("query")?, weights("key")?, weights("value")?, weights("out")?];
    let lin = |(w, bias): &(Vec<f64>, Vec<f64>), row: &[f64]| -> Vec<f64> {
        (0..d).map(|o| bias[o] + (0..d).map(|i| row[i] * w[i * d + o]).sum::<f64>()).collect()
    };
    let mut out = Vec::with_capacity(b * t * d);
    for bi in 0..b {
        let rows: Vec<&[f64]> = (0..t).map(|i| &x.data()[(bi * t + i) * d..(bi * t + i + 1) * d]).collect();
        let q: Vec<Vec<f64>> = rows.iter().map(|r| lin(&proj[0], r)).collect();
        let k: Vec<Vec<f64>> = rows.iter().map(|r| lin(&proj[1], r)).collect();
        let v: Vec<Vec<f64>> = rows.iter().map(|r| lin(&proj[2], r)).collect();
        for i in 0..t {
            let mut concat = vec![0.0; d];
            for h in 0..heads {
                let r = h * dh..(h + 1) * dh;
                let scores: Vec<f64> = (0..t)
                    .map(|j| q[i][r.clone()].iter().zip(&k[j][r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..t {
                    for c in r.clone() {
                        concat[c] += e[j] / z * v[j][c];
                    }
                }
            }
            out.extend(lin(&proj[3], &concat));
        }
    }
    Ok(out)
}

fn weighted_sum(g: &mut Graph<f64>, y: Var, r: &Tensor<f64>) -> Result<Var> {
    let rv = g.input(r.clone());
    let p = g.mul(y, rv)?;
    Ok(g.sum(p))
}

fn all_names(s: &ParamStore<f64>) -> Vec<String> {
    s.names().map(String::from).collect()
}

/// Gradcheck of the quanvolutional branch, circuit included.
pub fn quanv_checks(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = QuanvBranch::new("quanv", QuanvConfig::default(), Arc::new(AtomicU64::new(0)))?;
    let mut s = ParamStore::new();
    q.init(&mut s, &mut rng)?;
    s.set(q.theta_name(), Tensor::from_fn(vec![8], |_| rng.random_range(-2.0..2.0)))?;
    let x = Tensor::from_fn(vec![2, 3, 20, 20], |_| rng.random_range(-1.0..1.0));
    let r = random(&[2, QuanvConfig::default().feature_dim], &mut rng);
    let mut checks = check_params(&s, &all_names(&s), 6, DEFAULT_STEP, &mut rng, |s| {
        let mut g = Graph::new(false, 0);
        let xv = g.input(x.clone());
        let f = q.forward(&mut g, s, xv)?;
        let loss = weighted_sum(&mut g, f, &r)?;
        Ok((g, loss))
    })?;
    // The constant readout must leave a purely classical branch.
    let c = q.clone().with_readout(Readout::Constant(0.5));
    checks.extend(check_params(&s, &all_names(&s), 4, DEFAULT_STEP, &mut rng, |s| {
        let mut g = Graph::new(false, 0);
        let xv = g.input(x.clone());
        let f = c.forward(&mut g, s, xv)?;
        let loss = weighted_sum(&mut g, f, &r)?;
        Ok((g, loss))
    })?);
    for ch in checks.iter_mut().skip(s.len()) {
        ch.name = format!("constant_readout/{}", ch.name);
    }
    Ok(checks)
}

/// Multi-head attention against [`naive_mhsa`] (largest absolute deviation)
/// and a full encoder block gradcheck.
pub fn vit_checks(seed: u64) -> Result<(f64, Vec<GradCheck>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for heads in [1, 2, 4] {
        let mha = MultiHeadAttention::new("attn", 8, heads)?;
        let mut s = ParamStore::new();
        mha.init(&mut s, &mut rng)?;
        s.randomize(&mut rng, 0.5);
        let x = random(&[2, 5, 8], &mut rng);
        let mut g = Graph::inference();
        let xv = g.input(x.clone());
        let y = mha.forward(&mut g, &s, xv)?;
        let naive = naive_mhsa(&x, &s, "attn", heads)?;
        for (a, b) in g.value(y).data().iter().zip(&naive) {
            worst = worst.max((a - b).abs());
        }
    }
    let cfg = ViTConfig {
        d_model: 8,
        n_heads: 2,
        d_mlp: 16,
        ..ViTConfig::toy()
    };
    let blk = EncoderBlock::new("block", &cfg)?;
    let mut s = ParamStore::new();
    blk.init(&mut s, &mut rng)?;
    s.randomize(&mut rng, 0.5);
    let x = random(&[2, 5, 8], &mut rng);
    let r = random(&[2, 5, 8], &mut rng);
    let checks = check_params_with(&s, &all_names(&s), 0, MODEL_STENCIL, &mut rng, |s| {
        let mut g = Graph::new(false, 0);
        let xv = g.input(x.clone());
        let y = blk.forward(&mut g, s, xv)?;
        let loss = weighted_sum(&mut g, y, &r)?;
        Ok((g, loss))
    })?;
    Ok((worst, checks))
}

/// Gradcheck of the whole toy hybrid model through the cross-entropy loss,
/// in eval mode (dropout off, batch norm on running statistics). Parameters
/// are scrambled to N(0, std^2) away from the structured initialization.
///
/// Stem gradients reach the loss through the circuit and two poolings and
/// end up around 1e-6, where plain central differences at h=1e-5 are
/// roundoff-limited; the five-point stencil at h=1e-3 is not.
pub fn model_checks(seed: u64, per_param: usize, std: f64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = HybridModel::new(ModelConfig::toy())?;
    let mut s: ParamStore<f64> = model.init_store(&mut rng)?;
    s.randomize(&mut rng, std);
    let side = model.vit().config.image_size;
    let x = Tensor::from_fn(vec![2, 3, side, side], |_| rng.random_range(-1.0..1.0));
    let labels = [0usize, 1];
    check_params_with(&s, &all_names(&s), per_param, MODEL_STENCIL, &mut rng, |s| {
        let mut g = Graph::new(false, 0);
        let xv = g.input(x.clone());
        let logits = model.forward(&mut g, s, xv)?;
        let loss = g.softmax_cross_entropy(logits, &labels)?;
        Ok((g, loss))
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Numerics,
    Quantum,
    Quanv,
    Vit,
    Model,
    All,
}

impl Scope {
    pub const NAMES: [&'static str; 6] = ["numerics", "quantum", "quanv", "vit", "model", "all"];

    fn covers(self, other: Scope) -> bool {
        self == Scope::All || self == other
    }
}

impl std::str::FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "numerics" => Scope::Numerics,
            "quantum" => Scope::Quantum,
            "quanv" => Scope::Quanv,
            "vit" => Scope::Vit,
            "model" => Scope::Model,
            "all" => Scope::All,
            other => {
                return Err(Error::Config(format!(
                    "unknown gradcheck scope `{other}` (expected one of {})",
                    Scope::NAMES.join(", ")
                )))
            }
        })
    }
}

/// One reported figure and its bound.
#[derive(Clone, Debug)]
pub struct Check {
    pub scope: &'static str,
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.error.is_finite() && self.error <= self.tolerance
    }
}

pub const OP_TOL: f64 = 1e-6;
pub const GRADCHECK_TOL: f64 = 1e-5;
pub const QUANV_TOL: f64 = 1e-4;
pub const MODEL_STENCIL: Stencil = Stencil::FivePoint(1e-3);
pub const MODEL_SCRAMBLE_STD: f64 = 0.2;
pub const ORACLE_TOL: f64 = 1e-10;
pub const SHIFT_FD_TOL: f64 = 1e-5;
pub const SINGLE_QUBIT_TOL: f64 = 1e-12;

/// Absolute bound for gradients that are identically zero.
pub const ZERO_GRAD_TOL: f64 = 1e-8;

/// Attention key biases shift every score in a softmax row equally, so their
/// gradient is exactly zero and a relative error would only measure roundoff.
/// They are checked in absolute terms instead.
pub fn is_structurally_zero(name: &str) -> bool {
    name.ends_with("key.bias")
}

fn from_grad(scope: &'static str, checks: Vec<GradCheck>, tolerance: f64) -> impl Iterator<Item = Check> {
    checks.into_iter().map(move |c| {
        if is_structurally_zero(&c.name) {
            Check {
                scope,
                name: format!("{} (zero, absolute)", c.name),
                error: c.max_abs_err,
                tolerance: ZERO_GRAD_TOL,
            }
        } else {
            Check {
                scope,
                name: c.name,
                error: c.rel_err,
                tolerance,
            }
        }
    })
}

/// Runs every suite covered by `scope`.
pub fn run(scope: Scope, seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    if scope.covers(Scope::Numerics) {
        for s in 0..10 {
            let checks = numerics_op_checks(seed.wrapping_add(s))?;
            out.extend(from_grad("numerics", checks, OP_TOL).map(|mut c| {
                c.name = format!("seed{s}/{}", c.name);
                c
            }));
        }
    }
    if scope.covers(Scope::Quantum) {
        let check = |name: &str, error, tolerance| Check {
            scope: "quantum",
            name: name.to_string(),
            error,
            tolerance,
        };
        out.push(check("statevector_vs_dense", simulator_oracle_deviation(100, seed)?, ORACLE_TOL));
        out.push(check("shift_rule_vs_fd", shift_rule_deviation(50, seed, 1e-4)?, SHIFT_FD_TOL));
        out.push(check("single_qubit_cos", single_qubit_deviation()?, SINGLE_QUBIT_TOL));
    }
    if scope.covers(Scope::Quanv) {
        for c in from_grad("quanv", quanv_checks(seed)?, QUANV_TOL) {
            let tolerance = if c.name.starts_with("constant_readout/") { OP_TOL } else { QUANV_TOL };
            out.push(Check { tolerance, ..c });
        }
    }
    if scope.covers(Scope::Vit) {
        let (dev, checks) = vit_checks(seed)?;
        out.push(Check {
            scope: "vit",
            name: "mhsa_vs_naive".into(),
            error: dev,
            tolerance: ORACLE_TOL,
        });
        out.extend(from_grad("vit", checks, GRADCHECK_TOL));
    }
    if scope.covers(Scope::Model) {
        out.extend(from_grad("model", model_checks(seed, 3, MODEL_SCRAMBLE_STD)?, GRADCHECK_TOL));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantum_suite_passes() {
        let checks = run(Scope::Quantum, 0).unwrap();
        assert_eq!(checks.len(), 3);
        for c in checks {
            assert!(c.passed(), "{c:?}");
        }
    }

    #[test]
    fn oracle_comparison_detects_a_wrong_angle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (spec, inputs) = random_circuit(&mut rng).unwrap();
        let mut off = inputs.clone();
        off[2] += 1e-6;
        let fast = spec.run(&inputs).unwrap();
        let dense = reference::amplitudes(&spec, &off).unwrap();
        let dev = fast.amplitudes().iter().zip(&dense).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(dev > 1e-8, "{dev}");
    }

    #[test]
    fn vit_suite_passes() {
        for c in run(Scope::Vit, 1).unwrap() {
            assert!(c.passed(), "{c:?}");
        }
    }

    #[test]
    fn quanv_suite_passes() {
        for c in run(Scope::Quanv, 2).unwrap() {
            assert!(c.passed(), "{c:?}");
        }
    }

    #[test]
    fn model_suite_passes() {
        let checks = run(Scope::Model, 3).unwrap();
        assert!(checks.len() > 20);
        for c in checks {
            assert!(c.passed(), "{c:?}");
        }
    }

    #[test]
    fn scope_parsing() {
        for name in Scope::NAMES {
            name.parse::<Scope>().unwrap();
        }
        assert!(matches!("qubits".parse::<Scope>(), Err(Error::Config(_))));
    }
}
