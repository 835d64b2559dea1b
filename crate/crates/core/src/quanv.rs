//! Quantum feature pathway.
//!
//! `[B,3,H,W]` -> conv7x7/s2 + BN + GELU -> conv3x3/s2 + BN + GELU
//! -> adaptive pool to `[B,64,8,8]` -> 1x1 mixer to `[B,1,8,8]`
//! -> 2x2 patches as angles `pi * sigmoid(v)` -> one circuit `<Z>` per patch
//! -> `[B,1,4,4]` -> 1x1 conv back to 64 channels -> global average -> `[B,64]`.
//!
//! The two stem stages are ordinary convolutions; the only quantum
//! computation is the per-patch circuit. Its gradient is supplied to the
//! tape by the parameter-shift rule.

use std::f64::consts::PI;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numerics::nn::{BatchNorm2d, Conv2d, Init};
use crate::numerics::{CustomOp, Graph, ParamStore, Real, Tensor, Var};
use crate::quantum::{parameter_shift_grad, CircuitLayout, CircuitSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuanvConfig {
    pub in_channels: usize,
    pub stem_channels: [usize; 2],
    pub stem_kernels: [usize; 2],
    pub stem_strides: [usize; 2],
    pub stem_paddings: [usize; 2],
    /// Side of the pooled grid fed to the mixer.
    pub grid: usize,
    /// Side of the square patch; each patch drives `patch^2` qubits.
    pub patch: usize,
    pub circuit: CircuitLayout,
    /// Channels restored after the quantum map; also the output width.
    pub feature_dim: usize,
}

impl Default for QuanvConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            stem_channels: [32, 64],
            stem_kernels: [7, 3],
            stem_strides: [2, 2],
            stem_paddings: [3, 1],
            grid: 8,
            patch: 2,
            circuit: CircuitLayout::default(),
            feature_dim: 64,
        }
    }
}

impl QuanvConfig {
    pub fn validate(&self) -> Result<()> {
        self.circuit.validate()?;
        if self.patch == 0 || !self.grid.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "quanv.grid {} must be divisible by quanv.patch {}",
                self.grid, self.patch
            )));
        }
        if self.circuit.n_qubits != self.patch * self.patch {
            return Err(Error::Config(format!(
                "quanv.circuit.n_qubits must equal patch^2 = {}",
                self.patch * self.patch
            )));
        }
        if self.stem_strides.contains(&0) || self.feature_dim == 0 || self.stem_channels.contains(&0) {
            return Err(Error::Config("quanv strides, channels and feature_dim must be positive".into()));
        }
        Ok(())
    }

    /// Side of the quantum feature map.
    pub fn map_side(&self) -> usize {
        self.grid / self.patch
    }
}

/// What produces the per-patch scalar.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Readout {
    Circuit,
    /// Constant output with zero gradient; turns the branch into a purely
    /// classical pipeline for isolating quantum-boundary gradient bugs.
    Constant(f64),
}

/// Flat indices (into one `[H,W]` plane) of each non-overlapping
/// `patch x patch` window, windows in row-major order and pixels in
/// row-major order within a window.
pub fn patch_indices(h: usize, w: usize, patch: usize) -> Result<Vec<usize>> {
    if patch == 0 || !h.is_multiple_of(patch) || !w.is_multiple_of(patch) {
        return Err(dim_err!("{h}x{w} map is not divisible into {patch}x{patch} patches"));
    }
    let mut idx = Vec::with_capacity(h * w);
    for r in 0..h / patch {
        for c in 0..w / patch {
            for i in 0..patch {
                for j in 0..patch {
                    idx.push((r * patch + i) * w + c * patch + j);
                }
            }
        }
    }
    Ok(idx)
}

/// Per-patch circuit evaluation as a tape operation.
///
/// Inputs: angles `[B,P,n_qubits]`, theta `[n_theta]`. Output: `[B,P]`.
pub struct CircuitOp {
    layout: CircuitLayout,
    readout: Readout,
    counter: Arc<AtomicU64>,
}

impl CircuitOp {
    pub fn new(layout: CircuitLayout, readout: Readout, counter: Arc<AtomicU64>) -> Self {
        Self {
            layout,
            readout,
            counter,
        }
    }

    fn spec<T: Real>(&self, theta: &Tensor<T>) -> Result<CircuitSpec> {
        CircuitSpec::new(self.layout.clone(), theta.to_f64_vec())
    }

    pub fn forward<T: Real>(&self, angles: &Tensor<T>, theta: &Tensor<T>) -> Result<Tensor<T>> {
        let s = angles.shape();
        let n = self.layout.n_qubits;
        if s.len() != 3 || s[2] != n {
            return Err(dim_err!("circuit angles must be [B,P,{n}], got {:?}", s));
        }
        let out_shape = vec![s[0], s[1]];
        if let Readout::Constant(c) = self.readout {
            return Ok(Tensor::full(out_shape, T::of(c)));
        }
        let spec = self.spec(theta)?;
        let values = angles
            .data()
            .par_chunks(n)
            .map(|a| {
                let inputs: Vec<f64> = a.iter().map(|v| v.as_f64()).collect();
                spec.expectation(&inputs).map(T::of)
            })
            .collect::<Result<Vec<T>>>()?;
        self.counter.fetch_add(values.len() as u64, Ordering::Relaxed);
        Tensor::new(out_shape, values)
    }
}

impl<T: Real> CustomOp<T> for CircuitOp {
    fn name(&self) -> &str {
        "patch_circuit"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (angles, theta) = (inputs[0], inputs[1]);
        if let Readout::Constant(_) = self.readout {
            return Ok(vec![
                Some(Tensor::zeros(angles.shape().to_vec())),
                Some(Tensor::zeros(theta.shape().to_vec())),
            ]);
        }
        let n = self.layout.n_qubits;
        let spec = self.spec(theta)?;
        let per_patch = angles
            .data()
            .par_chunks(n)
            .map(|a| {
                let inputs: Vec<f64> = a.iter().map(|v| v.as_f64()).collect();
                parameter_shift_grad(&spec, &inputs)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut d_angles = Vec::with_capacity(angles.numel());
        let mut d_theta = vec![0.0f64; theta.numel()];
        let mut evaluations = 0u64;
        for (g, shift) in grad_out.data().iter().zip(&per_patch) {
            let g = g.as_f64();
            d_angles.extend(shift.d_inputs.iter().map(|&d| T::of(g * d)));
            for (acc, &d) in d_theta.iter_mut().zip(&shift.d_theta) {
                *acc += g * d;
            }
            evaluations += shift.evaluations as u64;
        }
        self.counter.fetch_add(evaluations, Ordering::Relaxed);
        Ok(vec![
            Some(Tensor::new(angles.shape().to_vec(), d_angles)?),
            Some(Tensor::new(theta.shape().to_vec(), d_theta.into_iter().map(T::of).collect())?),
        ])
    }
}

/// Intermediate results of one branch evaluation.
#[derive(Clone, Copy, Debug)]
pub struct QuanvTrace {
    pub grid: Var,
    pub mixed: Var,
    pub angles: Var,
    pub quantum_map: Var,
    pub features: Var,
}

#[derive(Clone, Debug)]
pub struct QuanvBranch {
    pub config: QuanvConfig,
    stem: [(Conv2d, BatchNorm2d); 2],
    mixer: Conv2d,
    restore: Conv2d,
    theta: String,
    readout: Readout,
    counter: Arc<AtomicU64>,
}

impl QuanvBranch {
    pub fn new(prefix: &str, config: QuanvConfig, counter: Arc<AtomicU64>) -> Result<Self> {
        config.validate()?;
        let [c1, c2] = config.stem_channels;
        let stage = |i: usize, cin: usize, cout: usize| {
            (
                Conv2d::new(
                    &format!("{prefix}.stem{i}.conv"),
                    cin,
                    cout,
                    config.stem_kernels[i],
                    config.stem_strides[i],
                    config.stem_paddings[i],
                ),
                BatchNorm2d::new(&format!("{prefix}.stem{i}.bn"), cout),
            )
        };
        Ok(Self {
            stem: [stage(0, config.in_channels, c1), stage(1, c1, c2)],
            mixer: Conv2d::new(&format!("{prefix}.mixer"), c2, 1, 1, 1, 0),
            restore: Conv2d::new(&format!("{prefix}.restore"), 1, config.feature_dim, 1, 1, 0),
            theta: format!("{prefix}.circuit.theta"),
            readout: Readout::Circuit,
            counter,
            config,
        })
    }

    pub fn with_readout(mut self, readout: Readout) -> Self {
        self.readout = readout;
        self
    }

    pub fn theta_name(&self) -> &str {
        &self.theta
    }

    pub fn mixer(&self) -> &Conv2d {
        &self.mixer
    }

    /// Circuit executions performed so far (forward and parameter-shift).
    pub fn circuit_evaluations(&self) -> u64 {
        self.counter.load(Ordering::Relaxed)
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<()> {
        for (conv, bn) in &self.stem {
            conv.init(store, Init::FanIn, rng)?;
            bn.init(store)?;
        }
        self.mixer.init(store, Init::FanIn, rng)?;
        self.restore.init(store, Init::FanIn, rng)?;
        let theta = Tensor::from_fn(vec![self.config.circuit.n_theta()], |_| T::of(rng.random_range(-0.1..=0.1)));
        store.register(&self.theta, theta)
    }

    pub fn num_params(&self) -> usize {
        self.stem.iter().map(|(c, b)| c.num_params() + b.num_params()).sum::<usize>()
            + self.mixer.num_params()
            + self.restore.num_params()
            + self.config.circuit.n_theta()
    }

    /// `[B,C,H,W]` -> `[B,64,grid,grid]`
    pub fn stem<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.config.in_channels {
            return Err(dim_err!("quanv stem expects [B,{},H,W], got {:?}", self.config.in_channels, s));
        }
        if s[2] < 16 || s[3] < 16 {
            return Err(dim_err!("quanv stem needs H, W >= 16, got {}x{}", s[2], s[3]));
        }
        let mut h = x;
        for (conv, bn) in &self.stem {
            h = conv.forward(g, store, h)?;
            h = bn.forward(g, store, h)?;
            h = g.gelu(h);
        }
        g.adaptive_avg_pool2d(h, self.config.grid, self.config.grid)
    }

    /// `[B,64,g,g]` -> `[B,1,g,g]`
    pub fn channel_mix<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, grid: Var) -> Result<Var> {
        let s = g.shape(grid);
        if s.len() != 4 || s[1] != self.mixer.in_channels {
            return Err(dim_err!("channel mixer expects {} channels, got {:?}", self.mixer.in_channels, s));
        }
        self.mixer.forward(g, store, grid)
    }

    /// `[B,1,H,W]` -> angles `[B,P,patch^2]` in `(0, pi)`.
    pub fn patch_encode<T: Real>(&self, g: &mut Graph<T>, map: Var) -> Result<Var> {
        let s = g.shape(map).to_vec();
        if s.len() != 4 || s[1] != 1 {
            return Err(dim_err!("patch_encode expects [B,1,H,W], got {:?}", s));
        }
        let (b, h, w, p) = (s[0], s[2], s[3], self.config.patch);
        let plane = patch_indices(h, w, p)?;
        let index: Vec<usize> = (0..b).flat_map(|i| plane.iter().map(move |&j| i * h * w + j)).collect();
        let patches = g.gather(map, Arc::new(index), &[b, (h / p) * (w / p), p * p])?;
        let unit = g.sigmoid(patches);
        Ok(g.scale(unit, T::of(PI)))
    }

    pub fn forward_trace<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, images: Var) -> Result<QuanvTrace> {
        let grid = self.stem(g, store, images)?;
        let mixed = self.channel_mix(g, store, grid)?;
        let angles = self.patch_encode(g, mixed)?;
        let theta = g.param(store, &self.theta)?;
        let op = CircuitOp::new(self.config.circuit.clone(), self.readout, Arc::clone(&self.counter));
        let values = op.forward(g.value(angles), g.value(theta))?;
        let expectations = g.custom(&[angles, theta], values, Box::new(op));
        let (b, side) = (g.shape(images)[0], self.config.map_side());
        let quantum_map = g.reshape(expectations, &[b, 1, side, side])?;
        let restored = self.restore.forward(g, store, quantum_map)?;
        let pooled = g.adaptive_avg_pool2d(restored, 1, 1)?;
        let features = g.flatten(pooled)?;
        Ok(QuanvTrace {
            grid,
            mixed,
            angles,
            quantum_map,
            features,
        })
    }

    /// `[B,3,H,W]` -> `[B,feature_dim]`
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, images: Var) -> Result<Var> {
        Ok(self.forward_trace(g, store, images)?.features)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::gradcheck::{check_params, DEFAULT_STEP};

    fn branch() -> QuanvBranch {
        QuanvBranch::new("quanv", QuanvConfig::default(), Arc::new(AtomicU64::new(0))).unwrap()
    }

    fn store_for(b: &QuanvBranch, seed: u64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        b.init(&mut s, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        s
    }

    fn image(b: usize, side: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(vec![b, 3, side, side], |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn stem_shapes() {
        let q = branch();
        let s = store_for(&q, 0).cast::<f32>();
        for side in [224, 56] {
            let mut g = Graph::<f32>::inference();
            let x = g.input(Tensor::zeros(vec![1, 3, side, side]));
            let grid = q.stem(&mut g, &s, x).unwrap();
            assert_eq!(g.shape(grid), &[1, 64, 8, 8]);
        }
        let mut g = Graph::<f32>::inference();
        let x = g.input(Tensor::zeros(vec![1, 3, 12, 12]));
        assert!(matches!(q.stem(&mut g, &s, x), Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_image_with_zero_convs_gives_zero_grid() {
        let q = branch();
        let mut s = store_for(&q, 0);
        let names: Vec<String> = s.names().filter(|n| n.contains("conv")).map(String::from).collect();
        for n in names {
            let shape = s.value(&n).unwrap().shape().to_vec();
            s.set(&n, Tensor::zeros(shape)).unwrap();
        }
        let mut g = Graph::<f64>::new(false, 0);
        let x = g.input(Tensor::zeros(vec![1, 3, 32, 32]));
        let grid = q.stem(&mut g, &s, x).unwrap();
        assert!(g.value(grid).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mix_examples() {
        let q = branch();
        let mut s = store_for(&q, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let grid = Tensor::from_fn(vec![1, 64, 8, 8], |_| rng.random_range(-1.0..1.0));

        s.set("quanv.mixer.weight", Tensor::full(vec![1, 64, 1, 1], 1.0 / 64.0)).unwrap();
        s.set("quanv.mixer.bias", Tensor::zeros(vec![1])).unwrap();
        let mut g = Graph::new(false, 0);
        let gv = g.input(grid.clone());
        let m = q.channel_mix(&mut g, &s, gv).unwrap();
        assert_eq!(g.shape(m), &[1, 1, 8, 8]);
        for p in 0..64 {
            let mean: f64 = (0..64).map(|c| grid.data()[c * 64 + p]).sum::<f64>() / 64.0;
            assert!((g.value(m).data()[p] - mean).abs() < 1e-12);
        }

        let mut onehot = vec![0.0; 64];
        onehot[17] = 1.0;
        s.set("quanv.mixer.weight", Tensor::new(vec![1, 64, 1, 1], onehot).unwrap()).unwrap();
        let mut g = Graph::new(false, 0);
        let gv = g.input(grid.clone());
        let m = q.channel_mix(&mut g, &s, gv).unwrap();
        assert_eq!(g.value(m).data(), &grid.data()[17 * 64..18 * 64]);

        let mut g = Graph::new(false, 0);
        let bad = g.input(Tensor::zeros(vec![1, 32, 8, 8]));
        assert!(matches!(q.channel_mix(&mut g, &s, bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn patch_encoding() {
        let idx = patch_indices(8, 8, 2).unwrap();
        assert_eq!(idx.len(), 64);
        // patch (r, c) = (1, 2) is window 6 and reads rows {2,3}, cols {4,5}
        assert_eq!(&idx[6 * 4..7 * 4], &[2 * 8 + 4, 2 * 8 + 5, 3 * 8 + 4, 3 * 8 + 5]);
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..64).collect::<Vec<_>>());
        assert!(matches!(patch_indices(7, 8, 2), Err(Error::Dimension(_))));

        let q = branch();
        let mut g = Graph::<f64>::new(false, 0);
        let mut values = vec![0.0; 64];
        values[0] = 40.0;
        values[1] = -40.0;
        let map = g.input(Tensor::new(vec![1, 1, 8, 8], values).unwrap());
        let angles = q.patch_encode(&mut g, map).unwrap();
        assert_eq!(g.shape(angles), &[1, 16, 4]);
        let a = g.value(angles).data();
        assert!((a[0] - PI).abs() < 1e-12);
        assert!(a[1].abs() < 1e-12);
        assert!((a[2] - PI / 2.0).abs() < 1e-15);
    }

    #[test]
    fn quantum_map_shape_and_range() {
        let q = branch();
        let s = store_for(&q, 1);
        let mut g = Graph::new(false, 0);
        let x = g.input(image(2, 56, 3));
        let trace = q.forward_trace(&mut g, &s, x).unwrap();
        assert_eq!(g.shape(trace.quantum_map), &[2, 1, 4, 4]);
        assert_eq!(g.shape(trace.features), &[2, 64]);
        assert!(g.value(trace.quantum_map).data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(q.circuit_evaluations(), 32);
    }

    #[test]
    fn batch_matches_single_items_in_eval_mode() {
        let q = branch();
        let s = store_for(&q, 2).cast::<f32>();
        let imgs = image(3, 32, 5).cast::<f32>();
        let mut g = Graph::<f32>::new(false, 0);
        let x = g.input(imgs.clone());
        let batched = q.forward(&mut g, &s, x).unwrap();
        let batched = g.value(batched).clone();
        let per = imgs.numel() / 3;
        for i in 0..3 {
            let item = Tensor::new(vec![1, 3, 32, 32], imgs.data()[i * per..(i + 1) * per].to_vec()).unwrap();
            let mut g = Graph::<f32>::new(false, 0);
            let x = g.input(item);
            let y = q.forward(&mut g, &s, x).unwrap();
            assert_eq!(g.value(y).data(), &batched.data()[i * 64..(i + 1) * 64]);
        }
    }

    fn loss_builder<'a>(q: &'a QuanvBranch, x: &'a Tensor<f64>, r: &'a Tensor<f64>) -> impl Fn(&ParamStore<f64>) -> Result<(Graph<f64>, Var)> + 'a {
        move |s| {
            let mut g = Graph::new(true, 0);
            let xv = g.input(x.clone());
            let f = q.forward(&mut g, s, xv)?;
            let rv = g.input(r.clone());
            let p = g.mul(f, rv)?;
            let loss = g.sum(p);
            Ok((g, loss))
        }
    }

    #[test]
    fn end_to_end_gradcheck_through_the_circuit() {
        let q = branch();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut s = store_for(&q, 3);
        // Larger circuit angles than the init range so gradients are not tiny.
        s.set("quanv.circuit.theta", Tensor::from_fn(vec![8], |_| rng.random_range(-2.0..2.0))).unwrap();
        let x = image(2, 20, 9);
        let r = Tensor::from_fn(vec![2, 64], |_| rng.random_range(-1.0..1.0));
        let names = vec!["quanv.mixer.weight".to_string(), "quanv.mixer.bias".into(), "quanv.circuit.theta".into()];
        let checks = check_params(&s, &names, 0, DEFAULT_STEP, &mut rng, loss_builder(&q, &x, &r)).unwrap();
        for c in checks {
            assert!(c.rel_err <= 1e-4, "{c:?}");
        }
    }

    #[test]
    fn constant_readout_is_classical_and_gradchecks() {
        let q = branch().with_readout(Readout::Constant(1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let s = store_for(&q, 4);
        let x = image(2, 20, 11);
        let r = Tensor::from_fn(vec![2, 64], |_| rng.random_range(-1.0..1.0));
        let names: Vec<String> = s.names().map(String::from).collect();
        let checks = check_params(&s, &names, 4, DEFAULT_STEP, &mut rng, loss_builder(&q, &x, &r)).unwrap();
        for c in checks {
            assert!(c.rel_err <= 1e-6, "{c:?}");
        }
        assert_eq!(q.circuit_evaluations(), 0);
    }
}
