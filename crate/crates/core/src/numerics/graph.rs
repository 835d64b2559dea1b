//! Reverse-mode gradient tape.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order; `backward` walks it once in reverse.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};

use super::kernels::{self, ConvGeometry, NormSaved};
use super::{ParamStore, Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// An operation whose forward pass is computed outside the tape. The tape
/// stores its output and calls `backward` to obtain input gradients.
pub trait CustomOp<T: Real>: Send + Sync {
    fn name(&self) -> &str;

    /// Gradients for each input (same order as registered), or `None` when
    /// an input receives no gradient.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>>;
}

enum Op<T: Real> {
    Leaf,
    Param(String),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Reshape(Var),
    Gather(Var, Arc<Vec<usize>>),
    Concat { inputs: Vec<Var>, axis: usize },
    Conv2d { x: Var, w: Var, b: Option<Var>, geo: ConvGeometry, cols: Vec<Vec<T>> },
    BatchNorm { x: Var, gamma: Var, beta: Var, saved: NormSaved<T> },
    LayerNorm { x: Var, gamma: Var, beta: Var, saved: NormSaved<T> },
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Dropout(Var, Vec<T>),
    AvgPool { x: Var, oh: usize, ow: usize },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    Sum(Var),
    Mean(Var),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

struct Node<T: Real> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// Batch-norm settings shared by every `batch_norm2d` call.
#[derive(Clone, Copy, Debug)]
pub struct BatchNormOptions {
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BatchNormOptions {
    fn default() -> Self {
        Self {
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<String, Var>,
    train: bool,
    record: bool,
    rng: ChaCha8Rng,
    buffer_updates: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Graph<T> {
    /// A recording graph. `train` enables dropout and batch statistics;
    /// `seed` drives dropout masks.
    pub fn new(train: bool, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            train,
            record: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            buffer_updates: Vec::new(),
        }
    }

    /// Eval-mode graph that skips saving backward-only state.
    pub fn inference() -> Self {
        Self {
            record: false,
            ..Self::new(false, 0)
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Batch-norm running statistics computed in training mode, to be applied
    /// with [`ParamStore::apply_buffer_updates`].
    pub fn take_buffer_updates(&mut self) -> Vec<(String, Tensor<T>)> {
        std::mem::take(&mut self.buffer_updates)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.push_shared(Arc::new(value), op)
    }

    fn push_shared(&mut self, value: Arc<Tensor<T>>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf bound to a named parameter. Repeated lookups share one node.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_nodes.get(name) {
            return Ok(v);
        }
        let value = store.get(name)?.shared();
        let v = self.push_shared(value, Op::Param(name.to_string()));
        self.param_nodes.insert(name.to_string(), v);
        Ok(v)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!("{what}: shapes {:?} and {:?} differ", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v + s);
        self.push(out, Op::AddScalar(x))
    }

    /// `x + b` where `b`'s shape equals the trailing dimensions of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(b));
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
            return Err(dim_err!("add_bias: {:?} is not a suffix of {:?}", bs, xs));
        }
        let bv = self.value(b).data();
        let n = bv.len();
        let xv = self.value(x);
        let data = xv.data().iter().enumerate().map(|(i, &v)| v + bv[i % n]).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddBias(x, b)))
    }

    /// `[M,K] x [K,N] -> [M,N]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err!("matmul: cannot multiply {:?} by {:?}", sa, sb));
        }
        let c = kernels::matmul(self.value(a).data(), self.value(b).data(), sa[0], sa[1], sb[1]);
        let out = Tensor::new(vec![sa[0], sb[1]], c)?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Flattens everything after the leading axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let lead = s.first().copied().unwrap_or(1);
        let rest = s.iter().skip(1).product();
        self.reshape(x, &[lead, rest])
    }

    /// `out.flat[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= xv.numel()) {
            return Err(Error::Index(format!("gather index {bad} into tensor of {} elements", xv.numel())));
        }
        let data = index.iter().map(|&i| xv.data()[i]).collect();
        let out = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(out, Op::Gather(x, index)))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*inputs.first().ok_or_else(|| dim_err!("concat of nothing"))?).to_vec();
        if axis >= first.len() {
            return Err(dim_err!("concat axis {axis} out of range for {:?}", first));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i]) {
                return Err(dim_err!("concat along {axis}: {:?} vs {:?}", s, first));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Concat { inputs: inputs.to_vec(), axis }))
    }

    /// Cross-correlation of `[B,C,H,W]` (or `[C,H,W]`) with `[F,C,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (batch, c, h, wd, unbatched) = match xs.as_slice() {
            [c, h, w] => (1, *c, *h, *w, true),
            [b, c, h, w] => (*b, *c, *h, *w, false),
            _ => return Err(dim_err!("conv2d: input must be [C,H,W] or [B,C,H,W], got {:?}", xs)),
        };
        if ws.len() != 4 || ws[1] != c {
            return Err(dim_err!("conv2d: kernel {:?} does not match input {:?}", ws, xs));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d: stride must be >= 1".into()));
        }
        if ws[2] > h + 2 * padding || ws[3] > wd + 2 * padding {
            return Err(dim_err!("conv2d: kernel {:?} larger than padded input {:?} (padding {padding})", ws, xs));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(dim_err!("conv2d: bias {:?} for {} filters", self.shape(b), ws[0]));
            }
        }
        let geo = ConvGeometry {
            channels: c,
            height: h,
            width: wd,
            filters: ws[0],
            kernel_h: ws[2],
            kernel_w: ws[3],
            stride,
            padding,
        };
        let (out, cols) = kernels::conv2d(
            self.value(x).data(),
            batch,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geo,
            self.record,
        );
        let shape = if unbatched {
            vec![geo.filters, geo.out_h(), geo.out_w()]
        } else {
            vec![batch, geo.filters, geo.out_h(), geo.out_w()]
        };
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::Conv2d { x, w, b, geo, cols }))
    }

    /// Batch norm over `[B,C,H,W]`. Uses batch statistics in training mode
    /// (queueing a running-average update) and the stored running statistics
    /// otherwise.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        store: &ParamStore<T>,
        running_mean: &str,
        running_var: &str,
        opts: BatchNormOptions,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(dim_err!("batch_norm2d expects [B,C,H,W], got {:?}", xs));
        }
        let (batch, c, spatial) = (xs[0], xs[1], xs[2] * xs[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(dim_err!("batch_norm2d: affine params must be [{c}]"));
        }
        let rm = store.buffer(running_mean)?;
        let rv = store.buffer(running_var)?;
        let running = (!self.train).then(|| (rm.data(), rv.data()));
        let (y, saved, stats) = kernels::batch_norm2d(
            self.value(x).data(),
            batch,
            c,
            spatial,
            self.value(gamma).data(),
            self.value(beta).data(),
            running,
            T::of(opts.eps),
        );
        if let Some((mean, var)) = stats {
            let m = T::of(opts.momentum);
            let keep = T::one() - m;
            let new_mean = rm.data().iter().zip(&mean).map(|(&r, &b)| keep * r + m * b).collect();
            let new_var = rv.data().iter().zip(&var).map(|(&r, &b)| keep * r + m * b).collect();
            self.buffer_updates.push((running_mean.to_string(), Tensor::new(vec![c], new_mean)?));
            self.buffer_updates.push((running_var.to_string(), Tensor::new(vec![c], new_var)?));
        }
        let out = Tensor::new(xs, y)?;
        Ok(self.push(out, Op::BatchNorm { x, gamma, beta, saved }))
    }

    /// Normalizes over the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or_else(|| dim_err!("layer_norm on a scalar"))?;
        if d == 0 || self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(dim_err!("layer_norm: affine params must be [{d}]"));
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm: eps must be > 0, got {eps}")));
        }
        let (y, saved) = kernels::layer_norm(
            self.value(x).data(),
            d,
            self.value(gamma).data(),
            self.value(beta).data(),
            T::of(eps),
        );
        let out = Tensor::new(xs, y)?;
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, saved }))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::gelu);
        self.push(out, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        self.push(out, Op::Tanh(x))
    }

    /// Inverted dropout: identity in eval mode and for `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability must lie in [0, 1), got {p}")));
        }
        if !self.train || p == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let n = self.value(x).numel();
        let mask: Vec<T> = (0..n)
            .map(|_| if self.rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Dropout(x, mask)))
    }

    /// Averages `[..., H, W]` over adaptive bins down to `[..., oh, ow]`.
    pub fn adaptive_avg_pool2d(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || oh == 0 || ow == 0 || xs[xs.len() - 2] == 0 || xs[xs.len() - 1] == 0 {
            return Err(dim_err!("adaptive_avg_pool2d: bad input {:?} or target {oh}x{ow}", xs));
        }
        // Targets larger than the input are allowed: bins then overlap.
        let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        let planes: usize = xs[..xs.len() - 2].iter().product();
        let y = kernels::adaptive_avg_pool2d(self.value(x).data(), planes, h, w, oh, ow);
        let mut shape = xs;
        let n = shape.len();
        shape[n - 2] = oh;
        shape[n - 1] = ow;
        let out = Tensor::new(shape, y)?;
        Ok(self.push(out, Op::AvgPool { x, oh, ow }))
    }

    /// Multi-head scaled dot-product attention over `[B,T,D]` projections.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let qs = self.shape(q).to_vec();
        if qs.len() != 3 || self.shape(k) != qs.as_slice() || self.shape(v) != qs.as_slice() {
            return Err(dim_err!("attention: q/k/v must share a [B,T,D] shape, got {:?}", qs));
        }
        if heads == 0 || !qs[2].is_multiple_of(heads) {
            return Err(Error::Config(format!("attention: width {} not divisible by {heads} heads", qs[2])));
        }
        let (out, probs) = kernels::attention(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            qs[0],
            qs[1],
            qs[2],
            heads,
        );
        let probs = if self.record { probs } else { Vec::new() };
        let out = Tensor::new(qs, out)?;
        Ok(self.push(out, Op::Attention { q, k, v, heads, probs }))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(dim_err!("cross entropy: logits {:?} for {} labels", s, labels.len()));
        }
        let c = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index(format!("label {bad} outside [0, {c})")));
        }
        let lv = self.value(logits).data();
        let mut loss = T::zero();
        for (row, &label) in lv.chunks(c).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            loss = loss + (lse - row[label]);
        }
        let loss = loss / T::of(labels.len() as f64);
        let probs = kernels::softmax_rows(lv, c);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.sum() / T::of(t.numel() as f64);
        self.push(Tensor::scalar(m), Op::Mean(x))
    }

    /// Records an externally computed result whose gradient is supplied by `op`.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.record {
            return Err(Error::Contract("backward on an inference graph".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.shape(loss).to_vec(), vec![T::one()])?);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Graph::backward`] and accumulates parameter gradients into
    /// `store`; parameters the loss does not reach receive zeros.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let grads = self.backward(loss)?;
        self.accumulate_param_grads(&grads, store)?;
        Ok(grads)
    }

    pub fn accumulate_param_grads(&self, grads: &Gradients<T>, store: &mut ParamStore<T>) -> Result<()> {
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                if let Some(g) = &grads.grads[id] {
                    store.accumulate_grad(name, g)?;
                }
            }
        }
        store.fill_missing_grads();
        Ok(())
    }

    fn backprop_node(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[id];
        let gd = g.data();
        let mut send = |v: Var, data: Vec<T>| -> Result<()> {
            let shape = self.shape(v).to_vec();
            let t = Tensor::new(shape, data)?;
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
            Ok(())
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                send(*a, gd.to_vec())?;
                send(*b, gd.to_vec())?;
            }
            Op::Sub(a, b) => {
                send(*a, gd.to_vec())?;
                send(*b, gd.iter().map(|&v| -v).collect())?;
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                send(*a, gd.iter().zip(bv).map(|(&g, &y)| g * y).collect())?;
                send(*b, gd.iter().zip(av).map(|(&g, &x)| g * x).collect())?;
            }
            Op::Scale(x, s) => send(*x, gd.iter().map(|&v| v * *s).collect())?,
            Op::AddScalar(x) | Op::Reshape(x) => send(*x, gd.to_vec())?,
            Op::AddBias(x, b) => {
                send(*x, gd.to_vec())?;
                let n = self.value(*b).numel();
                let mut db = vec![T::zero(); n];
                for (i, &v) in gd.iter().enumerate() {
                    db[i % n] = db[i % n] + v;
                }
                send(*b, db)?;
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (da, db) = kernels::matmul_backward(
                    self.value(*a).data(),
                    self.value(*b).data(),
                    gd,
                    sa[0],
                    sa[1],
                    sb[1],
                );
                send(*a, da)?;
                send(*b, db)?;
            }
            Op::Gather(x, index) => {
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (&i, &v) in index.iter().zip(gd) {
                    dx[i] = dx[i] + v;
                }
                send(*x, dx)?;
            }
            Op::Concat { inputs, axis } => {
                let total = g.shape()[*axis];
                let outer: usize = g.shape()[..*axis].iter().product();
                let inner: usize = g.shape()[*axis + 1..].iter().product();
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis] * inner;
                    let mut dv = Vec::with_capacity(outer * len);
                    for o in 0..outer {
                        let start = o * total * inner + offset;
                        dv.extend_from_slice(&gd[start..start + len]);
                    }
                    offset += len;
                    send(v, dv)?;
                }
            }
            Op::Conv2d { x, w, b, geo, cols } => {
                let batch = self.value(*x).numel() / (geo.channels * geo.height * geo.width);
                let (dx, dw, db) = kernels::conv2d_backward(gd, batch, self.value(*w).data(), cols, geo);
                send(*x, dx)?;
                send(*w, dw)?;
                if let Some(b) = b {
                    send(*b, db)?;
                }
            }
            Op::BatchNorm { x, gamma, beta, saved } => {
                let s = self.shape(*x);
                let (dx, dg, db) = kernels::batch_norm2d_backward(gd, s[0], s[1], s[2] * s[3], self.value(*gamma).data(), saved);
                send(*x, dx)?;
                send(*gamma, dg)?;
                send(*beta, db)?;
            }
            Op::LayerNorm { x, gamma, beta, saved } => {
                let d = *self.shape(*x).last().expect("checked in forward");
                let (dx, dg, db) = kernels::layer_norm_backward(gd, d, self.value(*gamma).data(), saved);
                send(*x, dx)?;
                send(*gamma, dg)?;
                send(*beta, db)?;
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                send(*x, gd.iter().zip(xv).map(|(&g, &v)| g * kernels::gelu_grad(v)).collect())?;
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                send(*x, gd.iter().zip(y).map(|(&g, &s)| g * s * (T::one() - s)).collect())?;
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                send(*x, gd.iter().zip(y).map(|(&g, &t)| g * (T::one() - t * t)).collect())?;
            }
            Op::Dropout(x, mask) => send(*x, gd.iter().zip(mask).map(|(&g, &m)| g * m).collect())?,
            Op::AvgPool { x, oh, ow } => {
                let s = self.shape(*x);
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let planes = self.value(*x).numel() / (h * w);
                send(*x, kernels::adaptive_avg_pool2d_backward(gd, planes, h, w, *oh, *ow))?;
            }
            Op::Attention { q, k, v, heads, probs } => {
                let s = self.shape(*q);
                let (dq, dk, dv) = kernels::attention_backward(
                    gd,
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    s[0],
                    s[1],
                    s[2],
                    *heads,
                );
                send(*q, dq)?;
                send(*k, dk)?;
                send(*v, dv)?;
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let c = self.shape(*logits)[1];
                let scale = gd[0] / T::of(labels.len() as f64);
                let mut dl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    dl[r * c + l] = dl[r * c + l] - scale;
                }
                send(*logits, dl)?;
            }
            Op::Sum(x) => send(*x, vec![gd[0]; self.value(*x).numel()])?,
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                send(*x, vec![gd[0] / T::of(n as f64); n])?;
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let input_grads = op.backward(&values, &node.value, g)?;
                if input_grads.len() != inputs.len() {
                    return Err(Error::Contract(format!(
                        "custom op `{}` returned {} gradients for {} inputs",
                        op.name(),
                        input_grads.len(),
                        inputs.len()
                    )));
                }
                for (&v, dg) in inputs.iter().zip(input_grads) {
                    if let Some(dg) = dg {
                        if dg.shape() != self.shape(v) {
                            return Err(dim_err!(
                                "custom op `{}` gradient {:?} for input {:?}",
                                op.name(),
                                dg.shape(),
                                self.shape(v)
                            ));
                        }
                        send(v, dg.into_data())?;
                    }
                }
            }
        }
        Ok(())
    }
}
