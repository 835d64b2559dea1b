//! Parameterized layers built on the tape. Each layer only holds parameter
//! names and sizes; values live in a [`ParamStore`].

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{dim_err, Result};

use super::{BatchNormOptions, Graph, ParamStore, Real, Tensor, Var};

/// Normal samples with std `std`, redrawn outside two standard deviations.
pub fn trunc_normal<T: Real>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    Tensor::from_fn(shape.to_vec(), |_| loop {
        let z: f64 = normal.sample(rng);
        if z.abs() <= 2.0 {
            break T::of(z * std);
        }
    })
}

/// Kaiming-uniform style init `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn fan_in_uniform<T: Real>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| T::of(rng.random_range(-bound..bound)))
}

/// Weight initialization scheme for dense/conv layers.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    FanIn,
    TruncNormal(f64),
    Zeros,
}

fn init_weight<T: Real>(shape: &[usize], fan_in: usize, init: Init, rng: &mut impl Rng) -> Tensor<T> {
    match init {
        Init::FanIn => fan_in_uniform(shape, fan_in, rng),
        Init::TruncNormal(std) => trunc_normal(shape, std, rng),
        Init::Zeros => Tensor::zeros(shape.to_vec()),
    }
}

/// `y = x W + b` over the last axis; `W` is stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(prefix: &str, inputs: usize, outputs: usize) -> Self {
        Self {
            weight: format!("{prefix}.weight"),
            bias: format!("{prefix}.bias"),
            inputs,
            outputs,
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, init: Init, rng: &mut impl Rng) -> Result<()> {
        store.register(&self.weight, init_weight(&[self.inputs, self.outputs], self.inputs, init, rng))?;
        store.register(&self.bias, Tensor::zeros(vec![self.outputs]))
    }

    pub fn num_params(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.last() != Some(&self.inputs) {
            return Err(dim_err!("linear `{}` expects width {}, got {:?}", self.weight, self.inputs, shape));
        }
        let rows = shape[..shape.len() - 1].iter().product();
        let flat = g.reshape(x, &[rows, self.inputs])?;
        let w = g.param(store, &self.weight)?;
        let b = g.param(store, &self.bias)?;
        let y = g.matmul(flat, w)?;
        let y = g.add_bias(y, b)?;
        let mut out_shape = shape;
        *out_shape.last_mut().expect("non-empty") = self.outputs;
        g.reshape(y, &out_shape)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: String,
    pub bias: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(prefix: &str, in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            weight: format!("{prefix}.weight"),
            bias: format!("{prefix}.bias"),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, init: Init, rng: &mut impl Rng) -> Result<()> {
        let shape = [self.out_channels, self.in_channels, self.kernel, self.kernel];
        let fan_in = self.in_channels * self.kernel * self.kernel;
        store.register(&self.weight, init_weight(&shape, fan_in, init, rng))?;
        store.register(&self.bias, Tensor::zeros(vec![self.out_channels]))
    }

    pub fn num_params(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel + self.out_channels
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, &self.weight)?;
        let b = g.param(store, &self.bias)?;
        g.conv2d(x, w, Some(b), self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: String,
    pub beta: String,
    pub running_mean: String,
    pub running_var: String,
    pub channels: usize,
    pub opts: BatchNormOptions,
}

impl BatchNorm2d {
    pub fn new(prefix: &str, channels: usize) -> Self {
        Self {
            gamma: format!("{prefix}.gamma"),
            beta: format!("{prefix}.beta"),
            running_mean: format!("{prefix}.running_mean"),
            running_var: format!("{prefix}.running_var"),
            channels,
            opts: BatchNormOptions::default(),
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        store.register(&self.gamma, Tensor::full(vec![self.channels], T::one()))?;
        store.register(&self.beta, Tensor::zeros(vec![self.channels]))?;
        store.register_buffer(&self.running_mean, Tensor::zeros(vec![self.channels]))?;
        store.register_buffer(&self.running_var, Tensor::full(vec![self.channels], T::one()))
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, &self.gamma)?;
        let beta = g.param(store, &self.beta)?;
        g.batch_norm2d(x, gamma, beta, store, &self.running_mean, &self.running_var, self.opts)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
    pub width: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(prefix: &str, width: usize) -> Self {
        Self {
            gamma: format!("{prefix}.gamma"),
            beta: format!("{prefix}.beta"),
            width,
            eps: 1e-5,
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        store.register(&self.gamma, Tensor::full(vec![self.width], T::one()))?;
        store.register(&self.beta, Tensor::zeros(vec![self.width]))
    }

    pub fn num_params(&self) -> usize {
        2 * self.width
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, &self.gamma)?;
        let beta = g.param(store, &self.beta)?;
        g.layer_norm(x, gamma, beta, self.eps)
    }
}
