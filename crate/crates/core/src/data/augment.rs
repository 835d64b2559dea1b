use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub hflip: f64,
    pub vflip: f64,
    /// Rotate by a uniformly drawn multiple of 90 degrees.
    pub rot90: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            hflip: 0.5,
            vflip: 0.5,
            rot90: true,
        }
    }
}

impl AugmentConfig {
    pub fn off() -> Self {
        Self {
            hflip: 0.0,
            vflip: 0.0,
            rot90: false,
        }
    }
}

/// Random flips and quarter turns of `[C,H,W]` images. Counts its calls so
/// callers can assert evaluation paths never augment.
#[derive(Clone, Debug, Default)]
pub struct Augmenter {
    pub config: AugmentConfig,
    calls: Arc<AtomicU64>,
}

impl Augmenter {
    pub fn new(config: AugmentConfig) -> Self {
        Self {
            config,
            calls: Arc::default(),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn apply<T: Real>(&self, image: &Tensor<T>, rng: &mut impl Rng) -> Tensor<T> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let h = rng.random_bool(self.config.hflip);
        let v = rng.random_bool(self.config.vflip);
        let square = image.shape()[1] == image.shape()[2];
        let k = match (self.config.rot90, square) {
            (false, _) => 0,
            (true, true) => rng.random_range(0..4),
            (true, false) => 2 * rng.random_range(0..2),
        };
        let mut out = image.clone();
        if h {
            out = hflip(&out);
        }
        if v {
            out = vflip(&out);
        }
        for _ in 0..k {
            out = rot90(&out);
        }
        out
    }
}

fn remap<T: Real>(image: &Tensor<T>, out_hw: (usize, usize), src: impl Fn(usize, usize) -> (usize, usize)) -> Tensor<T> {
    let s = image.shape();
    let (c, w) = (s[0], s[2]);
    let (oh, ow) = out_hw;
    let plane = s[1] * w;
    Tensor::from_fn(vec![c, oh, ow], |i| {
        let (ch, y, x) = (i / (oh * ow), (i / ow) % oh, i % ow);
        let (sy, sx) = src(y, x);
        image.data()[ch * plane + sy * w + sx]
    })
}

pub fn hflip<T: Real>(image: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    remap(image, (h, w), |y, x| (y, w - 1 - x))
}

pub fn vflip<T: Real>(image: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    remap(image, (h, w), |y, x| (h - 1 - y, x))
}

/// Quarter turn counter-clockwise.
pub fn rot90<T: Real>(image: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    remap(image, (w, h), |y, x| (x, w - 1 - y))
}
