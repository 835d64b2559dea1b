use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::Label;
use crate::error::{Error, Result};

/// Draws sample indices with replacement, each with probability
/// proportional to `1 / count(class)`.
#[derive(Clone, Debug)]
pub struct WeightedSampler {
    dist: WeightedIndex<f64>,
    rng: ChaCha8Rng,
}

impl WeightedSampler {
    pub fn new(labels: &[Label], seed: u64) -> Result<Self> {
        Self::with_rng(labels, ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn with_rng(labels: &[Label], rng: ChaCha8Rng) -> Result<Self> {
        let weights = class_weights(labels)?;
        let dist = WeightedIndex::new(labels.iter().map(|&l| weights[l as usize]))
            .map_err(|e| Error::Config(format!("sampler weights: {e}")))?;
        Ok(Self { dist, rng })
    }

    pub fn next_index(&mut self) -> usize {
        self.dist.sample(&mut self.rng)
    }

    /// Draws with an external generator, leaving the internal one untouched.
    pub fn draw(&self, rng: &mut impl rand::Rng) -> usize {
        self.dist.sample(rng)
    }
}

impl Iterator for WeightedSampler {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        Some(self.next_index())
    }
}

/// `1 / count` per class; both classes must be present.
pub fn class_weights(labels: &[Label]) -> Result<[f64; 2]> {
    let mut counts = [0usize; 2];
    for &l in labels {
        *counts
            .get_mut(l as usize)
            .ok_or_else(|| Error::Dataset(format!("label {l} is not binary")))? += 1;
    }
    if counts.contains(&0) {
        return Err(Error::Config(format!(
            "weighted sampling needs both classes in the train split, got counts {counts:?}"
        )));
    }
    Ok([1.0 / counts[0] as f64, 1.0 / counts[1] as f64])
}
