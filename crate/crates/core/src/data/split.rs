use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, Split};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    #[default]
    Region,
    Tile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    /// train, val, test
    pub ratios: [f64; 3],
    pub granularity: Granularity,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            ratios: [0.7, 0.15, 0.15],
            granularity: Granularity::Region,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.ratios.iter().any(|&r| r < 0.0) {
            return Err(Error::Config(format!("split.ratios must be non-negative and sum to 1, got {:?}", self.ratios)));
        }
        Ok(())
    }
}

/// Assigns every sample a split.
///
/// Units (regions or tiles) are shuffled under `seed` and dealt out in
/// order; a unit goes to the split whose cumulative tile quota it starts in,
/// so with tile granularity the counts are `round(r * n)` for train and val.
pub fn split_dataset(manifest: &mut DatasetManifest, cfg: &SplitConfig, seed: u64) -> Result<()> {
    cfg.validate()?;
    let n = manifest.samples.len();
    let mut units: Vec<Vec<usize>> = match cfg.granularity {
        Granularity::Tile => (0..n).map(|i| vec![i]).collect(),
        Granularity::Region => {
            let mut by_region: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (i, s) in manifest.samples.iter().enumerate() {
                by_region.entry(&s.region_id).or_default().push(i);
            }
            by_region.into_values().collect()
        }
    };
    units.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train_end = (cfg.ratios[0] * n as f64).round() as usize;
    let val_end = ((cfg.ratios[0] + cfg.ratios[1]) * n as f64).round() as usize;
    let mut seen = 0;
    for unit in units {
        let split = if seen < train_end {
            Split::Train
        } else if seen < val_end {
            Split::Val
        } else {
            Split::Test
        };
        seen += unit.len();
        for i in unit {
            manifest.samples[i].split = Some(split);
        }
    }
    Ok(())
}
