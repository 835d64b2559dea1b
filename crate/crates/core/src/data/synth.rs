//! Synthetic flood tiles: textured land everywhere, plus dark water blobs in
//! flooded regions. Written as 16-bit PGM with a `metadata.json`.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::raster::write_pgm16;
use super::scan::METADATA_FILE;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub regions: usize,
    pub tiles_per_region: usize,
    pub size: usize,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.regions == 0 || self.tiles_per_region == 0 {
            return Err(Error::Config("synth needs at least one region and one tile per region".into()));
        }
        if self.size < 16 {
            return Err(Error::Config(format!("synth tile size {} is below 16", self.size)));
        }
        Ok(())
    }
}

/// Even-numbered regions are flooded.
pub fn region_is_flooded(region: usize) -> bool {
    region.is_multiple_of(2)
}

pub fn region_name(region: usize) -> String {
    format!("region_{region:03}")
}

/// One `size x size` tile, row-major.
pub fn synth_tile(size: usize, flooded: bool, rng: &mut impl Rng) -> Vec<u16> {
    let base = rng.random_range(18_000.0..26_000.0);
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let angle = rng.random_range(0.0..TAU);
            let freq = rng.random_range(1.0..6.0) * TAU / size as f64;
            (freq * angle.cos(), freq * angle.sin(), rng.random_range(0.0..TAU), rng.random_range(800.0..2500.0))
        })
        .collect();
    let blobs: Vec<(f64, f64, f64, f64, f64)> = if flooded {
        let s = size as f64;
        (0..rng.random_range(1..=3))
            .map(|_| {
                (
                    rng.random_range(0.2..0.8) * s,
                    rng.random_range(0.2..0.8) * s,
                    rng.random_range(0.18..0.35) * s,
                    rng.random_range(0.18..0.35) * s,
                    rng.random_range(2_000.0..5_000.0),
                )
            })
            .collect()
    } else {
        Vec::new()
    };
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64, y as f64);
            let water = blobs
                .iter()
                .find(|(cx, cy, rx, ry, _)| ((fx - cx) / rx).powi(2) + ((fy - cy) / ry).powi(2) <= 1.0);
            let v = match water {
                Some(&(.., level)) => level + rng.random_range(-400.0..400.0),
                None => {
                    let texture: f64 = waves.iter().map(|(kx, ky, ph, amp)| amp * (kx * fx + ky * fy + ph).sin()).sum();
                    base + texture + rng.random_range(-1_500.0..1_500.0)
                }
            };
            out.push(v.round().clamp(0.0, 65_535.0) as u16);
        }
    }
    out
}

fn tile_rng(seed: u64, region: usize, tile: usize, tiles_per_region: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((region * tiles_per_region + tile) as u64);
    rng
}

/// Writes `out/region_XXX/tile_YYYY.pgm` and `out/metadata.json`; returns
/// the tile paths in generation order.
pub fn synth_generate(cfg: &SynthConfig, out: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut meta = BTreeMap::new();
    let mut paths = Vec::with_capacity(cfg.regions * cfg.tiles_per_region);
    for r in 0..cfg.regions {
        let name = region_name(r);
        let dir = out.join(&name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let flooded = region_is_flooded(r);
        meta.insert(name, json!({ "flooding": flooded }));
        for t in 0..cfg.tiles_per_region {
            let mut rng = tile_rng(cfg.seed, r, t, cfg.tiles_per_region);
            let pixels = synth_tile(cfg.size, flooded, &mut rng);
            let path = dir.join(format!("tile_{t:04}.pgm"));
            write_pgm16(&path, cfg.size, cfg.size, &pixels)?;
            paths.push(path);
        }
    }
    let meta_path = out.join(METADATA_FILE);
    let text = serde_json::to_string_pretty(&meta)?;
    fs::write(&meta_path, text + "\n").map_err(|e| Error::io(&meta_path, e))?;
    Ok(paths)
}
