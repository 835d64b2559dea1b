use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use log::warn;
use serde::Deserialize;
use walkdir::WalkDir;

use super::manifest::{DatasetManifest, DiscardReason, Sample};
use super::raster::{RasterRegistry, RasterTile};
use crate::error::{Error, Result};

pub const METADATA_FILE: &str = "metadata.json";

#[derive(Clone, Debug, Deserialize)]
pub struct RegionMeta {
    pub flooding: bool,
}

pub fn read_metadata(root: &Path) -> Result<BTreeMap<String, RegionMeta>> {
    let path = root.join(METADATA_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Format {
        path,
        msg: format!("at `{}`: {}", e.path(), e.inner()),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QualityConfig {
    /// Variance floor as a fraction of the squared dynamic range.
    pub min_variance_ratio: f64,
    /// Largest share of pixels any single value may take.
    pub max_mode_fraction: f64,
}

impl Default for QualityConfig {
    fn default() -> Self {
        Self {
            min_variance_ratio: 1e-6,
            max_mode_fraction: 0.99,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Keep,
    Discard(DiscardReason),
}

/// Decides whether a (possibly unreadable) tile is usable.
pub fn quality_filter(tile: &Result<RasterTile>, cfg: &QualityConfig) -> Verdict {
    let Ok(tile) = tile else {
        return Verdict::Discard(DiscardReason::Corrupt);
    };
    let n = tile.values.len();
    let mut sorted = tile.values.clone();
    sorted.sort_unstable_by(f64::total_cmp);
    let mut longest = 0;
    let mut run = 0;
    for i in 0..n {
        run = if i > 0 && sorted[i] == sorted[i - 1] { run + 1 } else { 1 };
        longest = longest.max(run);
    }
    if longest as f64 > cfg.max_mode_fraction * n as f64 {
        return Verdict::Discard(DiscardReason::Uniform);
    }
    let mean = tile.values.iter().sum::<f64>() / n as f64;
    let var = tile.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let range = sorted[n - 1] - sorted[0];
    if var < cfg.min_variance_ratio * range * range {
        return Verdict::Discard(DiscardReason::LowVariance);
    }
    Verdict::Keep
}

/// Enumerates `root/<region>/...` rasters, labels them from
/// `root/metadata.json` and drops tiles failing [`quality_filter`].
/// Samples come back sorted by path, unsplit.
pub fn scan_dataset(root: &Path, band: usize, quality: &QualityConfig) -> Result<DatasetManifest> {
    scan_with(root, band, quality, &RasterRegistry::default())
}

pub fn scan_with(root: &Path, band: usize, quality: &QualityConfig, registry: &RasterRegistry) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("dataset root {} is not a directory", root.display())));
    }
    let metadata = read_metadata(root)?;
    let mut files = Vec::new();
    for entry in WalkDir::new(root).min_depth(2).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Dataset(format!("walking {}: {e}", root.display())))?;
        if entry.file_type().is_file() && registry.handles(entry.path()) {
            files.push(entry.into_path());
        }
    }
    if files.is_empty() {
        return Err(Error::Dataset(format!("no raster tiles under {}", root.display())));
    }
    let mut manifest = DatasetManifest::default();
    for path in files {
        let region = path
            .parent()
            .and_then(|p| p.strip_prefix(root).ok())
            .map(|p| p.to_string_lossy().replace('\\', "/"))
            .unwrap_or_default();
        let tile = registry.load(&path, band);
        if let Verdict::Discard(reason) = quality_filter(&tile, quality) {
            if let Err(e) = &tile {
                warn!("discarding {}: {e}", path.display());
            }
            *manifest.discarded.entry(reason).or_default() += 1;
            continue;
        }
        let label = match metadata.get(&region) {
            Some(m) => m.flooding as u8,
            None => {
                if !manifest.unlabelled_regions.contains(&region) {
                    warn!("region {region:?} has no metadata entry; labelling it non-flooded");
                    manifest.unlabelled_regions.push(region.clone());
                }
                0
            }
        };
        manifest.samples.push(Sample {
            path,
            region_id: region,
            label,
            split: None,
        });
    }
    if manifest.samples.is_empty() {
        return Err(Error::Dataset(format!("every tile under {} was discarded", root.display())));
    }
    Ok(manifest)
}
