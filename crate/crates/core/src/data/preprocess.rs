use serde::{Deserialize, Serialize};

use super::raster::RasterTile;
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub size: usize,
    pub median_filter: bool,
    pub percentile_stretch: bool,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            size: 224,
            median_filter: false,
            percentile_stretch: false,
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::Config("preprocess.size must be positive".into()));
        }
        if self.std.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config("preprocess.std entries must be positive".into()));
        }
        Ok(())
    }
}

/// 3x3 median with edge replication.
pub fn median3x3(tile: &RasterTile) -> RasterTile {
    let (w, h) = (tile.width as isize, tile.height as isize);
    let mut out = Vec::with_capacity(tile.values.len());
    let mut win = [0.0f64; 9];
    for y in 0..h {
        for x in 0..w {
            let mut k = 0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let yy = (y + dy).clamp(0, h - 1) as usize;
                    let xx = (x + dx).clamp(0, w - 1) as usize;
                    win[k] = tile.at(yy, xx);
                    k += 1;
                }
            }
            win.sort_unstable_by(f64::total_cmp);
            out.push(win[4]);
        }
    }
    RasterTile {
        values: out,
        ..tile.clone()
    }
}

/// Linear-interpolated percentile of already sorted data, `p` in [0, 100].
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Clips to the 2nd..98th percentile range.
pub fn percentile_stretch(tile: &RasterTile) -> RasterTile {
    let mut sorted = tile.values.clone();
    sorted.sort_unstable_by(f64::total_cmp);
    let (lo, hi) = (percentile(&sorted, 2.0), percentile(&sorted, 98.0));
    RasterTile {
        values: tile.values.iter().map(|v| v.clamp(lo, hi)).collect(),
        ..tile.clone()
    }
}

/// Min-max to integer 0..=255 with round-half-to-even.
pub fn to_8bit(tile: &RasterTile) -> Result<Vec<u8>> {
    let (lo, hi) = tile.min_max();
    if hi <= lo {
        return Err(Error::Contract(format!("tile has no dynamic range (min = max = {lo})")));
    }
    Ok(tile
        .values
        .iter()
        .map(|v| (255.0 * (v - lo) / (hi - lo)).round_ties_even() as u8)
        .collect())
}

/// Bilinear resampling with half-pixel centres and edge clamping.
pub fn resize_bilinear(src: &[f64], w: usize, h: usize, ow: usize, oh: usize) -> Vec<f64> {
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = s.floor() as usize;
                (i0, (i0 + 1).min(n_in - 1), s - i0 as f64)
            })
            .collect()
    };
    let (ys, xs) = (axis(h, oh), axis(w, ow));
    let mut out = Vec::with_capacity(ow * oh);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// 8-bit grey values resized and scaled to [0, 1], before normalisation.
pub fn unit_image(tile: &RasterTile, cfg: &PreprocessConfig) -> Result<Vec<f64>> {
    let mut t = tile.clone();
    if cfg.median_filter {
        t = median3x3(&t);
    }
    if cfg.percentile_stretch {
        t = percentile_stretch(&t);
    }
    let grey: Vec<f64> = to_8bit(&t)?.into_iter().map(f64::from).collect();
    let resized = resize_bilinear(&grey, t.width, t.height, cfg.size, cfg.size);
    Ok(resized.into_iter().map(|v| v / 255.0).collect())
}

/// Tile -> `[3,S,S]` normalised model input.
pub fn preprocess_tile<T: Real>(tile: &RasterTile, cfg: &PreprocessConfig) -> Result<Tensor<T>> {
    let unit = unit_image(tile, cfg)?;
    let plane = unit.len();
    let mut data = Vec::with_capacity(3 * plane);
    for c in 0..3 {
        data.extend(unit.iter().map(|&v| T::of((v - cfg.mean[c]) / cfg.std[c])));
    }
    Tensor::new(vec![3, cfg.size, cfg.size], data)
}
