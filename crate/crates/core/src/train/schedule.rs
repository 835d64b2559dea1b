use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Linear warmup over `warmup` units then cosine decay to 0 at `total`:
///
/// - `e < W`:  `lr_max * (e + 1) / W`
/// - `e >= W`: `lr_max * (1 + cos(pi * (e - W) / (T - W))) / 2`
pub fn lr_schedule(e: usize, lr_max: f64, warmup: usize, total: usize) -> Result<f64> {
    if e >= total {
        return Err(Error::Contract(format!("schedule position {e} is past the last epoch {}", total.saturating_sub(1))));
    }
    if warmup == 0 || warmup >= total {
        return Err(Error::Config(format!("warmup {warmup} must satisfy 0 < warmup < {total}")));
    }
    Ok(if e < warmup {
        lr_max * (e + 1) as f64 / warmup as f64
    } else {
        lr_max * 0.5 * (1.0 + (PI * (e - warmup) as f64 / (total - warmup) as f64).cos())
    })
}
