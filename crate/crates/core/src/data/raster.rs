//! Single-band raster tiles and the on-disk formats the pipeline reads.
//!
//! Two formats are built in:
//! - binary PGM (`P5`), 8- or 16-bit (big-endian samples), one band;
//! - RF32: `b"RF32"`, width, height, bands as little-endian `u32`, then
//!   `width*height*bands` little-endian `f32`, band-major.
//!
//! Other formats (GeoTIFF and friends) plug in through [`RasterReader`].

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RasterTile {
    pub width: usize,
    pub height: usize,
    pub band: usize,
    /// Row-major samples.
    pub values: Vec<f64>,
}

impl RasterTile {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || values.len() != width * height {
            return Err(Error::Dataset(format!(
                "raster {width}x{height} with {} samples",
                values.len()
            )));
        }
        Ok(Self {
            width,
            height,
            band: 0,
            values,
        })
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// Decoder for one file format.
pub trait RasterReader: Send + Sync {
    /// Lower-case file extensions handled by this reader.
    fn extensions(&self) -> &[&str];
    fn read(&self, bytes: &[u8], band: usize) -> std::result::Result<RasterTile, String>;
}

pub struct Pgm;
pub struct Rf32;

fn fmt_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

impl RasterReader for Pgm {
    fn extensions(&self) -> &[&str] {
        &["pgm"]
    }

    fn read(&self, bytes: &[u8], band: usize) -> std::result::Result<RasterTile, String> {
        if band != 0 {
            return Err(format!("PGM has a single band, requested band {band}"));
        }
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err("truncated PGM header".into());
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| "non-ASCII PGM header")?);
        }
        if fields[0] != "P5" {
            return Err(format!("expected P5 magic, found {:?}", fields[0]));
        }
        let num = |s: &str, what: &str| s.parse::<usize>().map_err(|_| format!("bad PGM {what} {s:?}"));
        let (w, h, maxval) = (num(fields[1], "width")?, num(fields[2], "height")?, num(fields[3], "maxval")?);
        if maxval == 0 || maxval > 65535 {
            return Err(format!("PGM maxval {maxval} out of range"));
        }
        // exactly one whitespace byte separates header from raster
        let data = bytes.get(pos + 1..).ok_or("missing PGM raster")?;
        let n = w * h;
        let values: Vec<f64> = if maxval < 256 {
            if data.len() < n {
                return Err(format!("PGM raster has {} bytes, expected {n}", data.len()));
            }
            data[..n].iter().map(|&b| b as f64).collect()
        } else {
            if data.len() < 2 * n {
                return Err(format!("PGM raster has {} bytes, expected {}", data.len(), 2 * n));
            }
            data[..2 * n].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as f64).collect()
        };
        RasterTile::new(w, h, values).map_err(|e| e.to_string())
    }
}

impl RasterReader for Rf32 {
    fn extensions(&self) -> &[&str] {
        &["rf32"]
    }

    fn read(&self, bytes: &[u8], band: usize) -> std::result::Result<RasterTile, String> {
        if bytes.len() < 16 || &bytes[..4] != b"RF32" {
            return Err("missing RF32 header".into());
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
        let (w, h, bands) = (word(4), word(8), word(12));
        if band >= bands {
            return Err(format!("band {band} requested from a {bands}-band raster"));
        }
        let n = w * h;
        let start = 16 + band * n * 4;
        let data = bytes
            .get(start..start + n * 4)
            .ok_or_else(|| format!("RF32 raster truncated ({} bytes)", bytes.len()))?;
        let values = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let mut tile = RasterTile::new(w, h, values).map_err(|e| e.to_string())?;
        tile.band = band;
        Ok(tile)
    }
}

/// Readers tried by extension, built-ins first.
pub struct RasterRegistry {
    readers: Vec<Box<dyn RasterReader>>,
}

impl Default for RasterRegistry {
    fn default() -> Self {
        Self {
            readers: vec![Box::new(Pgm), Box::new(Rf32)],
        }
    }
}

impl RasterRegistry {
    pub fn register(&mut self, reader: Box<dyn RasterReader>) {
        self.readers.push(reader);
    }

    pub fn handles(&self, path: &Path) -> bool {
        self.reader_for(path).is_some()
    }

    fn reader_for(&self, path: &Path) -> Option<&dyn RasterReader> {
        let ext = path.extension()?.to_str()?.to_ascii_lowercase();
        self.readers
            .iter()
            .find(|r| r.extensions().contains(&ext.as_str()))
            .map(|r| r.as_ref())
    }

    /// Reads one band; non-finite samples are a format error.
    pub fn load(&self, path: &Path, band: usize) -> Result<RasterTile> {
        let reader = self.reader_for(path).ok_or_else(|| fmt_err(path, "unsupported raster extension"))?;
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let tile = reader.read(&bytes, band).map_err(|m| fmt_err(path, m))?;
        if tile.values.iter().any(|v| !v.is_finite()) {
            return Err(fmt_err(path, "non-finite sample"));
        }
        Ok(tile)
    }
}

pub fn load_tile(path: &Path, band: usize) -> Result<RasterTile> {
    RasterRegistry::default().load(path, band)
}

pub fn write_pgm16(path: &Path, width: usize, height: usize, values: &[u16]) -> Result<()> {
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    out.reserve(values.len() * 2);
    for v in values {
        out.extend_from_slice(&v.to_be_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes band-major `bands` planes of `width*height` samples.
pub fn write_rf32(path: &Path, width: usize, height: usize, bands: &[Vec<f32>]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::with_capacity(16 + bands.len() * width * height * 4);
    out.extend_from_slice(b"RF32");
    for v in [width, height, bands.len()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for b in bands {
        if b.len() != width * height {
            return Err(Error::Dataset(format!("band of {} samples for {width}x{height}", b.len())));
        }
        for v in b {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    f.write_all(&out).map_err(|e| Error::io(path, e))
}
