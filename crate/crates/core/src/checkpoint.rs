//! Binary training checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "QVCK" u32:version
//! u64:len  RunConfig as JSON
//! u8:element width (4 = f32, 8 = f64)
//! u64:epochs done  u64:optimizer step
//! u8:has best  u64:best epoch  f64:best macro-F1
//! [u8;32]:rng seed  u64:rng stream  u128:rng word position
//! u32:count, then per parameter: name, shape, value, adam m, adam v
//! u32:count, then per buffer: name, shape, value
//! ```
//!
//! A name is `u32:len` + UTF-8; a shape is `u32:ndim` + `u64` dims.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::HybridModel;
use crate::numerics::{ParamStore, Real, Tensor};
use crate::train::{AdamW, TrainState};

const MAGIC: &[u8; 4] = b"QVCK";
pub const VERSION: u32 = 1;

struct Writer {
    buf: Vec<u8>,
    width: u8,
}

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    fn u32(&mut self, v: usize) {
        self.bytes(&(v as u32).to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    fn name(&mut self, s: &str) {
        self.u32(s.len());
        self.bytes(s.as_bytes());
    }

    fn shape(&mut self, shape: &[usize]) {
        self.u32(shape.len());
        for &d in shape {
            self.u64(d as u64);
        }
    }

    fn data<T: Real>(&mut self, t: &Tensor<T>) {
        for v in t.data() {
            match self.width {
                4 => self.bytes(&(v.as_f64() as f32).to_le_bytes()),
                _ => self.bytes(&v.as_f64().to_le_bytes()),
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    width: u8,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.array()?) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn name(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("non-UTF-8 name".into()))
    }

    fn shape(&mut self) -> Result<Vec<usize>> {
        let n = self.u32()?;
        (0..n).map(|_| Ok(self.u64()? as usize)).collect()
    }

    fn data<T: Real>(&mut self, shape: Vec<usize>) -> Result<Tensor<T>> {
        let numel: usize = shape.iter().product();
        let raw = self.take(numel * self.width as usize)?;
        let values = match self.width {
            4 => raw.chunks_exact(4).map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64)).collect(),
            _ => raw.chunks_exact(8).map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap()))).collect(),
        };
        Tensor::new(shape, values)
    }
}

fn width_of<T: Real>() -> u8 {
    std::mem::size_of::<T>() as u8
}

pub fn encode<T: Real>(config: &RunConfig, state: &TrainState<T>) -> Result<Vec<u8>> {
    let mut w = Writer {
        buf: Vec::new(),
        width: width_of::<T>(),
    };
    w.bytes(MAGIC);
    w.bytes(&VERSION.to_le_bytes());
    let json = serde_json::to_vec(config)?;
    w.u64(json.len() as u64);
    w.bytes(&json);
    w.bytes(&[w.width]);
    w.u64(state.epoch as u64);
    w.u64(state.optimizer.step);
    let (has_best, best_epoch, best_f1) = match state.best {
        Some((e, f)) => (1u8, e as u64, f),
        None => (0, 0, 0.0),
    };
    w.bytes(&[has_best]);
    w.u64(best_epoch);
    w.bytes(&best_f1.to_le_bytes());
    w.bytes(&state.rng.get_seed());
    w.u64(state.rng.get_stream());
    w.bytes(&state.rng.get_word_pos().to_le_bytes());
    w.u32(state.store.len());
    for (name, p) in state.store.params() {
        let (m, v) = state
            .optimizer
            .moments
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("no optimizer state for `{name}`")))?;
        w.name(name);
        w.shape(p.value().shape());
        w.data(p.value());
        w.data(m);
        w.data(v);
    }
    let buffers: Vec<_> = state.store.buffers().collect();
    w.u32(buffers.len());
    for (name, b) in buffers {
        w.name(name);
        w.shape(b.shape());
        w.data(b);
    }
    Ok(w.buf)
}

fn decode_header(r: &mut Reader) -> Result<RunConfig> {
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(r.array()?);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u64()? as usize;
    serde_json::from_slice(r.take(len)?).map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<(RunConfig, TrainState<T>)> {
    let mut r = Reader { buf: bytes, pos: 0, width: 4 };
    let config = decode_header(&mut r)?;
    r.width = r.u8()?;
    if r.width != 4 && r.width != 8 {
        return Err(Error::Checkpoint(format!("unsupported element width {}", r.width)));
    }
    let epoch = r.u64()? as usize;
    let step = r.u64()?;
    let has_best = r.u8()?;
    let best_epoch = r.u64()? as usize;
    let best_f1 = f64::from_le_bytes(r.array()?);
    let mut rng = ChaCha8Rng::from_seed(r.array()?);
    rng.set_stream(r.u64()?);
    rng.set_word_pos(u128::from_le_bytes(r.array()?));

    let mut store = ParamStore::new();
    let mut moments = IndexMap::new();
    for _ in 0..r.u32()? {
        let name = r.name()?;
        let shape = r.shape()?;
        store.register(&name, r.data(shape.clone())?)?;
        let m = r.data(shape.clone())?;
        let v = r.data(shape)?;
        moments.insert(name, (m, v));
    }
    for _ in 0..r.u32()? {
        let name = r.name()?;
        let shape = r.shape()?;
        store.register_buffer(&name, r.data(shape)?)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let optimizer = AdamW {
        config: config.train.adamw(),
        step,
        moments,
    };
    let state = TrainState {
        store,
        optimizer,
        rng,
        epoch,
        best: (has_best == 1).then_some((best_epoch, best_f1)),
    };
    Ok((config, state))
}

/// Writes via a temporary file so an interrupted save never leaves a
/// truncated checkpoint behind.
pub fn save<T: Real>(path: &Path, config: &RunConfig, state: &TrainState<T>) -> Result<()> {
    let bytes = encode(config, state)?;
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(path: &Path) -> Result<(RunConfig, TrainState<T>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// The run configuration stored in a checkpoint, without its tensors.
pub fn read_config(path: &Path) -> Result<RunConfig> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_header(&mut Reader { buf: &bytes, pos: 0, width: 4 })
        .map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
}

/// Rejects resuming or evaluating under a different model definition.
pub fn ensure_compatible(stored: &RunConfig, requested: &RunConfig) -> Result<()> {
    if stored.model.mode != requested.model.mode {
        return Err(Error::Checkpoint(format!(
            "checkpoint was trained in {} mode, config requests {}",
            stored.model.mode, requested.model.mode
        )));
    }
    if stored.model != requested.model {
        return Err(Error::Checkpoint("model configuration differs from the checkpoint's".into()));
    }
    Ok(())
}

/// Checks that the stored tensors are exactly those `model` declares.
pub fn ensure_matches_model<T: Real>(model: &HybridModel, store: &ParamStore<T>) -> Result<()> {
    let has_quanv = store.names().any(|n| n.starts_with("quanv."));
    if has_quanv != model.quanv().is_some() {
        return Err(Error::Checkpoint(format!("checkpoint parameters do not match a {} model", model.mode())));
    }
    if store.num_scalars() != model.num_params() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} parameters, model expects {}",
            store.num_scalars(),
            model.num_params()
        )));
    }
    Ok(())
}
