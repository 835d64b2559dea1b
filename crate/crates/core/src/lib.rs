//! Hybrid quantum-classical vision transformer for binary flood classification.
//!
//! The model runs two branches over a 3-channel image: a quanvolutional branch
//! that evaluates a 4-qubit parameterized circuit on each 2x2 patch of a
//! learned 8x8 grid, and a Vision Transformer branch. Their outputs are
//! concatenated (quantum features first) and fed to an MLP classifier that
//! emits two logits (0 = non-flooded, 1 = flooded).
//!
//! Module map:
//! - [`numerics`]: dense tensors with a reverse-mode gradient tape.
//! - [`quantum`]: exact statevector simulation and parameter-shift gradients.
//! - [`quanv`]: the quantum feature pathway.
//! - [`vit`]: Vision Transformer backbone.
//! - [`model`]: fusion, classifier head and the classical baseline.
//! - [`data`]: dataset scanning, quality control, preprocessing, splits and
//!   sampling, plus a synthetic tile generator.
//! - [`train`]: AdamW, warmup-cosine schedule, training loop and metrics.
//! - [`checkpoint`], [`config`]: persistence and run configuration.
//! - [`session`]: end-to-end training, evaluation and prediction runs.
//! - [`verify`]: finite-difference and oracle suites used by `qviton gradcheck`.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod numerics;
pub mod quantum;
pub mod quanv;
pub mod session;
pub mod train;
pub mod verify;
pub mod vit;

pub use error::{Error, Result};
