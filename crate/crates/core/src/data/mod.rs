//! Dataset curation: scanning, quality control, preprocessing, splitting,
//! class-balanced sampling, augmentation and a synthetic tile generator.

pub mod augment;
pub mod manifest;
pub mod preprocess;
pub mod raster;
pub mod sampler;
pub mod scan;
pub mod split;
pub mod synth;


pub use augment::{AugmentConfig, Augmenter};
pub use manifest::{DatasetManifest, DiscardReason, Label, Sample, Split, CLASS_NAMES};
pub use preprocess::{preprocess_tile, PreprocessConfig};
pub use raster::{load_tile, RasterReader, RasterRegistry, RasterTile};
pub use sampler::WeightedSampler;
pub use scan::{quality_filter, scan_dataset, QualityConfig, Verdict};
pub use split::{split_dataset, Granularity, SplitConfig};
pub use synth::{synth_generate, SynthConfig};
