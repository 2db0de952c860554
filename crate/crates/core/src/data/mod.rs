//! Dataset ingestion, preprocessing, splitting, batching, and synthesis.

mod batch;
mod image;
mod manifest;
mod split;
mod synth;

pub use batch::batch_iterator;
pub use image::{decode_image, encode_pgm, encode_ppm, parse_netpbm, preprocess, resize_bilinear, RgbImage};
pub use manifest::{load_manifest, write_manifest, DatasetManifest, ManifestEntry};
pub use split::{stratified_split, SplitSpec};
pub use synth::{synth_generate, SynthSpec};

use crate::error::Result;
use crate::tensor::Tensor;

/// One preprocessed image with its class id.
#[derive(Debug, Clone)]
pub struct Sample {
    /// `(1, H, W, 3)` with values in `[0, 1]`.
    pub pixels: Tensor,
    pub label: usize,
}

/// Decodes and preprocesses every entry of `manifest` at `size`.
pub fn load_samples(manifest: &DatasetManifest, size: (usize, usize)) -> Result<Vec<Sample>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            let raw = decode_image(&e.path)?;
            Ok(Sample {
                pixels: preprocess(&raw, size)?,
                label: e.label_id,
            })
        })
        .collect()
}
