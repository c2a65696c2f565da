//! Manifest ingestion, splitting, statistics and image loading.

pub mod image;
pub mod manifest;
pub mod split;
pub mod stats;
pub mod synth;

use std::path::Path;

use rayon::prelude::*;

pub use image::{load_image, Modality, RetinalImage};
pub use manifest::{parse_manifest, resolve_image_path, CaseRecord, DatasetManifest, Split};
pub use split::{split_dataset, SplitSizing};
pub use stats::{word_length_histogram, TextField};
pub use synth::{generate_synthetic_dataset, SynthConfig, SyntheticDataset};

use crate::error::Result;

/// Loads every record's image (relative paths resolve against the manifest
/// directory), converted to the modality the record declares.
pub fn load_images(manifest: &DatasetManifest, manifest_path: &Path) -> Result<Vec<RetinalImage>> {
    manifest
        .records()
        .par_iter()
        .map(|r| Ok(load_image(&resolve_image_path(manifest_path, r))?.with_modality(r.modality)))
        .collect()
}
