// SPDX-License-Identifier: MIT OR Apache-2.0

//! GPT-2-style decoder: weights, forward passes, activation cache and
//! intervention points.

mod cache;
mod config;
mod forward;
mod intervention;
mod weights;

pub use cache::ActivationCache;
pub use config::ModelConfig;
pub use forward::LogitRows;
pub use intervention::{CoalitionSpec, Intervention, InterventionKind, Position, Site};
pub use weights::{
    expected_tensors, file_hash, load_from_bytes, load_model, model_files, sha256_hex,
    LayerWeights, ManifestEntry, Model, ShapeManifest, CONFIG_FILE, MANIFEST_FILE, WEIGHTS_FILE,
};
