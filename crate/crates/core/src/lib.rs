// SPDX-License-Identifier: MIT OR Apache-2.0

//! Circuit discovery and steering for GPT-2-style transformers by geometric
//! alignment with answer-token directions.

pub mod component;
pub mod datasets;
pub mod edges;
pub mod error;
pub mod eval;
pub mod fingerprint;
pub mod model;
pub mod ops;
pub mod steering;
pub mod tokenizer;
pub mod toy;

pub use component::{Channel, ComponentId};
pub use error::{Error, ErrorKind, Result};
pub use model::{ActivationCache, CoalitionSpec, Intervention, Model, ModelConfig};
pub use tokenizer::Tokenizer;
