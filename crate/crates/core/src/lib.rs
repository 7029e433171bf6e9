//! Generative sequential recommendation over semantic item IDs, trained with
//! joint next-item prediction and masked history reconstruction.
//!
//! Pipeline: [`corpus`] ingests and splits interactions, [`tokenizer`] maps
//! item features to K-codeword semantic IDs, [`model`] is the causal decoder
//! with its losses and optimizer, [`masking`] and [`curriculum`] decide what
//! to mask and when, [`train`] runs the loop, and [`decode`] / [`eval`]
//! rank the catalog and score the rankings.

pub mod corpus;
pub mod curriculum;
pub mod decode;
pub mod error;
pub mod eval;
pub mod masking;
pub mod model;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
pub use model::{ModelConfig, ModelState};
pub use tokenizer::{Catalog, SemanticId};
