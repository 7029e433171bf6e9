//! Causal decoder over mean-pooled semantic-ID item embeddings, with
//! parallel per-position prediction and reconstruction heads, analytic
//! gradients and an AdamW optimizer.

mod checkpoint;
mod forward;
mod loss;
mod optim;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use forward::{embed_item, forward, head_logits, ForwardCache, HeadSet, ModelInput};
pub use loss::{
    batch_gradients, loss_mask, loss_next, loss_total, next_item_pairs, BatchOutput, LossWeights,
    TargetPair, TrainSequence,
};
pub use optim::{AdamW, LrSchedule, OptimizerState};
pub use params::{Head, Layer, LayerNorm, Params, TensorMut, TensorRef};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Real codewords per position (K = len).
    pub codebook_sizes: Vec<usize>,
    /// Whether every position reserves an extra PAD codeword at index
    /// `codebook_sizes[k]`.
    #[serde(default)]
    pub pad: bool,
    pub hidden_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub temperature: f64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_init_std() -> f64 {
    0.02
}

impl ModelConfig {
    /// Small CPU-friendly configuration.
    pub fn desk(positions: usize, codebook_size: usize) -> Self {
        ModelConfig {
            codebook_sizes: vec![codebook_size; positions],
            pad: false,
            hidden_size: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 128,
            max_seq_len: 50,
            dropout: 0.1,
            temperature: 1.0,
            init_std: 0.02,
        }
    }

    /// Full-size backbone: 32 codebooks of 256, hidden 448, 2 layers,
    /// 4 heads, FFN 1024, dropout 0.3, max length 50.
    pub fn paper_appendix_c() -> Self {
        ModelConfig {
            codebook_sizes: vec![256; 32],
            pad: false,
            hidden_size: 448,
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 1024,
            max_seq_len: 50,
            dropout: 0.3,
            temperature: 1.0,
            init_std: 0.02,
        }
    }

    pub fn positions(&self) -> usize {
        self.codebook_sizes.len()
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.codebook_sizes.is_empty() || self.codebook_sizes.contains(&0) {
            return Err(Error::invalid(
                "model.codebook_sizes",
                "need K >= 1 positions, each with >= 1 codeword",
            ));
        }
        if self.hidden_size == 0 || self.n_heads == 0 || self.hidden_size % self.n_heads != 0 {
            return Err(Error::invalid(
                "model.hidden_size",
                format!(
                    "hidden_size {} must be a positive multiple of n_heads {}",
                    self.hidden_size, self.n_heads
                ),
            ));
        }
        if self.ffn_dim == 0 || self.max_seq_len == 0 {
            return Err(Error::invalid("model", "ffn_dim and max_seq_len must be positive"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid("model.temperature", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("model.dropout", "must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Parameters plus optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: Params,
    pub optimizer: OptimizerState,
}

impl ModelState {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config, seed);
        let optimizer = OptimizerState::new(&config);
        Ok(ModelState {
            config,
            params,
            optimizer,
        })
    }
}
