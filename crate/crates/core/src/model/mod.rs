//! Rescorer architectures and their cost accounting.

mod cost;
mod lstm;
pub(crate) mod transformer;
mod weights;

pub use cost::{CostModel, ParamCount};
pub use lstm::{LstmRescorer, LstmRescorerConfig};
pub use transformer::{
    AdditionalEncoder, CrossAttention, DecoderLayer, LayerNormWeights, RescorerParams, TokenBatch,
    TransformerRescorer,
};
pub use weights::{expected_tensors, random_weights, InitScheme, ModelWeights};

use alloc::format;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SelfAttentionMode {
    /// Position `t` sees hypothesis positions `<= t`.
    Causal,
    /// Every position sees the whole (unpadded) hypothesis.
    FullContext,
}

/// Transformer rescorer hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RescorerConfig {
    pub num_layers: usize,
    /// 1-based indices of the layers that carry cross-attention, ascending.
    /// The remaining layers are self-decoders.
    pub cross_attention_layers: Vec<usize>,
    pub d_model: usize,
    pub d_ff: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub enc_in_dim: usize,
    pub self_attention_mode: SelfAttentionMode,
    /// Upper bound on decoder input positions (SOS plus hypothesis tokens).
    pub max_seq_len: usize,
}

impl RescorerConfig {
    /// Four layers of width 640 with cross-attention on layers 1 and 3.
    pub fn paper() -> Self {
        Self::paper_with_cross(&[1, 3])
    }

    pub fn paper_with_cross(layers: &[usize]) -> Self {
        Self {
            num_layers: 4,
            cross_attention_layers: layers.to_vec(),
            d_model: 640,
            d_ff: 2560,
            num_heads: 8,
            vocab_size: 4096,
            enc_in_dim: 512,
            self_attention_mode: SelfAttentionMode::Causal,
            max_seq_len: 128,
        }
    }

    /// Desk-scale configuration used by tests and toy training.
    pub fn toy() -> Self {
        Self {
            num_layers: 4,
            cross_attention_layers: alloc::vec![1, 3],
            d_model: 16,
            d_ff: 64,
            num_heads: 2,
            vocab_size: 64,
            enc_in_dim: 24,
            self_attention_mode: SelfAttentionMode::Causal,
            max_seq_len: 32,
        }
    }

    /// The paper layout shrunk to width 64 (8 heads of 8) with a 128-piece
    /// vocabulary, small enough for finite-difference checks.
    pub fn paper_scaled() -> Self {
        Self {
            d_model: 64,
            d_ff: 256,
            vocab_size: 128,
            enc_in_dim: 48,
            max_seq_len: 32,
            ..Self::paper()
        }
    }

    pub fn has_cross_attention(&self, layer: usize) -> bool {
        self.cross_attention_layers.contains(&layer)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg| Err(Error::Config(msg));
        if self.num_layers == 0 {
            return fail(alloc::string::String::from("num_layers must be positive"));
        }
        if self.cross_attention_layers.is_empty() {
            return fail(alloc::string::String::from("at least one layer needs cross-attention"));
        }
        if !self.cross_attention_layers.windows(2).all(|w| w[0] < w[1]) {
            return fail(format!(
                "cross_attention_layers {:?} must be strictly ascending",
                self.cross_attention_layers
            ));
        }
        if let Some(&l) = self
            .cross_attention_layers
            .iter()
            .find(|&&l| l == 0 || l > self.num_layers)
        {
            return fail(format!(
                "cross-attention layer {l} outside 1..={}",
                self.num_layers
            ));
        }
        if self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return fail(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.num_heads
            ));
        }
        if self.d_model == 0 || self.d_ff == 0 || self.enc_in_dim == 0 {
            return fail(alloc::string::String::from("layer widths must be positive"));
        }
        if (self.vocab_size as u64) <= crate::vocab::FIRST_PIECE as u64 {
            return fail(format!("vocab_size {} leaves no word pieces", self.vocab_size));
        }
        if self.max_seq_len < 2 {
            return fail(alloc::string::String::from("max_seq_len must be at least 2"));
        }
        Ok(())
    }
}

/// Invocation counts used to check the dependency structure of the engines.
#[derive(Debug, Default)]
pub struct ForwardCounters {
    batched_forwards: AtomicU64,
    sequential_steps: AtomicU64,
}

impl ForwardCounters {
    pub(crate) fn forward(&self) {
        self.batched_forwards.fetch_add(1, Ordering::Relaxed);
    }

    pub(crate) fn step(&self) {
        self.sequential_steps.fetch_add(1, Ordering::Relaxed);
    }

    pub fn batched_forwards(&self) -> u64 {
        self.batched_forwards.load(Ordering::Relaxed)
    }

    pub fn sequential_steps(&self) -> u64 {
        self.sequential_steps.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.batched_forwards.store(0, Ordering::Relaxed);
        self.sequential_steps.store(0, Ordering::Relaxed);
    }
}

impl Clone for ForwardCounters {
    fn clone(&self) -> Self {
        Self::default()
    }
}
