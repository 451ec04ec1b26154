//! Second-pass N-best rescoring: a Transformer rescorer with configurable
//! cross-attention placement, an LSTM baseline, CE/MWER training and int8
//! dynamic-range quantized inference.
//!
//! The crate is `no_std` (it needs `alloc`). Parallel work is expressed through
//! the [`exec::Executor`] trait so that hosts with threads can plug in a worker
//! pool while results stay bit-identical for any worker count.
#![no_std]

extern crate alloc;

pub mod error;
pub mod exec;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod quant;
pub mod scoring;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use exec::{Executor, Sequential};
pub use model::{
    LstmRescorer, LstmRescorerConfig, ModelWeights, RescorerConfig, SelfAttentionMode,
    TransformerRescorer,
};
pub use quant::QuantizedMatrix;
pub use scoring::{Hypothesis, NBestList, RescoreResult};
pub use tensor::{Scalar, Tensor};
