use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("tensor shape {shape:?} does not match {len} data elements")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("tensor rank {0} unsupported (expected 1 to 3)")]
    Rank(usize),
    #[error("{op}: non-finite input value")]
    NonFinite { op: &'static str },
    #[error("token id {id} at position {position} is outside vocabulary of {vocab}")]
    TokenOutOfRange {
        position: usize,
        id: u32,
        vocab: usize,
    },
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("tensor `{name}` belongs to cross-attention on self-decoder layer {layer}")]
    OrphanCrossAttention { name: String, layer: usize },
    #[error("unexpected tensor `{0}`")]
    UnknownTensor(String),
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("hypothesis list is empty")]
    EmptyHypotheses,
    #[error("hypothesis {0} has no tokens")]
    EmptyHypothesis(usize),
    #[error("token id {id} in hypothesis {hyp} is a sentinel")]
    SentinelToken { hyp: usize, id: u32 },
    #[error("swap proportion {0} outside [0, 1]")]
    Proportion(f64),
    #[error("word error rate undefined: zero reference words")]
    UndefinedMetric,
    #[error("training diverged: non-finite loss in {stage} epoch {epoch}")]
    Divergence { stage: &'static str, epoch: usize },
}
