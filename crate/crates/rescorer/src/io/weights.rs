//! Binary weight files.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "TRSC" version
//! field_count { tag value }*
//! tensor_count { name_len name_utf8 rank dim* f32_le* }*
//! ```
//!
//! Config tags: 1 layers, 2 d_model, 3 d_ff, 4 heads, 5 vocab, 6 encoder
//! input width, 7 self-attention mode (0 causal, 1 full context),
//! 8 max sequence length, 9 a cross-attention layer (repeated once per layer).

use std::path::Path;

use rescorer_core::model::{ModelWeights, RescorerConfig, SelfAttentionMode};
use rescorer_core::{Tensor, TransformerRescorer};

use super::write_atomic;

pub const MAGIC: [u8; 4] = *b"TRSC";
pub const VERSION: u32 = 1;

const TAG_LAYERS: u32 = 1;
const TAG_D_MODEL: u32 = 2;
const TAG_D_FF: u32 = 3;
const TAG_HEADS: u32 = 4;
const TAG_VOCAB: u32 = 5;
const TAG_ENC_IN: u32 = 6;
const TAG_MODE: u32 = 7;
const TAG_MAX_SEQ: u32 = 8;
const TAG_CROSS: u32 = 9;

#[derive(Debug, thiserror::Error)]
pub enum WeightFileError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad magic {0:?}, not a weight file")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {found} (this build reads {VERSION})")]
    Version { found: u32 },
    #[error("file truncated while reading {0}")]
    Truncated(&'static str),
    #[error("duplicate tensor `{0}`")]
    DuplicateTensor(String),
    #[error("unknown config tag {0}")]
    UnknownTag(u32),
    #[error("invalid value {value} for config tag {tag}")]
    BadValue { tag: u32, value: u32 },
    #[error("config field {0} missing")]
    MissingField(&'static str),
    #[error("tensor name is not UTF-8")]
    Utf8,
    #[error("{0} trailing bytes after tensor table")]
    TrailingBytes(usize),
    #[error(transparent)]
    Model(#[from] rescorer_core::Error),
}

impl WeightFileError {
    /// True for failures of the underlying file system rather than of the
    /// file's contents.
    pub fn is_io(&self) -> bool {
        matches!(self, WeightFileError::Io { .. })
    }
}

fn put(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Serializes a configuration and its tensors.
pub fn encode(config: &RescorerConfig, weights: &ModelWeights<f32>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    put(&mut buf, VERSION);
    let mode = match config.self_attention_mode {
        SelfAttentionMode::Causal => 0,
        SelfAttentionMode::FullContext => 1,
    };
    let mut fields = vec![
        (TAG_LAYERS, config.num_layers as u32),
        (TAG_D_MODEL, config.d_model as u32),
        (TAG_D_FF, config.d_ff as u32),
        (TAG_HEADS, config.num_heads as u32),
        (TAG_VOCAB, config.vocab_size as u32),
        (TAG_ENC_IN, config.enc_in_dim as u32),
        (TAG_MODE, mode),
        (TAG_MAX_SEQ, config.max_seq_len as u32),
    ];
    fields.extend(config.cross_attention_layers.iter().map(|&l| (TAG_CROSS, l as u32)));
    put(&mut buf, fields.len() as u32);
    for (tag, value) in fields {
        put(&mut buf, tag);
        put(&mut buf, value);
    }
    put(&mut buf, weights.len() as u32);
    for (name, t) in weights.iter() {
        put(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        put(&mut buf, t.rank() as u32);
        for &d in t.shape() {
            put(&mut buf, d as u32);
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], WeightFileError> {
        if self.bytes.len() < n {
            return Err(WeightFileError::Truncated(what));
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, WeightFileError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Parses a weight file image. The tensors are not yet checked against the
/// configuration; [`load_model`] does that.
pub fn decode(bytes: &[u8]) -> Result<(RescorerConfig, ModelWeights<f32>), WeightFileError> {
    let mut r = Reader { bytes };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(WeightFileError::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(WeightFileError::Version { found: version });
    }

    let mut vals: [Option<u32>; 9] = [None; 9];
    let mut cross = Vec::new();
    for _ in 0..r.u32("config field count")? {
        let tag = r.u32("config tag")?;
        let value = r.u32("config value")?;
        match tag {
            TAG_CROSS => cross.push(value as usize),
            TAG_LAYERS..=TAG_MAX_SEQ => vals[tag as usize] = Some(value),
            _ => return Err(WeightFileError::UnknownTag(tag)),
        }
    }
    let field = |tag: u32, name: &'static str| {
        vals[tag as usize].map(|v| v as usize).ok_or(WeightFileError::MissingField(name))
    };
    let mode = match field(TAG_MODE, "self_attention_mode")? {
        0 => SelfAttentionMode::Causal,
        1 => SelfAttentionMode::FullContext,
        v => {
            return Err(WeightFileError::BadValue {
                tag: TAG_MODE,
                value: v as u32,
            })
        }
    };
    let config = RescorerConfig {
        num_layers: field(TAG_LAYERS, "num_layers")?,
        cross_attention_layers: cross,
        d_model: field(TAG_D_MODEL, "d_model")?,
        d_ff: field(TAG_D_FF, "d_ff")?,
        num_heads: field(TAG_HEADS, "num_heads")?,
        vocab_size: field(TAG_VOCAB, "vocab_size")?,
        enc_in_dim: field(TAG_ENC_IN, "enc_in_dim")?,
        self_attention_mode: mode,
        max_seq_len: field(TAG_MAX_SEQ, "max_seq_len")?,
    };

    let mut weights = ModelWeights::new();
    for _ in 0..r.u32("tensor count")? {
        let len = r.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "tensor name")?).map_err(|_| WeightFileError::Utf8)?;
        let rank = r.u32("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("tensor dims")? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = r.take(count.checked_mul(4).ok_or(WeightFileError::Truncated("tensor data"))?, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if weights.contains(name) {
            return Err(WeightFileError::DuplicateTensor(name.to_string()));
        }
        weights.insert(name, Tensor::new(&shape, data)?);
    }
    if !r.bytes.is_empty() {
        return Err(WeightFileError::TrailingBytes(r.bytes.len()));
    }
    Ok((config, weights))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> WeightFileError + '_ {
    move |source| WeightFileError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes a weight file atomically.
pub fn save_weights(
    path: &Path,
    config: &RescorerConfig,
    weights: &ModelWeights<f32>,
) -> Result<(), WeightFileError> {
    write_atomic(path, &encode(config, weights)).map_err(io_err(path))
}

/// Reads a weight file and builds the model it describes, rejecting missing,
/// misshapen, orphaned or unknown tensors.
pub fn load_model(path: &Path) -> Result<TransformerRescorer<f32>, WeightFileError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let (config, weights) = decode(&bytes)?;
    Ok(TransformerRescorer::build(config, weights)?)
}

/// Reads and validates a weight file, returning its configuration and tensors.
pub fn load_weights(path: &Path) -> Result<(RescorerConfig, ModelWeights<f32>), WeightFileError> {
    let model = load_model(path)?;
    let weights = model.params().to_weights();
    Ok((model.config().clone(), weights))
}

pub fn save_model(path: &Path, model: &TransformerRescorer<f32>) -> Result<(), WeightFileError> {
    save_weights(path, model.config(), &model.params().to_weights())
}
