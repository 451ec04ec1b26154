//! JSON-lines N-best files.
//!
//! One record per line:
//!
//! ```text
//! {"uid": "utt1", "features": "feats/utt1.f32", "hyps": [{"tokens": [5, 9], "score": -1.5}], "ref": "w5 w9"}
//! ```
//!
//! `features` is either a path, relative to the N-best file, of a raw
//! feature file (`u32` frames, `u32` width, then `f32` values, all
//! little-endian) or `synthetic:seed=S,frames=T` for seeded uniform noise.

use std::fs::File;
use std::io::{self, BufRead, BufReader, Lines};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use rescorer_core::{Hypothesis, NBestList, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum NBestError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{uid}: {source}")]
    Features { uid: String, source: FeatureError },
}

impl NBestError {
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            NBestError::Io { .. }
                | NBestError::Features {
                    source: FeatureError::Io(_),
                    ..
                }
        )
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HypRecord {
    pub tokens: Vec<u32>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NBestRecord {
    pub uid: String,
    pub features: String,
    pub hyps: Vec<HypRecord>,
    #[serde(rename = "ref", default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureSource {
    File(PathBuf),
    Synthetic { seed: u64, frames: usize },
}

impl FeatureSource {
    fn parse(spec: &str, base: &Path) -> Result<Self, String> {
        let Some(rest) = spec.strip_prefix("synthetic:") else {
            return Ok(FeatureSource::File(base.join(spec)));
        };
        let (mut seed, mut frames) = (None, None);
        for part in rest.split(',') {
            let (k, v) = part.split_once('=').ok_or_else(|| format!("bad synthetic spec `{spec}`"))?;
            let v = v.trim();
            match k.trim() {
                "seed" => seed = v.parse().ok(),
                "frames" => frames = v.parse().ok(),
                other => return Err(format!("unknown synthetic key `{other}`")),
            }
        }
        match (seed, frames) {
            (Some(seed), Some(frames)) => Ok(FeatureSource::Synthetic { seed, frames }),
            _ => Err(format!("synthetic spec `{spec}` needs numeric seed and frames")),
        }
    }

    /// Loads a `frames x dim` feature matrix.
    pub fn load(&self, dim: usize) -> Result<Tensor<f32>, FeatureError> {
        match self {
            FeatureSource::Synthetic { seed, frames } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                Ok(Tensor::from_fn(&[*frames, dim], |_| rng.random_range(-1.0..1.0)))
            }
            FeatureSource::File(path) => {
                let bytes = std::fs::read(path)
                    .map_err(|e| FeatureError::Io(format!("{}: {e}", path.display())))?;
                decode_features(&bytes, dim)
                    .map_err(|e| FeatureError::Invalid(format!("{}: {e}", path.display())))
            }
        }
    }
}

/// Raw feature-file image of a `T x dim` matrix.
pub fn encode_features(features: &Tensor<f32>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(8 + 4 * features.len());
    buf.extend_from_slice(&(features.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(features.cols() as u32).to_le_bytes());
    for v in features.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_features(bytes: &[u8], dim: usize) -> Result<Tensor<f32>, String> {
    if bytes.len() < 8 {
        return Err("feature file truncated".into());
    }
    let frames = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
    let width = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    if width != dim {
        return Err(format!("feature width {width}, model expects {dim}"));
    }
    let body = &bytes[8..];
    if body.len() != frames * width * 4 {
        return Err(format!("{} data bytes for {frames} x {width} features", body.len()));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(&[frames, width], data).map_err(|e| e.to_string())
}

/// A parsed record whose features have not been read yet.
#[derive(Debug, Clone, PartialEq)]
pub struct PendingNBest {
    pub line: usize,
    pub record: NBestRecord,
    pub features: FeatureSource,
}

impl PendingNBest {
    /// Reads the features and assembles the N-best list.
    pub fn load(&self, dim: usize) -> Result<NBestList<f32>, NBestError> {
        let features = self.features.load(dim).map_err(|source| NBestError::Features {
            uid: self.record.uid.clone(),
            source,
        })?;
        Ok(NBestList {
            uid: self.record.uid.clone(),
            features,
            hyps: self
                .record
                .hyps
                .iter()
                .map(|h| Hypothesis {
                    tokens: h.tokens.clone(),
                    first_pass_log_prob: h.score,
                })
                .collect(),
            reference_words: self
                .record
                .reference
                .as_ref()
                .map(|r| r.split_whitespace().map(str::to_string).collect()),
        })
    }
}

/// Streaming reader over an N-best file. Blank lines are skipped.
pub struct NBestReader<R> {
    lines: Lines<R>,
    base: PathBuf,
    line: usize,
}

impl<R: BufRead> NBestReader<R> {
    pub fn new(reader: R, base: impl Into<PathBuf>) -> Self {
        Self {
            lines: reader.lines(),
            base: base.into(),
            line: 0,
        }
    }
}

impl<R: BufRead> Iterator for NBestReader<R> {
    type Item = Result<PendingNBest, NBestError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let text = match self.lines.next()? {
                Ok(t) => t,
                Err(e) => {
                    return Some(Err(NBestError::Parse {
                        line: self.line + 1,
                        message: e.to_string(),
                    }))
                }
            };
            self.line += 1;
            if text.trim().is_empty() {
                continue;
            }
            let line = self.line;
            let parsed = serde_json::from_str::<NBestRecord>(&text)
                .map_err(|e| e.to_string())
                .and_then(|record| {
                    let features = FeatureSource::parse(&record.features, &self.base)?;
                    Ok(PendingNBest {
                        line,
                        record,
                        features,
                    })
                });
            return Some(parsed.map_err(|message| NBestError::Parse { line, message }));
        }
    }
}

/// Opens `path` for streaming. Relative feature paths resolve against the
/// file's directory.
pub fn parse_nbest(path: &Path) -> Result<NBestReader<BufReader<File>>, NBestError> {
    let file = File::open(path).map_err(|source| NBestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(NBestReader::new(BufReader::new(file), base))
}

/// One JSON line for `record`.
pub fn to_line(record: &NBestRecord) -> String {
    serde_json::to_string(record).expect("records serialize")
}
