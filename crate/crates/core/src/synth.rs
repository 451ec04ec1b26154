//! Synthetic rescoring task: random word-piece references, noisy feature
//! frames derived from them, and a frozen first-pass stub that emits N-best
//! lists with random edit errors.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::metrics::{self, WerStats};
use crate::nn;
use crate::scoring::{Hypothesis, NBestList};
use crate::tensor::Tensor;
use crate::vocab::{Vocabulary, FIRST_PIECE};

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTaskConfig {
    pub vocab_size: usize,
    pub enc_in_dim: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Feature frames per reference token.
    pub frames_per_token: usize,
    pub feature_noise: f64,
    /// Per-token probability of an edit in a first-pass hypothesis.
    pub error_rate: f64,
    pub beam: usize,
    /// First-pass score: `-edits * edit_penalty + N(0, score_noise)`.
    pub edit_penalty: f64,
    pub score_noise: f64,
}

impl Default for ToyTaskConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            enc_in_dim: 24,
            min_len: 3,
            max_len: 12,
            frames_per_token: 2,
            feature_noise: 0.3,
            error_rate: 0.2,
            beam: 4,
            edit_penalty: 1.0,
            score_noise: 1.5,
        }
    }
}

/// One synthetic utterance with its reference tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyUtterance {
    pub reference: Vec<u32>,
    pub nbest: NBestList<f32>,
}

#[derive(Debug, Clone)]
pub struct ToyTask {
    config: ToyTaskConfig,
    vocabulary: Vocabulary,
    token_features: Tensor<f32>,
    seed: u64,
}

impl ToyTask {
    pub fn new(config: ToyTaskConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 1.0).expect("valid std");
        let token_features = Tensor::from_fn(&[config.vocab_size, config.enc_in_dim], |_| {
            normal.sample(&mut rng)
        });
        Self {
            vocabulary: Vocabulary::synthetic(config.vocab_size),
            config,
            token_features,
            seed,
        }
    }

    pub fn config(&self) -> &ToyTaskConfig {
        &self.config
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    fn random_piece(&self, rng: &mut ChaCha8Rng) -> u32 {
        rng.random_range(FIRST_PIECE..self.config.vocab_size as u32)
    }

    /// Frame `f` carries the features of token `f / frames_per_token`, a
    /// sinusoid of that token's index, and Gaussian noise.
    pub fn features(&self, reference: &[u32], rng: &mut impl Rng) -> Tensor<f32> {
        let c = &self.config;
        let noise = Normal::new(0.0f32, c.feature_noise as f32).expect("valid std");
        let frames = reference.len() * c.frames_per_token;
        let dim = c.enc_in_dim;
        Tensor::from_fn(&[frames, dim], |i| {
            let (f, ch) = (i / dim, i % dim);
            let tok = f / c.frames_per_token;
            self.token_features.row(reference[tok] as usize)[ch]
                + nn::positional_encoding::<f32>(tok, ch, dim)
                + noise.sample(rng)
        })
    }

    fn edit(&self, reference: &[u32], rng: &mut ChaCha8Rng) -> (Vec<u32>, usize) {
        let mut out = Vec::with_capacity(reference.len() + 2);
        let mut edits = 0;
        for &tok in reference {
            if !rng.random_bool(self.config.error_rate) {
                out.push(tok);
                continue;
            }
            edits += 1;
            match rng.random_range(0..3) {
                0 => loop {
                    let r = self.random_piece(rng);
                    if r != tok {
                        out.push(r);
                        break;
                    }
                },
                1 => {}
                _ => {
                    out.push(tok);
                    out.push(self.random_piece(rng));
                }
            }
        }
        if out.is_empty() {
            out.push(self.random_piece(rng));
            edits += 1;
        }
        (out, edits)
    }

    /// The first-pass stub: `beam` distinct-where-possible edited copies of
    /// the reference, sorted by their noisy first-pass score.
    pub fn first_pass(&self, reference: &[u32], rng: &mut ChaCha8Rng) -> Vec<Hypothesis> {
        let noise = Normal::new(0.0, self.config.score_noise).expect("valid std");
        let mut hyps: Vec<Hypothesis> = Vec::with_capacity(self.config.beam);
        for _ in 0..self.config.beam {
            let mut attempt = self.edit(reference, rng);
            for _ in 0..16 {
                if !hyps.iter().any(|h| h.tokens == attempt.0) {
                    break;
                }
                attempt = self.edit(reference, rng);
            }
            let (tokens, edits) = attempt;
            let score = -(edits as f64) * self.config.edit_penalty + noise.sample(rng);
            hyps.push(Hypothesis {
                tokens,
                first_pass_log_prob: score,
            });
        }
        hyps.sort_by(|a, b| b.first_pass_log_prob.total_cmp(&a.first_pass_log_prob));
        hyps
    }

    /// Utterance number `index` of the stream identified by `stream`.
    pub fn utterance(&self, stream: u64, index: u64) -> ToyUtterance {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x9e37_79b9_7f4a_7c15);
        rng.set_stream(stream.wrapping_mul(1 << 32).wrapping_add(index));
        let c = &self.config;
        let len = rng.random_range(c.min_len..=c.max_len);
        let reference: Vec<u32> = (0..len).map(|_| self.random_piece(&mut rng)).collect();
        let features = self.features(&reference, &mut rng);
        let hyps = self.first_pass(&reference, &mut rng);
        ToyUtterance {
            nbest: NBestList {
                uid: format!("toy-{stream}-{index}"),
                features,
                hyps,
                reference_words: Some(self.vocabulary.detokenize(&reference)),
            },
            reference,
        }
    }

    pub fn dataset(&self, stream: u64, n: usize) -> Vec<ToyUtterance> {
        (0..n as u64).map(|i| self.utterance(stream, i)).collect()
    }

    /// Word-level errors of `hyp` against `reference` tokens.
    pub fn word_errors(&self, reference: &[u32], hyp: &[u32]) -> WerStats {
        metrics::word_errors(&self.vocabulary.detokenize(reference), &self.vocabulary.detokenize(hyp))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::is_sentinel;

    #[test]
    fn utterances_are_deterministic_and_well_formed() {
        let task = ToyTask::new(ToyTaskConfig::default(), 5);
        let a = task.utterance(0, 3);
        assert_eq!(a, task.utterance(0, 3));
        assert_ne!(a, task.utterance(1, 3));
        let n = a.reference.len();
        assert!((3..=12).contains(&n));
        assert_eq!(a.nbest.features.shape(), [2 * n, 24]);
        assert_eq!(a.nbest.hyps.len(), 4);
        for h in &a.nbest.hyps {
            assert!(!h.tokens.is_empty());
            assert!(h.tokens.iter().all(|&t| !is_sentinel(t) && t < 64));
        }
        let scores: Vec<f64> = a.nbest.hyps.iter().map(|h| h.first_pass_log_prob).collect();
        assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn stub_error_rate_is_near_target() {
        let task = ToyTask::new(ToyTaskConfig::default(), 1);
        let (mut edits, mut words) = (0usize, 0usize);
        for u in task.dataset(0, 300) {
            for h in &u.nbest.hyps {
                let ids = |t: &[u32]| t.iter().map(|v| format!("{v}")).collect::<Vec<_>>();
                let s = metrics::word_errors(&ids(&u.reference), &ids(&h.tokens));
                edits += s.errors();
                words += s.reference_words;
            }
        }
        let rate = edits as f64 / words as f64;
        assert!((0.12..0.25).contains(&rate), "{rate}");
    }
}
