//! Parameter and multiply-accumulate accounting.
//!
//! FLOPs are counted as multiply-accumulates of the dense projections on the
//! token path of one hypothesis, one MAC per FLOP. A hypothesis of `n`
//! tokens occupies `n + 1` decoder positions (SOS plus tokens in, tokens plus
//! EOS out). Work on the encoder side (additional encoder, cross-attention
//! key/value projections, LSTM attention keys) is shared by every hypothesis
//! of an utterance and left out, as are attention dot products, embedding
//! lookups, biases and nonlinearities.

use super::{LstmRescorerConfig, RescorerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    /// Decoder side: embeddings, decoder layers and output projection.
    pub rescorer: u64,
    /// The encoder-output adapter.
    pub additional_encoder: u64,
}

impl ParamCount {
    pub fn total(&self) -> u64 {
        self.rescorer + self.additional_encoder
    }
}

pub trait CostModel {
    fn param_count(&self) -> ParamCount;

    /// MACs to score one hypothesis of `hyp_len` tokens.
    fn flops_per_hypothesis(&self, hyp_len: usize) -> u64;
}

fn tally<'a>(shapes: impl Iterator<Item = &'a (alloc::string::String, alloc::vec::Vec<usize>)>) -> ParamCount {
    let mut count = ParamCount {
        rescorer: 0,
        additional_encoder: 0,
    };
    for (name, shape) in shapes {
        let n = shape.iter().product::<usize>() as u64;
        if name.starts_with("encoder.") {
            count.additional_encoder += n;
        } else {
            count.rescorer += n;
        }
    }
    count
}

impl CostModel for RescorerConfig {
    fn param_count(&self) -> ParamCount {
        tally(super::expected_tensors(self).iter())
    }

    fn flops_per_hypothesis(&self, hyp_len: usize) -> u64 {
        let d = self.d_model as u64;
        let self_attn = 4 * d * d;
        let ffn = 2 * d * self.d_ff as u64;
        // Query and output projections; keys and values come from the encoder.
        let cross = 2 * d * d;
        let layers: u64 = (1..=self.num_layers)
            .map(|l| self_attn + ffn + if self.has_cross_attention(l) { cross } else { 0 })
            .sum();
        let per_position = layers + d * self.vocab_size as u64;
        per_position * (hyp_len as u64 + 1)
    }
}

impl CostModel for LstmRescorerConfig {
    fn param_count(&self) -> ParamCount {
        tally(self.expected_tensors().iter())
    }

    fn flops_per_hypothesis(&self, hyp_len: usize) -> u64 {
        let h = self.hidden as u64;
        let gates: u64 = (0..self.num_layers)
            .map(|l| 4 * h * (self.layer_input(l) as u64 + h))
            .sum();
        let query = h * self.attention_dim as u64;
        let output = h * self.vocab_size as u64;
        (gates + query + output) * (hyp_len as u64 + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent closed-form tally of the shape list.
    fn symbolic(c: &RescorerConfig) -> u64 {
        let (d, ff, v, e) = (
            c.d_model as u64,
            c.d_ff as u64,
            c.vocab_size as u64,
            c.enc_in_dim as u64,
        );
        let attn = 4 * (d * d + d);
        let norm = 2 * d;
        let layer = attn + norm + (d * ff + ff) + (ff * d + d) + norm;
        let cross = (attn + norm) * c.cross_attention_layers.len() as u64;
        let encoder = (e * d + d) + (d * d + d);
        v * d + layer * c.num_layers as u64 + cross + (d * v + v) + encoder
    }

    #[test]
    fn toy_count_matches_symbolic_tally() {
        let c = RescorerConfig::toy();
        assert_eq!(c.param_count().total(), symbolic(&c));
        let p = RescorerConfig::paper();
        assert_eq!(p.param_count().total(), symbolic(&p));
    }

    #[test]
    fn paper_count_near_published_size() {
        let n = RescorerConfig::paper().param_count().rescorer as f64;
        assert!((n / 27.6e6 - 1.0).abs() <= 0.05, "{n}");
    }

    #[test]
    fn removing_cross_attention_saves_ten_to_thirteen_percent() {
        let four = RescorerConfig::paper_with_cross(&[1, 2, 3, 4]).param_count().rescorer as f64;
        let two = RescorerConfig::paper().param_count().rescorer as f64;
        let frac = (four - two) / four;
        assert!((0.10..=0.13).contains(&frac), "{frac}");
    }

    #[test]
    fn monotone_in_dimensions() {
        let base = RescorerConfig::toy();
        let n = base.param_count().total();
        let more = [
            RescorerConfig { cross_attention_layers: alloc::vec![1, 2, 3], ..base.clone() },
            RescorerConfig { d_ff: 65, ..base.clone() },
            RescorerConfig { d_model: 18, ..base.clone() },
            RescorerConfig { vocab_size: 65, ..base.clone() },
        ];
        for c in more {
            assert!(c.param_count().total() > n, "{c:?}");
        }
    }

    #[test]
    fn flops_triple() {
        let two = RescorerConfig::paper().flops_per_hypothesis(12) as f64;
        let four = RescorerConfig::paper_with_cross(&[1, 2, 3, 4]).flops_per_hypothesis(12) as f64;
        let lstm = LstmRescorerConfig::baseline().flops_per_hypothesis(12) as f64;
        assert!((two / 320e6 - 1.0).abs() <= 0.10, "{two}");
        assert!((four / 340e6 - 1.0).abs() <= 0.10, "{four}");
        assert!((lstm / 400e6 - 1.0).abs() <= 0.10, "{lstm}");
        assert!(two < four && four < lstm);
    }

    #[test]
    fn lstm_baseline_size() {
        let n = LstmRescorerConfig::baseline().param_count().total() as f64;
        assert!((n / 33e6 - 1.0).abs() <= 0.10, "{n}");
    }
}
