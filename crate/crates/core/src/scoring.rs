//! N-best rescoring: second-pass sequence log-probabilities, score
//! combination and ranking.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::model::{LstmRescorer, TokenBatch, TransformerRescorer};
use crate::tensor::{self, Scalar, Tensor};
use crate::vocab::{self, EOS, SOS};

/// One first-pass hypothesis. Tokens carry no SOS/EOS; the engine adds them.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub first_pass_log_prob: f64,
}

/// The first-pass output for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct NBestList<T = f32> {
    pub uid: String,
    /// `T x enc_in_dim` first-pass encoder features.
    pub features: Tensor<T>,
    pub hyps: Vec<Hypothesis>,
    pub reference_words: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RescoreResult {
    pub second_pass_log_prob: Vec<f64>,
    pub combined_score: Vec<f64>,
    /// Hypothesis indices, best first.
    pub ranking: Vec<usize>,
    pub batch_size_used: usize,
}

/// `sum_t log softmax(logits_t)[targets_t]` over the first `targets.len()`
/// rows of an `s x V` logits matrix.
pub fn sequence_log_prob<T: Scalar>(logits: &Tensor<T>, targets: &[u32]) -> Result<f64> {
    if logits.rows() < targets.len() {
        return Err(Error::Length(alloc::format!(
            "{} logit rows for {} targets",
            logits.rows(),
            targets.len()
        )));
    }
    log_prob_rows(logits.data(), logits.cols(), targets)
}

pub(crate) fn log_prob_rows<T: Scalar>(logits: &[T], vocab: usize, targets: &[u32]) -> Result<f64> {
    let mut total = 0.0;
    for (t, &y) in targets.iter().enumerate() {
        let row = &logits[t * vocab..(t + 1) * vocab];
        let y = y as usize;
        if y >= vocab {
            return Err(Error::TokenOutOfRange {
                position: t,
                id: y as u32,
                vocab,
            });
        }
        total += (row[y] - tensor::log_sum_exp(row)).as_f64();
    }
    Ok(total)
}

/// `lambda * first + second`.
pub fn combine_scores(first: f64, second: f64, lambda: f64) -> f64 {
    lambda * first + second
}

/// Indices sorted by descending score; ties keep the lower index first.
pub fn rank(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

fn check_hypotheses(hyps: &[Hypothesis]) -> Result<()> {
    if hyps.is_empty() {
        return Err(Error::EmptyHypotheses);
    }
    for (i, h) in hyps.iter().enumerate() {
        if h.tokens.is_empty() {
            return Err(Error::EmptyHypothesis(i));
        }
        if let Some(&id) = h.tokens.iter().find(|&&id| vocab::is_sentinel(id)) {
            return Err(Error::SentinelToken { hyp: i, id });
        }
    }
    Ok(())
}

/// A second-pass model that assigns `log P(y | x)` to whole hypotheses.
pub trait HypothesisScorer<T: Scalar> {
    /// Second-pass log-probability of each hypothesis, EOS included.
    fn score_hypotheses(
        &self,
        exec: &dyn Executor,
        features: &Tensor<T>,
        hyps: &[Hypothesis],
    ) -> Result<Vec<f64>>;

    /// Work items processed together in one scoring step.
    fn batch_size(&self, hyps: &[Hypothesis]) -> usize;
}

impl<T: Scalar> HypothesisScorer<T> for TransformerRescorer<T> {
    /// Encodes once, then scores all hypotheses in a single batched pass.
    fn score_hypotheses(
        &self,
        exec: &dyn Executor,
        features: &Tensor<T>,
        hyps: &[Hypothesis],
    ) -> Result<Vec<f64>> {
        let e = self.encode(exec, features)?;
        let seqs: Vec<&[u32]> = hyps.iter().map(|h| h.tokens.as_slice()).collect();
        let batch = TokenBatch::from_hypotheses(&seqs);
        let logits = self.forward(exec, &e, &batch)?;
        let (s, v) = (batch.seq_len(), self.config().vocab_size);
        (0..batch.batch_size())
            .map(|b| {
                let len = batch.lengths()[b];
                log_prob_rows(
                    &logits.data()[b * s * v..(b * s + len) * v],
                    v,
                    &batch.targets()[b * s..b * s + len],
                )
            })
            .collect()
    }

    /// `hyps x padded hypothesis length x heads`.
    fn batch_size(&self, hyps: &[Hypothesis]) -> usize {
        let longest = hyps.iter().map(|h| h.tokens.len()).max().unwrap_or(0);
        hyps.len() * longest * self.config().num_heads
    }
}

impl<T: Scalar> HypothesisScorer<T> for LstmRescorer<T> {
    /// Encodes once, then scores each hypothesis step by step.
    fn score_hypotheses(
        &self,
        exec: &dyn Executor,
        features: &Tensor<T>,
        hyps: &[Hypothesis],
    ) -> Result<Vec<f64>> {
        let e = self.encode(exec, features)?;
        hyps.iter()
            .map(|h| {
                let mut inputs = Vec::with_capacity(h.tokens.len() + 1);
                inputs.push(SOS);
                inputs.extend_from_slice(&h.tokens);
                let mut targets = h.tokens.clone();
                targets.push(EOS);
                let logits = self.forward(&e, &inputs)?;
                sequence_log_prob(&logits, &targets)
            })
            .collect()
    }

    /// One step handles the four gates of one hypothesis.
    fn batch_size(&self, _hyps: &[Hypothesis]) -> usize {
        4
    }
}

/// Scores every hypothesis of `nbest` with the second-pass model and ranks
/// them by `lambda * first_pass + second_pass`.
pub fn rescore_nbest<T: Scalar, S: HypothesisScorer<T> + ?Sized>(
    scorer: &S,
    exec: &dyn Executor,
    nbest: &NBestList<T>,
    lambda: f64,
) -> Result<RescoreResult> {
    check_hypotheses(&nbest.hyps)?;
    let second = scorer.score_hypotheses(exec, &nbest.features, &nbest.hyps)?;
    let combined: Vec<f64> = nbest
        .hyps
        .iter()
        .zip(&second)
        .map(|(h, &s)| combine_scores(h.first_pass_log_prob, s, lambda))
        .collect();
    Ok(RescoreResult {
        ranking: rank(&combined),
        batch_size_used: scorer.batch_size(&nbest.hyps),
        second_pass_log_prob: second,
        combined_score: combined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::Sequential;
    use crate::model::RescorerConfig;
    use alloc::vec;

    #[test]
    fn uniform_logits_give_length_times_log_vocab() {
        let logits = Tensor::<f64>::zeros(&[4, 10]);
        let lp = sequence_log_prob(&logits, &[5, 6, 7, 2]).unwrap();
        assert!((lp + 4.0 * 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_logits_give_zero() {
        let mut logits = Tensor::<f64>::full(&[2, 6], -60.0);
        logits.row_mut(0)[5] = 60.0;
        logits.row_mut(1)[2] = 60.0;
        assert!(sequence_log_prob(&logits, &[5, 2]).unwrap().abs() < 1e-40);
        assert!(sequence_log_prob(&logits, &[5, 2, 2]).is_err());
    }

    #[test]
    fn combine_examples() {
        assert_eq!(combine_scores(-7.0, -3.0, 0.0), -3.0);
        assert_eq!(combine_scores(-2.0, -3.0, 1.0), -5.0);
    }

    #[test]
    fn rank_breaks_ties_by_index() {
        assert_eq!(rank(&[-1.0, -0.5, -1.0, -0.5]), [1, 3, 0, 2]);
        assert_eq!(rank(&[3.0]), [0]);
    }

    fn nbest(hyps: Vec<Vec<u32>>) -> NBestList<f32> {
        NBestList {
            uid: "u".into(),
            features: Tensor::full(&[6, 24], 0.3),
            hyps: hyps
                .into_iter()
                .enumerate()
                .map(|(i, tokens)| Hypothesis { tokens, first_pass_log_prob: -(i as f64) })
                .collect(),
            reference_words: None,
        }
    }

    #[test]
    fn single_hypothesis_ranks_first() {
        let m = TransformerRescorer::<f32>::random(RescorerConfig::toy(), 9).unwrap();
        let r = rescore_nbest(&m, &Sequential, &nbest(vec![vec![7, 8]]), 0.5).unwrap();
        assert_eq!(r.ranking, [0]);
        assert_eq!(m.counters().batched_forwards(), 1);
    }

    #[test]
    fn invalid_lists_are_rejected() {
        let m = TransformerRescorer::<f32>::random(RescorerConfig::toy(), 9).unwrap();
        assert_eq!(
            rescore_nbest(&m, &Sequential, &nbest(vec![]), 0.0).err(),
            Some(Error::EmptyHypotheses)
        );
        assert_eq!(
            rescore_nbest(&m, &Sequential, &nbest(vec![vec![6], vec![]]), 0.0).err(),
            Some(Error::EmptyHypothesis(1))
        );
        assert_eq!(
            rescore_nbest(&m, &Sequential, &nbest(vec![vec![6, EOS]]), 0.0).err(),
            Some(Error::SentinelToken { hyp: 0, id: EOS })
        );
        assert!(matches!(
            rescore_nbest(&m, &Sequential, &nbest(vec![vec![6, 99]]), 0.0),
            Err(Error::TokenOutOfRange { id: 99, .. })
        ));
    }

    #[test]
    fn batch_size_formula() {
        let m = TransformerRescorer::<f32>::random(RescorerConfig::toy(), 9).unwrap();
        let hyps: Vec<Hypothesis> = [3usize, 5, 4]
            .iter()
            .map(|&n| Hypothesis { tokens: vec![9; n], first_pass_log_prob: 0.0 })
            .collect();
        assert_eq!(HypothesisScorer::<f32>::batch_size(&m, &hyps), 3 * 5 * 2);
    }
}
