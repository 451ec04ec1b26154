use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{self, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct CeOutput<T = f32> {
    /// Mean negative log-likelihood per non-pad position.
    pub loss: f64,
    /// Gradient of `loss` with respect to the logits, same shape.
    pub grad: Tensor<T>,
    /// Number of non-pad positions.
    pub count: usize,
}

/// Cross entropy of `[B, s, V]` logits against `B * s` targets, counting the
/// first `lengths[b]` positions of each sequence.
pub fn ce_loss<T: Scalar>(logits: &Tensor<T>, targets: &[u32], lengths: &[usize]) -> Result<CeOutput<T>> {
    let shape = logits.shape();
    if shape.len() != 3 {
        return Err(Error::Rank(shape.len()));
    }
    let (b, s, v) = (shape[0], shape[1], shape[2]);
    if targets.len() != b * s || lengths.len() != b {
        return Err(Error::Length(format!(
            "{} targets and {} lengths for logits {shape:?}",
            targets.len(),
            lengths.len()
        )));
    }
    if let Some(&len) = lengths.iter().find(|&&l| l > s) {
        return Err(Error::Length(format!("sequence length {len} exceeds {s} positions")));
    }
    let count: usize = lengths.iter().sum();
    let mut grad = vec![T::zero(); logits.len()];
    let mut total = 0.0;
    let inv = if count > 0 { T::lit(1.0 / count as f64) } else { T::zero() };
    for (seq, &len) in lengths.iter().enumerate() {
        for t in 0..len {
            let r = seq * s + t;
            let row = &logits.data()[r * v..(r + 1) * v];
            let y = targets[r] as usize;
            if y >= v {
                return Err(Error::TokenOutOfRange {
                    position: t,
                    id: targets[r],
                    vocab: v,
                });
            }
            let lse = tensor::log_sum_exp(row);
            total += (lse - row[y]).as_f64();
            let g = &mut grad[r * v..(r + 1) * v];
            for (gv, &x) in g.iter_mut().zip(row) {
                *gv = (x - lse).exp() * inv;
            }
            g[y] = g[y] - inv;
        }
    }
    Ok(CeOutput {
        loss: if count > 0 { total / count as f64 } else { 0.0 },
        grad: Tensor::new(shape, grad)?,
        count,
    })
}

/// One beam for the expected-word-error loss.
#[derive(Debug, Clone, PartialEq)]
pub struct MwerBatch {
    /// Second-pass `log P(y_m | x)` of every hypothesis.
    pub log_probs: Vec<f64>,
    /// Word errors of every hypothesis against the reference.
    pub word_errors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MwerOutput {
    pub loss: f64,
    /// `dloss / dlog_probs[m]`.
    pub grad: Vec<f64>,
    /// Beam-renormalized posteriors.
    pub posteriors: Vec<f64>,
    /// `sum_m P'_m W'_m`.
    pub expected_errors: f64,
    /// Mean word errors over the beam.
    pub mean_errors: f64,
}

/// `sum_m P'_m (W'_m - mean W')` with `P'` the softmax of the log-probs over
/// the beam.
pub fn mwer_loss(batch: &MwerBatch) -> Result<MwerOutput> {
    let n = batch.log_probs.len();
    if n == 0 {
        return Err(Error::EmptyHypotheses);
    }
    if batch.word_errors.len() != n {
        return Err(Error::Length(format!(
            "{n} log-probs and {} word-error counts",
            batch.word_errors.len()
        )));
    }
    if batch.log_probs.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "mwer_loss" });
    }
    let mut posteriors = batch.log_probs.clone();
    tensor::softmax_in_place(&mut posteriors);
    let mean = batch.word_errors.iter().sum::<f64>() / n as f64;
    let loss: f64 = posteriors
        .iter()
        .zip(&batch.word_errors)
        .map(|(p, w)| p * (w - mean))
        .sum();
    let grad = posteriors
        .iter()
        .zip(&batch.word_errors)
        .map(|(p, w)| p * ((w - mean) - loss))
        .collect();
    let expected_errors = posteriors.iter().zip(&batch.word_errors).map(|(p, w)| p * w).sum();
    Ok(MwerOutput {
        loss,
        grad,
        posteriors,
        expected_errors,
        mean_errors: mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ce_examples() {
        let logits = Tensor::<f64>::zeros(&[2, 3, 8]);
        let targets = [5, 6, 2, 7, 2, 0];
        let out = ce_loss(&logits, &targets, &[3, 2]).unwrap();
        assert!((out.loss - 8f64.ln()).abs() < 1e-12);
        assert_eq!(out.count, 5);
        // Padding row has zero gradient.
        assert!(out.grad.data()[5 * 8..].iter().all(|&g| g == 0.0));

        let mut sat = Tensor::<f64>::full(&[1, 1, 4], -50.0);
        sat.data_mut()[3] = 50.0;
        assert!(ce_loss(&sat, &[3], &[1]).unwrap().loss < 1e-40);

        assert!(ce_loss(&logits, &targets[..5], &[3, 2]).is_err());
        assert!(ce_loss(&logits, &targets, &[4, 2]).is_err());
    }

    #[test]
    fn ce_is_permutation_equivariant() {
        let logits = Tensor::<f64>::from_fn(&[2, 2, 5], |i| ((i * 7) % 11) as f64 * 0.3);
        let targets = [1, 2, 4, 0];
        let a = ce_loss(&logits, &targets, &[2, 1]).unwrap();
        let mut swapped = logits.data()[10..].to_vec();
        swapped.extend_from_slice(&logits.data()[..10]);
        let sw = Tensor::new(&[2, 2, 5], swapped).unwrap();
        let b = ce_loss(&sw, &[4, 0, 1, 2], &[1, 2]).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-15);
        assert_eq!(&a.grad.data()[..10], &b.grad.data()[10..]);
    }

    fn mwer(lp: &[f64], w: &[f64]) -> MwerOutput {
        mwer_loss(&MwerBatch {
            log_probs: lp.to_vec(),
            word_errors: w.to_vec(),
        })
        .unwrap()
    }

    #[test]
    fn mwer_examples() {
        assert_eq!(mwer(&[-1.0, -3.0, -0.2], &[2.0, 2.0, 2.0]).loss, 0.0);
        assert_eq!(mwer(&[-4.0], &[3.0]).loss, 0.0);
        let out = mwer(&[0.8f64.ln(), 0.2f64.ln()], &[2.0, 0.0]);
        assert!((out.loss - 0.6).abs() < 1e-15, "{}", out.loss);
        assert_eq!(mwer_loss(&MwerBatch { log_probs: vec![], word_errors: vec![] }), Err(Error::EmptyHypotheses));
    }

    proptest! {
        #[test]
        fn mwer_shift_invariant_and_gradient_sums_to_zero(
            lp in prop::collection::vec(-20.0f64..0.0, 1..6),
            c in -50.0f64..50.0,
            seed in 0u64..1000,
        ) {
            let w: Vec<f64> = (0..lp.len()).map(|i| ((seed as usize + 3 * i) % 5) as f64).collect();
            let a = mwer(&lp, &w);
            let shifted: Vec<f64> = lp.iter().map(|v| v + c).collect();
            let b = mwer(&shifted, &w);
            prop_assert!((a.loss - b.loss).abs() <= 1e-12);
            prop_assert!(a.grad.iter().sum::<f64>().abs() <= 1e-10);
            prop_assert!((a.loss - (a.expected_errors - a.mean_errors)).abs() <= 1e-12);
        }

        #[test]
        fn mwer_gradient_step_descends(
            lp in prop::collection::vec(-8.0f64..0.0, 2..6),
            seed in 0u64..1000,
        ) {
            let w: Vec<f64> = (0..lp.len()).map(|i| ((seed as usize + 7 * i) % 4) as f64).collect();
            let a = mwer(&lp, &w);
            let stepped: Vec<f64> = lp.iter().zip(&a.grad).map(|(v, g)| v - 1e-3 * g).collect();
            let b = mwer(&stepped, &w);
            prop_assert!(b.expected_errors <= a.expected_errors + 1e-15);
        }

        #[test]
        fn mwer_gradient_matches_finite_differences(
            lp in prop::collection::vec(-6.0f64..0.0, 1..5),
            seed in 0u64..1000,
        ) {
            let w: Vec<f64> = (0..lp.len()).map(|i| ((seed as usize + 5 * i) % 3) as f64).collect();
            let a = mwer(&lp, &w);
            for m in 0..lp.len() {
                let h = 1e-6;
                let mut up = lp.clone();
                up[m] += h;
                let mut dn = lp.clone();
                dn[m] -= h;
                let fd = (mwer(&up, &w).loss - mwer(&dn, &w).loss) / (2.0 * h);
                prop_assert!((fd - a.grad[m]).abs() <= 1e-8);
            }
        }
    }
}
