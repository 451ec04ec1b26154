//! Word-level edit distance and word error rate.

use alloc::vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WerStats {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub reference_words: usize,
}

impl WerStats {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

/// Minimum unit-cost alignment of `hyp` against `reference`. When several
/// alignments tie, the backtrace prefers substitution, then insertion, then
/// deletion.
pub fn word_errors<S: AsRef<str>, U: AsRef<str>>(reference: &[S], hyp: &[U]) -> WerStats {
    let (n, m) = (reference.len(), hyp.len());
    let width = m + 1;
    let mut dp = vec![0usize; (n + 1) * width];
    for j in 0..=m {
        dp[j] = j;
    }
    for i in 1..=n {
        dp[i * width] = i;
        for j in 1..=m {
            let same = reference[i - 1].as_ref() == hyp[j - 1].as_ref();
            let diag = dp[(i - 1) * width + j - 1] + usize::from(!same);
            let ins = dp[i * width + j - 1] + 1;
            let del = dp[(i - 1) * width + j] + 1;
            dp[i * width + j] = diag.min(ins).min(del);
        }
    }

    let mut stats = WerStats {
        reference_words: n,
        ..WerStats::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dp[i * width + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1].as_ref() == hyp[j - 1].as_ref();
            if dp[(i - 1) * width + j - 1] + usize::from(!same) == here {
                if !same {
                    stats.substitutions += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && dp[i * width + j - 1] + 1 == here {
            stats.insertions += 1;
            j -= 1;
        } else {
            stats.deletions += 1;
            i -= 1;
        }
    }
    stats
}

/// Pooled WER: total errors over total reference words.
pub fn corpus_wer(stats: &[WerStats]) -> Result<f64> {
    let words: usize = stats.iter().map(|s| s.reference_words).sum();
    let errors: usize = stats.iter().map(WerStats::errors).sum();
    if words == 0 {
        if errors == 0 && !stats.is_empty() {
            return Ok(0.0);
        }
        return Err(Error::UndefinedMetric);
    }
    Ok(errors as f64 / words as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;
    use proptest::prelude::*;

    fn words(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn examples() {
        let r = words("the cat sat");
        assert_eq!(word_errors(&r, &r).errors(), 0);

        let empty: [&str; 0] = [];
        let s = word_errors(&empty, &words("a b c"));
        assert_eq!((s.insertions, s.errors()), (3, 3));

        let s = word_errors(&r, &words("the hat sat on"));
        assert_eq!((s.substitutions, s.insertions, s.deletions), (1, 1, 0));
    }

    #[test]
    fn tie_break_prefers_substitution() {
        // "a b" vs "b c": two substitutions, or delete a + insert c.
        let s = word_errors(&words("a b"), &words("b c"));
        assert_eq!((s.substitutions, s.insertions, s.deletions), (2, 0, 0));
    }

    #[test]
    fn corpus_wer_examples() {
        let zero = WerStats { reference_words: 5, ..Default::default() };
        assert_eq!(corpus_wer(&[zero, zero]).unwrap(), 0.0);
        let one = WerStats { substitutions: 1, reference_words: 10, ..Default::default() };
        assert_eq!(corpus_wer(&[one]).unwrap(), 0.1);

        let bad = WerStats { substitutions: 9, reference_words: 10, ..Default::default() };
        let good = WerStats { reference_words: 90, ..Default::default() };
        let pooled = corpus_wer(&[bad, good]).unwrap();
        assert!((pooled - 0.09).abs() < 1e-15);
        let averaged = (0.9 + 0.0) / 2.0;
        assert!((averaged - 0.45f64).abs() < 1e-15 && pooled != averaged);

        assert_eq!(corpus_wer(&[]), Err(Error::UndefinedMetric));
        let ins = WerStats { insertions: 2, ..Default::default() };
        assert_eq!(corpus_wer(&[ins]), Err(Error::UndefinedMetric));
    }

    /// Brute-force edit distance by recursion over all alignments.
    fn brute(a: &[u8], b: &[u8]) -> usize {
        match (a.split_first(), b.split_first()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((x, ar)), Some((y, br))) => {
                let sub = brute(ar, br) + usize::from(x != y);
                sub.min(brute(ar, b) + 1).min(brute(a, br) + 1)
            }
        }
    }

    fn strs(v: &[u8]) -> Vec<alloc::string::String> {
        v.iter().map(|c| alloc::format!("w{c}")).collect()
    }

    proptest! {
        #[test]
        fn matches_brute_force(a in prop::collection::vec(0u8..3, 0..6),
                               b in prop::collection::vec(0u8..3, 0..6)) {
            let s = word_errors(&strs(&a), &strs(&b));
            prop_assert_eq!(s.errors(), brute(&a, &b));
            prop_assert_eq!(s.reference_words + s.insertions - s.deletions, b.len());
        }

        #[test]
        fn symmetric_with_insertions_and_deletions_swapped(
            a in prop::collection::vec(0u8..4, 0..8),
            b in prop::collection::vec(0u8..4, 0..8)) {
            let ab = word_errors(&strs(&a), &strs(&b));
            let ba = word_errors(&strs(&b), &strs(&a));
            prop_assert_eq!(ab.errors(), ba.errors());
        }

        #[test]
        fn triangle_inequality(a in prop::collection::vec(0u8..3, 0..6),
                               b in prop::collection::vec(0u8..3, 0..6),
                               c in prop::collection::vec(0u8..3, 0..6)) {
            let d = |x: &[u8], y: &[u8]| word_errors(&strs(x), &strs(y)).errors();
            prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c));
        }
    }
}
