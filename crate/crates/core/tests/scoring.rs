#[path = "support/oracle.rs"]
mod oracle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rescorer_core::model::{InitScheme, LstmRescorerConfig, RescorerConfig, TokenBatch};
use rescorer_core::scoring::{rescore_nbest, HypothesisScorer};
use rescorer_core::{
    Hypothesis, LstmRescorer, NBestList, SelfAttentionMode, Sequential, Tensor,
    TransformerRescorer,
};

fn random_nbest(rng: &mut ChaCha8Rng, cfg: &RescorerConfig, b: usize) -> NBestList<f32> {
    let frames = rng.random_range(1..12);
    let features = Tensor::from_fn(&[frames, cfg.enc_in_dim], |_| rng.random_range(-1.0..1.0));
    let hyps = (0..b)
        .map(|_| {
            let len = rng.random_range(1..10);
            Hypothesis {
                tokens: (0..len).map(|_| rng.random_range(5..cfg.vocab_size as u32)).collect(),
                first_pass_log_prob: rng.random_range(-10.0..0.0),
            }
        })
        .collect();
    NBestList { uid: "r".into(), features, hyps, reference_words: None }
}

fn model(cfg: &RescorerConfig, seed: u64) -> TransformerRescorer<f32> {
    TransformerRescorer::random_with(cfg.clone(), seed, InitScheme { bias_std: 0.2 }).unwrap()
}

#[test]
fn batched_scores_match_incremental_decoding() {
    let cfg = RescorerConfig::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for seed in 0..20 {
        let m = model(&cfg, seed);
        let nb = random_nbest(&mut rng, &cfg, 4);
        let r = rescore_nbest(&m, &Sequential, &nb, 0.3).unwrap();
        let oracle: Vec<f64> = nb
            .hyps
            .iter()
            .map(|h| oracle::incremental_log_prob(&cfg, m.params(), nb.features.data(), &h.tokens))
            .collect();
        for (a, b) in r.second_pass_log_prob.iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
        }
        let combined: Vec<f64> = nb.hyps.iter().zip(&oracle).map(|(h, s)| 0.3 * h.first_pass_log_prob + s).collect();
        assert_eq!(r.ranking, rescorer_core::scoring::rank(&combined));
        assert_eq!(m.counters().batched_forwards(), 1);
    }
}

#[test]
fn padding_and_batch_order_do_not_change_scores() {
    let cfg = RescorerConfig::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let m = model(&cfg, 5);
    let nb = random_nbest(&mut rng, &cfg, 5);
    let all = m.score_hypotheses(&Sequential, &nb.features, &nb.hyps).unwrap();
    for (i, h) in nb.hyps.iter().enumerate() {
        let alone = m.score_hypotheses(&Sequential, &nb.features, std::slice::from_ref(h)).unwrap();
        assert_eq!(alone[0], all[i]);
    }
    let mut reversed = nb.hyps.clone();
    reversed.reverse();
    let rev = m.score_hypotheses(&Sequential, &nb.features, &reversed).unwrap();
    let mut expect = all.clone();
    expect.reverse();
    assert_eq!(rev, expect);
}

fn logits(m: &TransformerRescorer<f32>, features: &Tensor<f32>, inputs: &[u32]) -> Tensor<f32> {
    let hyp = &inputs[1..];
    let batch = TokenBatch::from_hypotheses(&[hyp]);
    let e = m.encode(&Sequential, features).unwrap();
    m.forward(&Sequential, &e, &batch).unwrap()
}

#[test]
fn causal_positions_ignore_later_tokens() {
    let cfg = RescorerConfig::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..30 {
        let m = model(&cfg, trial);
        let features = Tensor::from_fn(&[6, cfg.enc_in_dim], |_| rng.random_range(-1.0..1.0));
        let mut inputs: Vec<u32> = std::iter::once(1).chain((0..9).map(|_| rng.random_range(5..64))).collect();
        let before = logits(&m, &features, &inputs);
        let j = rng.random_range(1..inputs.len());
        inputs[j] = if inputs[j] == 5 { 6 } else { 5 };
        let after = logits(&m, &features, &inputs);
        let v = cfg.vocab_size;
        assert_eq!(before.data()[..j * v], after.data()[..j * v]);
        assert_ne!(before.data()[j * v..], after.data()[j * v..]);
    }
}

#[test]
fn full_context_positions_see_later_tokens() {
    let mut cfg = RescorerConfig::toy();
    cfg.self_attention_mode = SelfAttentionMode::FullContext;
    let m = model(&cfg, 11);
    let features = Tensor::full(&[4, cfg.enc_in_dim], 0.2);
    let mut inputs = vec![1, 7, 9, 12, 30];
    let before = logits(&m, &features, &inputs);
    inputs[4] = 31;
    let after = logits(&m, &features, &inputs);
    assert_ne!(before.data()[..cfg.vocab_size], after.data()[..cfg.vocab_size]);
}

#[test]
fn lstm_counts_one_step_per_scored_token() {
    let cfg = LstmRescorerConfig::toy();
    let m = LstmRescorer::<f32>::random(cfg.clone(), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let nb = random_nbest(&mut rng, &RescorerConfig::toy(), 4);
    let r = rescore_nbest(&m, &Sequential, &nb, 1.0).unwrap();
    let steps: usize = nb.hyps.iter().map(|h| h.tokens.len() + 1).sum();
    assert_eq!(m.counters().sequential_steps(), steps as u64);
    assert_eq!(r.ranking.len(), 4);
    assert!(r.second_pass_log_prob.iter().all(|v| v.is_finite() && *v < 0.0));
}

#[test]
fn double_precision_model_agrees_with_single() {
    let cfg = RescorerConfig::toy();
    let m = model(&cfg, 8);
    let m64 = TransformerRescorer::<f64>::from_params(cfg.clone(), m.params().cast(&cfg));
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let nb = random_nbest(&mut rng, &cfg, 3);
    let f64_nb = NBestList { uid: nb.uid.clone(), features: nb.features.cast(), hyps: nb.hyps.clone(), reference_words: None };
    let a = rescore_nbest(&m, &Sequential, &nb, 0.0).unwrap();
    let b = rescore_nbest(&m64, &Sequential, &f64_nb, 0.0).unwrap();
    for (x, y) in a.second_pass_log_prob.iter().zip(&b.second_pass_log_prob) {
        assert!((x - y).abs() < 1e-4 * y.abs().max(1.0), "{x} {y}");
    }
}
