use rescorer_core::train::{token_swap, train_toy, Stage, SwapPolicy, ToyTrainConfig};
use rescorer_core::vocab::is_sentinel;
use rescorer_core::Sequential;

#[test]
fn swap_fraction_matches_proportion() {
    let tokens: Vec<u32> = (0..100_000u32).map(|i| 5 + (i * 7919) % 59).collect();
    let (out, swapped) = token_swap(&tokens, 64, &SwapPolicy::new(0.15, 42)).unwrap();
    let frac = swapped as f64 / tokens.len() as f64;
    assert!((frac - 0.15).abs() <= 0.01, "{frac}");
    let changed = tokens.iter().zip(&out).filter(|(a, b)| a != b).count();
    assert_eq!(changed, swapped);
    assert!(out.iter().all(|&t| !is_sentinel(t)));
}

#[test]
fn cross_entropy_stage_lowers_dev_ce_each_epoch() {
    let cfg = ToyTrainConfig {
        epochs_ce: 5,
        epochs_mwer: 1,
        ..ToyTrainConfig::default()
    };
    let out = train_toy(&cfg, &Sequential).unwrap();
    assert_eq!(out.trace.len(), 7);
    let ce: Vec<f64> = out.trace.iter().take(6).map(|r| r.dev_ce).collect();
    assert!(ce.windows(2).all(|w| w[1] < w[0]), "{ce:?}");
    assert_eq!(out.trace[6].stage, Stage::Mwer);
    assert!(out.trace.iter().all(|r| r.dev_wer.is_finite()));
}

#[test]
fn divergence_is_reported() {
    let cfg = ToyTrainConfig {
        train_utterances: 40,
        dev_utterances: 4,
        epochs_ce: 3,
        epochs_mwer: 0,
        lr_ce: 1e30,
        ..ToyTrainConfig::default()
    };
    match train_toy(&cfg, &Sequential) {
        Err(rescorer_core::Error::Divergence { stage, .. }) => assert_eq!(stage, "ce"),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.trace)),
    }
}
