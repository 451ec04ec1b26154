use rescorer_core::model::RescorerConfig;
use rescorer_core::train::{ce_loss, grad_check, rescorer_grad_check, CheckedLoss, GradCheckOptions};
use rescorer_core::Tensor;

#[test]
fn ce_logit_gradient_matches_finite_differences() {
    let shape = [2, 4, 7];
    let logits = Tensor::<f64>::from_fn(&shape, |i| ((i * 37 % 23) as f64 - 11.0) * 0.17);
    let targets = [3, 5, 1, 2, 6, 2, 0, 0];
    let lengths = [4, 2];
    let analytic = ce_loss(&logits, &targets, &lengths).unwrap().grad;
    let params = vec![(String::from("logits"), logits)];
    let grads = vec![(String::from("logits"), analytic)];
    let f = |p: &Vec<(String, Tensor<f64>)>| Ok(ce_loss(&p[0].1, &targets, &lengths)?.loss);
    let opts = GradCheckOptions { samples_per_tensor: 1000, tolerance: 1e-5, ..Default::default() };
    let r = grad_check(f, &params, &grads, &opts).unwrap();
    assert!(r.passed(), "{r:?}");
}

#[test]
fn toy_model_cross_entropy_gradients() {
    let opts = GradCheckOptions { tolerance: 1e-5, ..Default::default() };
    let r = rescorer_grad_check(&RescorerConfig::toy(), CheckedLoss::CrossEntropy, 3, &opts).unwrap();
    for t in &r.tensors {
        assert!(t.checked > 0, "{}", t.name);
    }
    assert!(r.passed(), "{} {:?}", r.max_rel_error, r.worst);
}

#[test]
fn toy_model_mwer_gradients() {
    let opts = GradCheckOptions::default();
    let r = rescorer_grad_check(&RescorerConfig::toy(), CheckedLoss::Mwer, 4, &opts).unwrap();
    assert!(r.passed(), "{} {:?}", r.max_rel_error, r.worst);
}

#[test]
fn full_context_gradients() {
    let mut cfg = RescorerConfig::toy();
    cfg.self_attention_mode = rescorer_core::SelfAttentionMode::FullContext;
    let r = rescorer_grad_check(&cfg, CheckedLoss::CrossEntropy, 5, &GradCheckOptions::default()).unwrap();
    assert!(r.passed(), "{} {:?}", r.max_rel_error, r.worst);
}
