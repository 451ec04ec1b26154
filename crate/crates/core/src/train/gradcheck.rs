//! Finite-difference verification of analytic gradients.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec::Sequential;
use crate::model::{InitScheme, RescorerConfig, RescorerParams, TokenBatch, TransformerRescorer};
use crate::tensor::Tensor;
use crate::vocab;

use super::backward::{ce_objective, mwer_objective};

/// A named set of double-precision tensors.
pub trait Parameters: Clone {
    fn tensors(&self) -> Vec<(String, &Tensor<f64>)>;
    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<f64>)>;
}

impl Parameters for RescorerParams<f64> {
    fn tensors(&self) -> Vec<(String, &Tensor<f64>)> {
        self.named()
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<f64>)> {
        self.named_mut()
    }
}

impl Parameters for Vec<(String, Tensor<f64>)> {
    fn tensors(&self) -> Vec<(String, &Tensor<f64>)> {
        self.iter().map(|(n, t)| (n.clone(), t)).collect()
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<f64>)> {
        self.iter_mut().map(|(n, t)| (n.clone(), t)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Entries checked per tensor; tensors this small or smaller are checked
    /// in full.
    pub samples_per_tensor: usize,
    /// Relative errors are taken against `max(|analytic|, |numeric|, floor)`.
    pub floor: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            samples_per_tensor: 24,
            floor: 1e-5,
            tolerance: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
    /// Tensor holding the largest error.
    pub worst: Option<String>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// Compares `analytic` (the gradient of `loss` at `params`) against central
/// differences of `loss`, tensor by tensor.
pub fn grad_check<P: Parameters>(
    mut loss: impl FnMut(&P) -> Result<f64>,
    params: &P,
    analytic: &P,
    options: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    let grads: Vec<Vec<f64>> = analytic.tensors().into_iter().map(|(_, t)| t.data().to_vec()).collect();
    if grads.len() != names.len() {
        return Err(Error::Length(alloc::format!(
            "{} gradient tensors for {} parameters",
            grads.len(),
            names.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        tensors: Vec::with_capacity(names.len()),
        max_rel_error: 0.0,
        worst: None,
        tolerance: options.tolerance,
    };
    for (ti, name) in names.into_iter().enumerate() {
        let len = grads[ti].len();
        let picks: Vec<usize> = if len <= options.samples_per_tensor {
            (0..len).collect()
        } else {
            index::sample(&mut rng, len, options.samples_per_tensor).into_vec()
        };
        let mut worst = 0.0f64;
        for &i in &picks {
            let orig = probe.tensors()[ti].1.data()[i];
            set(&mut probe, ti, i, orig + options.step);
            let up = loss(&probe)?;
            set(&mut probe, ti, i, orig - options.step);
            let down = loss(&probe)?;
            set(&mut probe, ti, i, orig);
            let numeric = (up - down) / (2.0 * options.step);
            let a = grads[ti][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(options.floor);
            worst = worst.max(rel);
        }
        if worst > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(worst);
            report.worst = Some(name.clone());
        }
        report.tensors.push(TensorCheck {
            name,
            checked: picks.len(),
            max_rel_error: worst,
        });
    }
    Ok(report)
}

fn set<P: Parameters>(p: &mut P, tensor: usize, index: usize, value: f64) {
    let mut all = p.tensors_mut();
    all[tensor].1.data_mut()[index] = value;
}

/// Loss whose parameter gradients [`rescorer_grad_check`] verifies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckedLoss {
    /// Cross entropy over a batch of token sequences.
    CrossEntropy,
    /// Expected word errors over a beam scored by the model.
    Mwer,
}

/// Checks the analytic gradients of `loss` for a randomly initialized
/// double-precision model of shape `config` on random inputs.
pub fn rescorer_grad_check(
    config: &RescorerConfig,
    loss: CheckedLoss,
    seed: u64,
    options: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let scheme = InitScheme { bias_std: 0.1 };
    let model = TransformerRescorer::<f64>::random_with(config.clone(), seed, scheme)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let frames = 5;
    let features = Tensor::from_fn(&[frames, config.enc_in_dim], |_| rng.random_range(-1.0..1.0));
    let mut hyp = |len: usize| -> Vec<u32> {
        (0..len)
            .map(|_| rng.random_range(vocab::FIRST_PIECE..config.vocab_size as u32))
            .collect()
    };
    let hyps: Vec<Vec<u32>> = [4, 2, 5, 3].iter().map(|&n| hyp(n)).collect();
    let refs: Vec<&[u32]> = hyps.iter().map(Vec::as_slice).collect();
    let exec = Sequential;
    let with = |p: &RescorerParams<f64>| TransformerRescorer::from_params(config.clone(), p.clone());

    match loss {
        CheckedLoss::CrossEntropy => {
            let batch = TokenBatch::from_hypotheses(&refs);
            let (_, grads) = ce_objective(&model, &exec, &features, &batch)?;
            let f = |p: &RescorerParams<f64>| {
                Ok(ce_objective(&with(p), &exec, &features, &batch)?.0)
            };
            grad_check(f, model.params(), &grads, options)
        }
        CheckedLoss::Mwer => {
            let errors = [2.0, 0.0, 3.0, 1.0];
            let (_, grads) = mwer_objective(&model, &exec, &features, &refs, &errors)?;
            let f = |p: &RescorerParams<f64>| {
                Ok(mwer_objective(&with(p), &exec, &features, &refs, &errors)?.0.loss)
            };
            grad_check(f, model.params(), &grads, options)
        }
    }
}
