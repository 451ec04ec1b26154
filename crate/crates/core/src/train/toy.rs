//! Two-stage training on the synthetic task: cross entropy on references,
//! then expected word errors over first-pass N-best lists.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::metrics::{self, WerStats};
use crate::model::{RescorerConfig, RescorerParams, TokenBatch, TransformerRescorer};
use crate::scoring::{self, HypothesisScorer};
use crate::synth::{ToyTask, ToyTaskConfig, ToyUtterance};

use super::backward::{ce_objective, mwer_objective};
use super::loss::{ce_loss, mwer_loss, MwerBatch};
use super::swap::{token_swap, SwapPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Init,
    Ce,
    Mwer,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Init => "init",
            Stage::Ce => "ce",
            Stage::Mwer => "mwer",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTrainConfig {
    pub model: RescorerConfig,
    pub task: ToyTaskConfig,
    pub seed: u64,
    pub train_utterances: usize,
    pub dev_utterances: usize,
    pub epochs_ce: usize,
    pub epochs_mwer: usize,
    pub lr_ce: f32,
    pub lr_mwer: f32,
    /// Utterances whose gradients are summed into one SGD step.
    pub batch_utterances: usize,
    /// Weight of the first-pass score when ranking.
    pub lambda: f64,
    /// Weight of the second-pass score when ranking; 0 ranks by the first
    /// pass alone.
    pub second_pass_weight: f64,
    /// Weight of a cross-entropy term added to the MWER stage. Off by default.
    pub mwer_ce_weight: f64,
    /// Proportion of decoder input tokens randomly swapped during training.
    pub swap_proportion: f64,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        Self {
            model: RescorerConfig::toy(),
            task: ToyTaskConfig::default(),
            seed: 7,
            train_utterances: 2000,
            dev_utterances: 200,
            epochs_ce: 30,
            epochs_mwer: 6,
            lr_ce: 0.2,
            lr_mwer: 0.003,
            batch_utterances: 16,
            lambda: 1.0,
            second_pass_weight: 1.0,
            mwer_ce_weight: 0.0,
            swap_proportion: 0.0,
        }
    }
}

/// One line of the metrics trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub epoch: usize,
    pub stage: Stage,
    /// Mean training loss of the epoch; `None` before training.
    pub loss: Option<f64>,
    pub dev_wer: f64,
    pub dev_ce: f64,
    /// Mean over dev utterances of `sum_m P'_m W'_m`.
    pub dev_expected_errors: f64,
}

/// Dev-set metrics of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEval {
    pub ce: f64,
    pub wer: f64,
    pub first_pass_wer: f64,
    pub expected_errors: f64,
}

#[derive(Debug, Clone)]
pub struct ToyTrainOutcome {
    pub model: TransformerRescorer<f32>,
    pub trace: Vec<TraceRow>,
    pub first_pass_wer: f64,
}

fn word_errors(task: &ToyTask, u: &ToyUtterance) -> Vec<f64> {
    u.nbest
        .hyps
        .iter()
        .map(|h| task.word_errors(&u.reference, &h.tokens).errors() as f64)
        .collect()
}

fn reference_words(task: &ToyTask, u: &ToyUtterance) -> Vec<alloc::string::String> {
    task.vocabulary().detokenize(&u.reference)
}

/// Scores `dev` with `model`: reference cross entropy, rescored top-1 WER
/// under `lambda * first + second_weight * second`, first-pass top-1 WER and
/// mean expected word errors.
pub fn evaluate(
    model: &TransformerRescorer<f32>,
    exec: &dyn Executor,
    task: &ToyTask,
    dev: &[ToyUtterance],
    lambda: f64,
    second_weight: f64,
) -> Result<ToyEval> {
    let (mut ce_sum, mut ce_count, mut expected) = (0.0, 0usize, 0.0);
    let mut rescored: Vec<WerStats> = Vec::with_capacity(dev.len());
    let mut first: Vec<WerStats> = Vec::with_capacity(dev.len());
    for u in dev {
        let batch = TokenBatch::from_hypotheses(&[&u.reference]);
        let e = model.encode(exec, &u.nbest.features)?;
        let logits = model.forward(exec, &e, &batch)?;
        let ce = ce_loss(&logits, batch.targets(), batch.lengths())?;
        ce_sum += ce.loss * ce.count as f64;
        ce_count += ce.count;

        let second = model.score_hypotheses(exec, &u.nbest.features, &u.nbest.hyps)?;
        let errors = word_errors(task, u);
        expected += mwer_loss(&MwerBatch {
            log_probs: second.clone(),
            word_errors: errors,
        })?
        .expected_errors;

        let combined: Vec<f64> = u
            .nbest
            .hyps
            .iter()
            .zip(&second)
            .map(|(h, &s)| lambda * h.first_pass_log_prob + second_weight * s)
            .collect();
        let firsts: Vec<f64> = u.nbest.hyps.iter().map(|h| h.first_pass_log_prob).collect();
        let words = reference_words(task, u);
        let vocab = task.vocabulary();
        let top = scoring::rank(&combined)[0];
        rescored.push(metrics::word_errors(&words, &vocab.detokenize(&u.nbest.hyps[top].tokens)));
        let top = scoring::rank(&firsts)[0];
        first.push(metrics::word_errors(&words, &vocab.detokenize(&u.nbest.hyps[top].tokens)));
    }
    Ok(ToyEval {
        ce: ce_sum / ce_count.max(1) as f64,
        wer: metrics::corpus_wer(&rescored)?,
        first_pass_wer: metrics::corpus_wer(&first)?,
        expected_errors: expected / dev.len().max(1) as f64,
    })
}

fn row(epoch: usize, stage: Stage, loss: Option<f64>, eval: &ToyEval) -> TraceRow {
    TraceRow {
        epoch,
        stage,
        loss,
        dev_wer: eval.wer,
        dev_ce: eval.ce,
        dev_expected_errors: eval.expected_errors,
    }
}

fn reference_batch(
    u: &ToyUtterance,
    vocab: usize,
    swap: f64,
    seed: u64,
) -> Result<TokenBatch> {
    let batch = TokenBatch::from_hypotheses(&[&u.reference]);
    if swap <= 0.0 {
        return Ok(batch);
    }
    let (inputs, _) = token_swap(batch.inputs(), vocab, &SwapPolicy::new(swap, seed))?;
    batch.with_inputs(inputs)
}

/// Trains a toy rescorer from random weights: `epochs_ce` epochs of cross
/// entropy on references, then `epochs_mwer` epochs of MWER over the
/// first-pass N-best lists, evaluating on a held-out set after every epoch.
pub fn train_toy(config: &ToyTrainConfig, exec: &dyn Executor) -> Result<ToyTrainOutcome> {
    let task = ToyTask::new(config.task.clone(), config.seed);
    let train = task.dataset(0, config.train_utterances);
    let dev = task.dataset(1, config.dev_utterances);
    let mut model = TransformerRescorer::<f32>::random(config.model.clone(), config.seed)?;
    let vocab = config.model.vocab_size;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let step = config.batch_utterances.max(1);

    let eval = |m: &TransformerRescorer<f32>| {
        evaluate(m, exec, &task, &dev, config.lambda, config.second_pass_weight)
    };
    let start = eval(&model)?;
    let first_pass_wer = start.first_pass_wer;
    let mut trace = alloc::vec![row(0, Stage::Init, None, &start)];

    let stages = [
        (Stage::Ce, config.epochs_ce, config.lr_ce),
        (Stage::Mwer, config.epochs_mwer, config.lr_mwer),
    ];
    let mut epoch = 0;
    for (stage, epochs, lr) in stages {
        for _ in 0..epochs {
            epoch += 1;
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(step) {
                let mut grads = RescorerParams::zeros(&config.model)?;
                for &i in chunk {
                    let u = &train[i];
                    let swap_seed = config.seed ^ ((epoch as u64) << 32) ^ i as u64;
                    let loss = match stage {
                        Stage::Ce | Stage::Init => {
                            let batch = reference_batch(u, vocab, config.swap_proportion, swap_seed)?;
                            let (loss, g) = ce_objective(&model, exec, &u.nbest.features, &batch)?;
                            grads.axpy(1.0, &g);
                            loss
                        }
                        Stage::Mwer => {
                            let hyps: Vec<&[u32]> =
                                u.nbest.hyps.iter().map(|h| h.tokens.as_slice()).collect();
                            let (out, g) = mwer_objective(
                                &model,
                                exec,
                                &u.nbest.features,
                                &hyps,
                                &word_errors(&task, u),
                            )?;
                            grads.axpy(1.0, &g);
                            let mut loss = out.loss;
                            if config.mwer_ce_weight > 0.0 {
                                let batch =
                                    reference_batch(u, vocab, config.swap_proportion, swap_seed)?;
                                let (ce, g) = ce_objective(&model, exec, &u.nbest.features, &batch)?;
                                grads.axpy(config.mwer_ce_weight as f32, &g);
                                loss += config.mwer_ce_weight * ce;
                            }
                            loss
                        }
                    };
                    if !loss.is_finite() {
                        return Err(Error::Divergence {
                            stage: stage.as_str(),
                            epoch,
                        });
                    }
                    total += loss;
                }
                model.params_mut().axpy(-lr / chunk.len() as f32, &grads);
            }
            let e = eval(&model)?;
            if !e.ce.is_finite() {
                return Err(Error::Divergence {
                    stage: stage.as_str(),
                    epoch,
                });
            }
            trace.push(row(epoch, stage, Some(total / train.len().max(1) as f64), &e));
        }
    }
    Ok(ToyTrainOutcome {
        model,
        trace,
        first_pass_wer,
    })
}
