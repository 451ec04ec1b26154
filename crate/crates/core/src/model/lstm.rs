use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;


use super::weights::{random_weights, InitScheme, ModelWeights};
use super::transformer::AdditionalEncoder;
use super::ForwardCounters;
use crate::error::{Error, Result};
use crate::exec::{Executor, Sequential};
use crate::nn::{self, Linear, LstmState, LstmWeights};
use crate::tensor::{self, Scalar, Tensor};

/// Attention-based LSTM rescorer hyperparameters.
///
/// Layer 1 consumes `[embedding; attention context]`; each higher layer
/// consumes the layer below. The attention query is the previous top-layer
/// state and the output projection reads the current top-layer state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LstmRescorerConfig {
    pub num_layers: usize,
    pub hidden: usize,
    /// Token embedding width.
    pub d_model: usize,
    pub vocab_size: usize,
    pub attention_dim: usize,
    /// Width of the additional-encoder output the attention reads.
    pub context_dim: usize,
    pub enc_in_dim: usize,
}

impl LstmRescorerConfig {
    /// Two 1280-unit layers over 640-wide embeddings and context.
    pub fn baseline() -> Self {
        Self {
            num_layers: 2,
            hidden: 1280,
            d_model: 640,
            vocab_size: 4096,
            attention_dim: 640,
            context_dim: 640,
            enc_in_dim: 512,
        }
    }

    pub fn toy() -> Self {
        Self {
            num_layers: 2,
            hidden: 24,
            d_model: 16,
            vocab_size: 64,
            attention_dim: 16,
            context_dim: 16,
            enc_in_dim: 24,
        }
    }

    pub fn layer_input(&self, layer: usize) -> usize {
        if layer == 0 {
            self.d_model + self.context_dim
        } else {
            self.hidden
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.num_layers,
            self.hidden,
            self.d_model,
            self.attention_dim,
            self.context_dim,
            self.enc_in_dim,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(String::from(
                "LSTM rescorer dimensions must be positive",
            )));
        }
        if self.vocab_size <= crate::vocab::FIRST_PIECE as usize {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no word pieces",
                self.vocab_size
            )));
        }
        Ok(())
    }

    /// Every tensor of the baseline with its shape.
    pub fn expected_tensors(&self) -> Vec<(String, Vec<usize>)> {
        let (h, a, c) = (self.hidden, self.attention_dim, self.context_dim);
        let mut out = vec![
            (String::from("embedding"), vec![self.vocab_size, self.d_model]),
            (String::from("encoder.proj1.weight"), vec![self.enc_in_dim, c]),
            (String::from("encoder.proj1.bias"), vec![c]),
            (String::from("encoder.proj2.weight"), vec![c, c]),
            (String::from("encoder.proj2.bias"), vec![c]),
        ];
        for l in 0..self.num_layers {
            let i = self.layer_input(l);
            out.push((format!("lstm.{}.weight", l + 1), vec![4 * h, i + h]));
            out.push((format!("lstm.{}.bias", l + 1), vec![4 * h]));
        }
        out.extend([
            (String::from("attention.query.weight"), vec![h, a]),
            (String::from("attention.query.bias"), vec![a]),
            (String::from("attention.key.weight"), vec![c, a]),
            (String::from("attention.key.bias"), vec![a]),
            (String::from("attention.score"), vec![a]),
            (String::from("output.weight"), vec![h, self.vocab_size]),
            (String::from("output.bias"), vec![self.vocab_size]),
        ]);
        out
    }
}

/// Recurrent state carried between decoding steps.
#[derive(Debug, Clone)]
pub struct LstmDecoderState<T = f32> {
    layers: Vec<LstmState<T>>,
}

/// LAS-style attention LSTM rescorer. Hypotheses are scored token by token:
/// each step needs the state the previous step produced.
#[derive(Debug, Clone)]
pub struct LstmRescorer<T = f32> {
    config: LstmRescorerConfig,
    embedding: Tensor<T>,
    encoder: AdditionalEncoder<T>,
    layers: Vec<LstmWeights<T>>,
    query: Linear<T>,
    key: Linear<T>,
    score: Tensor<T>,
    output: Linear<T>,
    counters: ForwardCounters,
}

impl<T: Scalar> LstmRescorer<T> {
    pub fn build(config: LstmRescorerConfig, mut w: ModelWeights<T>) -> Result<Self> {
        config.validate()?;
        let shapes = config.expected_tensors();
        let mut take = |name: &str| -> Result<Tensor<T>> {
            let shape = &shapes
                .iter()
                .find(|(n, _)| n == name)
                .expect("known tensor name")
                .1;
            w.take(name, shape)
        };
        let linear = |w, b| Linear::new(w, Some(b));
        let embedding = take("embedding")?;
        let encoder = AdditionalEncoder {
            proj1: linear(take("encoder.proj1.weight")?, take("encoder.proj1.bias")?)?,
            proj2: linear(take("encoder.proj2.weight")?, take("encoder.proj2.bias")?)?,
        };
        let mut layers = Vec::new();
        for l in 1..=config.num_layers {
            layers.push(LstmWeights::new(
                take(&format!("lstm.{l}.weight"))?,
                take(&format!("lstm.{l}.bias"))?,
            )?);
        }
        let query = linear(take("attention.query.weight")?, take("attention.query.bias")?)?;
        let key = linear(take("attention.key.weight")?, take("attention.key.bias")?)?;
        let score = take("attention.score")?;
        let output = linear(take("output.weight")?, take("output.bias")?)?;
        w.reject_leftovers()?;
        Ok(Self {
            config,
            embedding,
            encoder,
            layers,
            query,
            key,
            score,
            output,
            counters: ForwardCounters::default(),
        })
    }

    pub fn random(config: LstmRescorerConfig, seed: u64) -> Result<Self> {
        let w = random_weights(&config.expected_tensors(), seed, InitScheme::default());
        Self::build(config, w)
    }

    pub fn config(&self) -> &LstmRescorerConfig {
        &self.config
    }

    pub fn counters(&self) -> &ForwardCounters {
        &self.counters
    }

    pub fn quantize(&mut self) -> Result<()> {
        for l in [
            &mut self.encoder.proj1,
            &mut self.encoder.proj2,
            &mut self.query,
            &mut self.key,
            &mut self.output,
        ] {
            l.quantize()?;
        }
        for l in &mut self.layers {
            l.quantize()?;
        }
        Ok(())
    }

    pub fn encode(&self, exec: &dyn Executor, features: &Tensor<T>) -> Result<Tensor<T>> {
        self.encoder.apply(exec, features, None)
    }

    pub fn initial_state(&self) -> LstmDecoderState<T> {
        LstmDecoderState {
            layers: (0..self.layers.len())
                .map(|_| LstmState::zeros(self.config.hidden))
                .collect(),
        }
    }

    /// Projects the encoder output into attention-key space. Done once per
    /// utterance.
    pub fn attention_keys(&self, e: &Tensor<T>) -> Result<Tensor<T>> {
        self.key.forward(&Sequential, e)
    }

    /// One decoding step: attend with the previous top-layer state, run the
    /// LSTM stack on `[embedding(token); context]`, project to logits.
    pub fn step(
        &self,
        state: LstmDecoderState<T>,
        token: u32,
        e: &Tensor<T>,
        keys: &Tensor<T>,
    ) -> Result<(LstmDecoderState<T>, Vec<T>)> {
        let vocab = self.config.vocab_size;
        if token as usize >= vocab {
            return Err(Error::TokenOutOfRange {
                position: 0,
                id: token,
                vocab,
            });
        }
        self.counters.step();
        let top = &state.layers.last().expect("at least one layer").h;
        let q = self.query.apply(&Sequential, top, 1);
        let frames = e.rows();
        let mut scores = Vec::with_capacity(frames);
        for j in 0..frames {
            let s = keys
                .row(j)
                .iter()
                .zip(&q)
                .zip(self.score.data())
                .fold(T::zero(), |acc, ((&k, &qv), &v)| acc + v * (k + qv).tanh());
            scores.push(s);
        }
        tensor::softmax_in_place(&mut scores);
        let mut input = Vec::with_capacity(self.config.d_model + self.config.context_dim);
        let scale = T::lit(self.config.d_model as f64).sqrt();
        input.extend(self.embedding.row(token as usize).iter().map(|&v| v * scale));
        let mut ctx = vec![T::zero(); e.cols()];
        for (j, &a) in scores.iter().enumerate() {
            for (c, &x) in ctx.iter_mut().zip(e.row(j)) {
                *c = *c + a * x;
            }
        }
        input.extend_from_slice(&ctx);

        let mut next = Vec::with_capacity(self.layers.len());
        for (w, st) in self.layers.iter().zip(state.layers) {
            let (st, out) = nn::lstm_step(st, &input, w)?;
            input = out;
            next.push(st);
        }
        let logits = self.output.apply(&Sequential, &input, 1);
        Ok((LstmDecoderState { layers: next }, logits))
    }

    /// Scores `inputs` (SOS-prefixed) one step at a time. Returns `s x vocab`
    /// logits.
    pub fn forward(&self, e: &Tensor<T>, inputs: &[u32]) -> Result<Tensor<T>> {
        if e.rank() != 2 || e.cols() != self.config.context_dim {
            return Err(Error::Dimension {
                op: "lstm_rescorer_forward",
                left: e.shape().to_vec(),
                right: vec![self.config.context_dim],
            });
        }
        let keys = self.attention_keys(e)?;
        let mut state = self.initial_state();
        let mut out = Vec::with_capacity(inputs.len() * self.config.vocab_size);
        for (t, &tok) in inputs.iter().enumerate() {
            let (next, logits) = self.step(state, tok, e, &keys).map_err(|err| match err {
                Error::TokenOutOfRange { id, vocab, .. } => Error::TokenOutOfRange {
                    position: t,
                    id,
                    vocab,
                },
                other => other,
            })?;
            out.extend_from_slice(&logits);
            state = next;
        }
        Tensor::matrix(inputs.len(), self.config.vocab_size, out)
    }
}
