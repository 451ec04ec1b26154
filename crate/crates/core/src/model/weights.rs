use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::RescorerConfig;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Named tensors, keyed by the names used in weight files.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelWeights<T = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ModelWeights<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    /// Inserts a tensor, returning the one it replaced.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Option<Tensor<T>> {
        self.tensors.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn cast<U: Scalar>(&self) -> ModelWeights<U> {
        ModelWeights {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Removes and returns `name`, checking its shape.
    pub(crate) fn take(&mut self, name: &str, shape: &[usize]) -> Result<Tensor<T>> {
        let t = self
            .tensors
            .remove(name)
            .ok_or_else(|| Error::MissingTensor(String::from(name)))?;
        if t.shape() != shape {
            return Err(Error::TensorShape {
                name: String::from(name),
                expected: shape.to_vec(),
                found: t.shape().to_vec(),
            });
        }
        Ok(t)
    }

    /// Errors on any tensor left over after the model took what it needs.
    /// Cross-attention tensors on a self-decoder layer are reported as
    /// orphans, anything else as unknown.
    pub(crate) fn reject_leftovers(&self) -> Result<()> {
        let Some(name) = self.tensors.keys().next() else {
            return Ok(());
        };
        if let Some(layer) = cross_attention_layer_of(name) {
            return Err(Error::OrphanCrossAttention {
                name: name.clone(),
                layer,
            });
        }
        Err(Error::UnknownTensor(name.clone()))
    }
}

fn cross_attention_layer_of(name: &str) -> Option<usize> {
    let rest = name.strip_prefix("layers.")?;
    let (idx, tail) = rest.split_once('.')?;
    if tail.starts_with("cross_attn") {
        idx.parse().ok()
    } else {
        None
    }
}

fn push_linear(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, din: usize, dout: usize) {
    out.push((format!("{prefix}.weight"), vec![din, dout]));
    out.push((format!("{prefix}.bias"), vec![dout]));
}

fn push_norm(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, d: usize) {
    out.push((format!("{prefix}.gamma"), vec![d]));
    out.push((format!("{prefix}.beta"), vec![d]));
}

/// Every tensor a configuration implies, in canonical order, with its shape.
/// Linear weights are stored `in x out`.
pub fn expected_tensors(config: &RescorerConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.d_model;
    let mut out = Vec::new();
    out.push((String::from("embedding"), vec![config.vocab_size, d]));
    push_linear(&mut out, "encoder.proj1", config.enc_in_dim, d);
    push_linear(&mut out, "encoder.proj2", d, d);
    for l in 1..=config.num_layers {
        for p in ["q", "k", "v", "o"] {
            push_linear(&mut out, &format!("layers.{l}.self_attn.{p}"), d, d);
        }
        push_norm(&mut out, &format!("layers.{l}.self_attn_norm"), d);
        if config.has_cross_attention(l) {
            for p in ["q", "k", "v", "o"] {
                push_linear(&mut out, &format!("layers.{l}.cross_attn.{p}"), d, d);
            }
            push_norm(&mut out, &format!("layers.{l}.cross_attn_norm"), d);
        }
        push_linear(&mut out, &format!("layers.{l}.ffn.w1"), d, config.d_ff);
        push_linear(&mut out, &format!("layers.{l}.ffn.w2"), config.d_ff, d);
        push_norm(&mut out, &format!("layers.{l}.ffn_norm"), d);
    }
    push_linear(&mut out, "output", d, config.vocab_size);
    out
}

/// How random weights are drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitScheme {
    /// Standard deviation of biases and of layer-norm offsets
    /// (`gamma = 1 + noise`, `beta = noise`). Zero gives the usual
    /// zero-bias, unit-gain start.
    pub bias_std: f64,
}

impl Default for InitScheme {
    fn default() -> Self {
        Self { bias_std: 0.0 }
    }
}

/// Draws a tensor for every `(name, shape)`: matrices from `N(0, 1/rows)`,
/// embeddings from `N(0, 1/cols)` (they are scaled by `sqrt(d)` on lookup).
pub fn random_weights<T: Scalar>(
    shapes: &[(String, Vec<usize>)],
    seed: u64,
    scheme: InitScheme,
) -> ModelWeights<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = ModelWeights::new();
    for (name, shape) in shapes {
        let t = if shape.len() == 2 {
            let fan = if name.contains("embedding") { shape[1] } else { shape[0] };
            let dist = Normal::new(0.0, 1.0 / Float::sqrt(fan as f64)).expect("valid std");
            Tensor::from_fn(shape, |_| T::lit(dist.sample(&mut rng)))
        } else if scheme.bias_std > 0.0 {
            let dist = Normal::new(0.0, scheme.bias_std).expect("valid std");
            let base = if name.ends_with("gamma") { 1.0 } else { 0.0 };
            Tensor::from_fn(shape, |_| T::lit(base + dist.sample(&mut rng)))
        } else if name.ends_with("gamma") {
            Tensor::full(shape, T::one())
        } else {
            Tensor::zeros(shape)
        };
        w.insert(name.clone(), t);
    }
    w
}
