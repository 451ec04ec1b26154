use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::weights::{expected_tensors, random_weights, InitScheme, ModelWeights};
use super::{ForwardCounters, RescorerConfig, SelfAttentionMode};
use crate::error::{Error, Result};
use crate::exec::{self, Executor};
use crate::nn::{self, AttentionMask, AttentionWeights, FeedForwardWeights, Linear};
use crate::tensor::{self, Scalar, Tensor, LAYER_NORM_EPS};
use crate::vocab::{EOS, PAD, SOS};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormWeights<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttention<T = f32> {
    pub attn: AttentionWeights<T>,
    pub norm: LayerNormWeights<T>,
}

/// One decoder layer. Without `cross` it is a self-decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer<T = f32> {
    pub self_attn: AttentionWeights<T>,
    pub self_norm: LayerNormWeights<T>,
    pub cross: Option<CrossAttention<T>>,
    pub ffn: FeedForwardWeights<T>,
    pub ffn_norm: LayerNormWeights<T>,
}

/// Two-layer projection stack adapting first-pass encoder features to the
/// rescorer width: `relu(x * p1 + b1) * p2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdditionalEncoder<T = f32> {
    pub proj1: Linear<T>,
    pub proj2: Linear<T>,
}

impl<T: Scalar> AdditionalEncoder<T> {
    pub(crate) fn apply(
        &self,
        exec: &dyn Executor,
        features: &Tensor<T>,
        mut cache: Option<&mut EncoderCache<T>>,
    ) -> Result<Tensor<T>> {
        if features.rank() != 2 || features.cols() != self.proj1.in_dim() {
            return Err(Error::Dimension {
                op: "additional_encoder_forward",
                left: features.shape().to_vec(),
                right: self.proj1.weight.shape().to_vec(),
            });
        }
        let frames = features.rows();
        let mut hidden = self.proj1.apply(exec, features.data(), frames);
        nn::relu_in_place(&mut hidden);
        let e = self.proj2.apply(exec, &hidden, frames);
        if let Some(c) = cache.as_deref_mut() {
            c.features = features.data().to_vec();
            c.hidden = hidden;
            c.frames = frames;
        }
        Tensor::matrix(frames, self.proj2.out_dim(), e)
    }

    fn linears_mut(&mut self) -> [&mut Linear<T>; 2] {
        [&mut self.proj1, &mut self.proj2]
    }
}

/// All trainable tensors of a Transformer rescorer.
#[derive(Debug, Clone, PartialEq)]
pub struct RescorerParams<T = f32> {
    pub embedding: Tensor<T>,
    pub encoder: AdditionalEncoder<T>,
    pub layers: Vec<DecoderLayer<T>>,
    pub output: Linear<T>,
}

fn take_linear<T: Scalar>(
    w: &mut ModelWeights<T>,
    prefix: &str,
    din: usize,
    dout: usize,
) -> Result<Linear<T>> {
    let weight = w.take(&format!("{prefix}.weight"), &[din, dout])?;
    let bias = w.take(&format!("{prefix}.bias"), &[dout])?;
    Linear::new(weight, Some(bias))
}

fn take_norm<T: Scalar>(
    w: &mut ModelWeights<T>,
    prefix: &str,
    d: usize,
) -> Result<LayerNormWeights<T>> {
    Ok(LayerNormWeights {
        gamma: w.take(&format!("{prefix}.gamma"), &[d])?,
        beta: w.take(&format!("{prefix}.beta"), &[d])?,
    })
}

fn take_attention<T: Scalar>(
    w: &mut ModelWeights<T>,
    prefix: &str,
    d: usize,
) -> Result<AttentionWeights<T>> {
    Ok(AttentionWeights {
        q: take_linear(w, &format!("{prefix}.q"), d, d)?,
        k: take_linear(w, &format!("{prefix}.k"), d, d)?,
        v: take_linear(w, &format!("{prefix}.v"), d, d)?,
        o: take_linear(w, &format!("{prefix}.o"), d, d)?,
    })
}

fn push_linear<'a, T>(out: &mut Vec<(String, &'a Tensor<T>)>, prefix: &str, l: &'a Linear<T>) {
    out.push((format!("{prefix}.weight"), &l.weight));
    if let Some(b) = &l.bias {
        out.push((format!("{prefix}.bias"), b));
    }
}

fn push_linear_mut<'a, T>(
    out: &mut Vec<(String, &'a mut Tensor<T>)>,
    prefix: &str,
    l: &'a mut Linear<T>,
) {
    out.push((format!("{prefix}.weight"), &mut l.weight));
    if let Some(b) = &mut l.bias {
        out.push((format!("{prefix}.bias"), b));
    }
}

impl<T: Scalar> RescorerParams<T> {
    /// Moves the tensors a configuration needs out of `weights`. Fails on a
    /// missing or misshapen tensor, and on any tensor left over.
    pub fn from_weights(config: &RescorerConfig, mut weights: ModelWeights<T>) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let w = &mut weights;
        let embedding = w.take("embedding", &[config.vocab_size, d])?;
        let encoder = AdditionalEncoder {
            proj1: take_linear(w, "encoder.proj1", config.enc_in_dim, d)?,
            proj2: take_linear(w, "encoder.proj2", d, d)?,
        };
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 1..=config.num_layers {
            let self_attn = take_attention(w, &format!("layers.{l}.self_attn"), d)?;
            let self_norm = take_norm(w, &format!("layers.{l}.self_attn_norm"), d)?;
            let cross = if config.has_cross_attention(l) {
                Some(CrossAttention {
                    attn: take_attention(w, &format!("layers.{l}.cross_attn"), d)?,
                    norm: take_norm(w, &format!("layers.{l}.cross_attn_norm"), d)?,
                })
            } else {
                None
            };
            let ffn = FeedForwardWeights {
                w1: take_linear(w, &format!("layers.{l}.ffn.w1"), d, config.d_ff)?,
                w2: take_linear(w, &format!("layers.{l}.ffn.w2"), config.d_ff, d)?,
            };
            let ffn_norm = take_norm(w, &format!("layers.{l}.ffn_norm"), d)?;
            layers.push(DecoderLayer {
                self_attn,
                self_norm,
                cross,
                ffn,
                ffn_norm,
            });
        }
        let output = take_linear(w, "output", d, config.vocab_size)?;
        weights.reject_leftovers()?;
        Ok(Self {
            embedding,
            encoder,
            layers,
            output,
        })
    }

    pub fn zeros(config: &RescorerConfig) -> Result<Self> {
        let mut w = ModelWeights::new();
        for (name, shape) in expected_tensors(config) {
            w.insert(name, Tensor::zeros(&shape));
        }
        Self::from_weights(config, w)
    }

    /// Tensors with their weight-file names, in canonical order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        out.push((String::from("embedding"), &self.embedding));
        push_linear(&mut out, "encoder.proj1", &self.encoder.proj1);
        push_linear(&mut out, "encoder.proj2", &self.encoder.proj2);
        for (i, layer) in self.layers.iter().enumerate() {
            let l = i + 1;
            let a = &layer.self_attn;
            for (p, lin) in [("q", &a.q), ("k", &a.k), ("v", &a.v), ("o", &a.o)] {
                push_linear(&mut out, &format!("layers.{l}.self_attn.{p}"), lin);
            }
            out.push((format!("layers.{l}.self_attn_norm.gamma"), &layer.self_norm.gamma));
            out.push((format!("layers.{l}.self_attn_norm.beta"), &layer.self_norm.beta));
            if let Some(c) = &layer.cross {
                let a = &c.attn;
                for (p, lin) in [("q", &a.q), ("k", &a.k), ("v", &a.v), ("o", &a.o)] {
                    push_linear(&mut out, &format!("layers.{l}.cross_attn.{p}"), lin);
                }
                out.push((format!("layers.{l}.cross_attn_norm.gamma"), &c.norm.gamma));
                out.push((format!("layers.{l}.cross_attn_norm.beta"), &c.norm.beta));
            }
            push_linear(&mut out, &format!("layers.{l}.ffn.w1"), &layer.ffn.w1);
            push_linear(&mut out, &format!("layers.{l}.ffn.w2"), &layer.ffn.w2);
            out.push((format!("layers.{l}.ffn_norm.gamma"), &layer.ffn_norm.gamma));
            out.push((format!("layers.{l}.ffn_norm.beta"), &layer.ffn_norm.beta));
        }
        push_linear(&mut out, "output", &self.output);
        out
    }

    /// Mutable counterpart of [`named`](Self::named), same order.
    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        out.push((String::from("embedding"), &mut self.embedding));
        push_linear_mut(&mut out, "encoder.proj1", &mut self.encoder.proj1);
        push_linear_mut(&mut out, "encoder.proj2", &mut self.encoder.proj2);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let l = i + 1;
            let a = &mut layer.self_attn;
            for (p, lin) in [("q", &mut a.q), ("k", &mut a.k), ("v", &mut a.v), ("o", &mut a.o)] {
                push_linear_mut(&mut out, &format!("layers.{l}.self_attn.{p}"), lin);
            }
            out.push((format!("layers.{l}.self_attn_norm.gamma"), &mut layer.self_norm.gamma));
            out.push((format!("layers.{l}.self_attn_norm.beta"), &mut layer.self_norm.beta));
            if let Some(c) = &mut layer.cross {
                let a = &mut c.attn;
                for (p, lin) in [("q", &mut a.q), ("k", &mut a.k), ("v", &mut a.v), ("o", &mut a.o)]
                {
                    push_linear_mut(&mut out, &format!("layers.{l}.cross_attn.{p}"), lin);
                }
                out.push((format!("layers.{l}.cross_attn_norm.gamma"), &mut c.norm.gamma));
                out.push((format!("layers.{l}.cross_attn_norm.beta"), &mut c.norm.beta));
            }
            push_linear_mut(&mut out, &format!("layers.{l}.ffn.w1"), &mut layer.ffn.w1);
            push_linear_mut(&mut out, &format!("layers.{l}.ffn.w2"), &mut layer.ffn.w2);
            out.push((format!("layers.{l}.ffn_norm.gamma"), &mut layer.ffn_norm.gamma));
            out.push((format!("layers.{l}.ffn_norm.beta"), &mut layer.ffn_norm.beta));
        }
        push_linear_mut(&mut out, "output", &mut self.output);
        out
    }

    pub fn to_weights(&self) -> ModelWeights<T> {
        let mut w = ModelWeights::new();
        for (name, t) in self.named() {
            w.insert(name, t.clone());
        }
        w
    }

    /// `self += alpha * other`, tensor by tensor.
    pub fn axpy(&mut self, alpha: T, other: &Self) {
        let theirs = other.named();
        for ((_, mine), (_, t)) in self.named_mut().into_iter().zip(theirs) {
            mine.axpy(alpha, t);
        }
    }

    pub fn cast<U: Scalar>(&self, config: &RescorerConfig) -> RescorerParams<U> {
        RescorerParams::from_weights(config, self.to_weights().cast())
            .expect("same configuration")
    }

    fn linears_mut(&mut self) -> Vec<&mut Linear<T>> {
        let mut out: Vec<&mut Linear<T>> = Vec::new();
        out.extend(self.encoder.linears_mut());
        for layer in &mut self.layers {
            out.extend(layer.self_attn.linears_mut());
            if let Some(c) = &mut layer.cross {
                out.extend(c.attn.linears_mut());
            }
            out.push(&mut layer.ffn.w1);
            out.push(&mut layer.ffn.w2);
        }
        out.push(&mut self.output);
        out
    }
}

/// Hypotheses laid out for one batched decoder pass.
///
/// Sequence `b` feeds `SOS y_1 .. y_n` and predicts `y_1 .. y_n EOS`; both
/// are right-padded with `PAD` to `seq_len` positions and `lengths[b] = n + 1`
/// positions are real.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    inputs: Vec<u32>,
    targets: Vec<u32>,
    lengths: Vec<usize>,
    seq_len: usize,
}

impl TokenBatch {
    pub fn from_hypotheses(hyps: &[&[u32]]) -> Self {
        let s = hyps.iter().map(|h| h.len() + 1).max().unwrap_or(1);
        Self::padded(hyps, s)
    }

    /// Like [`from_hypotheses`](Self::from_hypotheses) but padded to at least
    /// `seq_len` positions.
    pub fn padded(hyps: &[&[u32]], seq_len: usize) -> Self {
        let s = hyps.iter().map(|h| h.len() + 1).max().unwrap_or(1).max(seq_len);
        let mut inputs = vec![PAD; hyps.len() * s];
        let mut targets = vec![PAD; hyps.len() * s];
        for (b, h) in hyps.iter().enumerate() {
            let row = b * s;
            inputs[row] = SOS;
            inputs[row + 1..row + 1 + h.len()].copy_from_slice(h);
            targets[row..row + h.len()].copy_from_slice(h);
            targets[row + h.len()] = EOS;
        }
        Self {
            inputs,
            targets,
            lengths: hyps.iter().map(|h| h.len() + 1).collect(),
            seq_len: s,
        }
    }

    /// Replaces the decoder inputs (targets stay as they are), as done when
    /// training with randomly swapped input tokens.
    pub fn with_inputs(mut self, inputs: Vec<u32>) -> Result<Self> {
        if inputs.len() != self.inputs.len() {
            return Err(Error::Length(format!(
                "{} inputs for a batch of {}",
                inputs.len(),
                self.inputs.len()
            )));
        }
        self.inputs = inputs;
        Ok(self)
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn inputs(&self) -> &[u32] {
        &self.inputs
    }

    pub fn targets(&self) -> &[u32] {
        &self.targets
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }
}

/// Transformer rescorer: embeddings, decoder layers with cross-attention on
/// the configured layers, output projection, plus the additional encoder.
#[derive(Debug, Clone)]
pub struct TransformerRescorer<T = f32> {
    config: RescorerConfig,
    params: RescorerParams<T>,
    counters: ForwardCounters,
}

impl<T: Scalar> TransformerRescorer<T> {
    /// Validates `weights` against `config`. Missing, misshapen, orphaned
    /// and unknown tensors are each reported by name.
    pub fn build(config: RescorerConfig, weights: ModelWeights<T>) -> Result<Self> {
        let params = RescorerParams::from_weights(&config, weights)?;
        Ok(Self::from_params(config, params))
    }

    pub fn from_params(config: RescorerConfig, params: RescorerParams<T>) -> Self {
        Self {
            config,
            params,
            counters: ForwardCounters::default(),
        }
    }

    pub fn random(config: RescorerConfig, seed: u64) -> Result<Self> {
        Self::random_with(config, seed, InitScheme::default())
    }

    pub fn random_with(config: RescorerConfig, seed: u64, scheme: InitScheme) -> Result<Self> {
        config.validate()?;
        let w = random_weights(&expected_tensors(&config), seed, scheme);
        Self::build(config, w)
    }

    pub fn config(&self) -> &RescorerConfig {
        &self.config
    }

    pub fn params(&self) -> &RescorerParams<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut RescorerParams<T> {
        &mut self.params
    }

    pub fn into_params(self) -> RescorerParams<T> {
        self.params
    }

    pub fn counters(&self) -> &ForwardCounters {
        &self.counters
    }

    /// Quantizes every dense projection to int8. Embeddings, biases and
    /// layer norms stay in floating point.
    pub fn quantize(&mut self) -> Result<()> {
        for l in self.params.linears_mut() {
            l.quantize()?;
        }
        Ok(())
    }

    /// Runs the additional encoder over `T x enc_in_dim` features.
    pub fn encode(&self, exec: &dyn Executor, features: &Tensor<T>) -> Result<Tensor<T>> {
        self.params.encoder.apply(exec, features, None)
    }

    pub(crate) fn encode_cached(
        &self,
        exec: &dyn Executor,
        features: &Tensor<T>,
        cache: &mut EncoderCache<T>,
    ) -> Result<Tensor<T>> {
        self.params.encoder.apply(exec, features, Some(cache))
    }

    fn check_batch(&self, batch: &TokenBatch) -> Result<()> {
        let s = batch.seq_len();
        if s > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: s,
                max: self.config.max_seq_len,
            });
        }
        let vocab = self.config.vocab_size;
        for (i, &id) in batch.inputs().iter().chain(batch.targets()).enumerate() {
            if id as usize >= vocab {
                return Err(Error::TokenOutOfRange {
                    position: i % s,
                    id,
                    vocab,
                });
            }
        }
        Ok(())
    }

    /// Scores every position of every sequence in one batched pass. `e` is the
    /// `T x d_model` additional-encoder output. Returns logits shaped
    /// `[batch, seq_len, vocab]`.
    pub fn forward(
        &self,
        exec: &dyn Executor,
        e: &Tensor<T>,
        batch: &TokenBatch,
    ) -> Result<Tensor<T>> {
        self.forward_impl(exec, e, batch, None)
    }

    pub(crate) fn forward_impl(
        &self,
        exec: &dyn Executor,
        e: &Tensor<T>,
        batch: &TokenBatch,
        mut cache: Option<&mut DecoderCache<T>>,
    ) -> Result<Tensor<T>> {
        let cfg = &self.config;
        let d = cfg.d_model;
        if e.rank() != 2 || e.cols() != d {
            return Err(Error::Dimension {
                op: "transformer_rescorer_forward",
                left: e.shape().to_vec(),
                right: vec![cfg.d_model],
            });
        }
        self.check_batch(batch)?;
        self.counters.forward();

        let (b, s) = (batch.batch_size(), batch.seq_len());
        let n = b * s;
        let mut x = Vec::with_capacity(n * d);
        for seq in batch.inputs().chunks(s) {
            x.extend_from_slice(nn::embed_and_position(seq, &self.params.embedding)?.data());
        }
        let causal = cfg.self_attention_mode == SelfAttentionMode::Causal;
        let self_masks: Vec<AttentionMask> = batch
            .lengths()
            .iter()
            .map(|&len| AttentionMask {
                causal,
                valid_keys: len,
            })
            .collect();
        let frames = e.rows();
        let eps = T::lit(LAYER_NORM_EPS);

        for layer in &self.params.layers {
            let mut lc = cache.as_ref().map(|_| LayerCache::default());
            if let Some(c) = lc.as_mut() {
                c.x_in = x.clone();
            }
            let sa = attention_block(
                exec,
                &layer.self_attn,
                &x,
                KeyValues::PerSequence,
                s,
                &self_masks,
                cfg.num_heads,
                lc.as_mut().map(|c| &mut c.self_attn),
            );
            x = add_and_norm(&x, &sa, &layer.self_norm, eps, lc.as_mut().map(|c| &mut c.self_ln));

            if let Some(cross) = &layer.cross {
                let masks = vec![AttentionMask::full(frames); b];
                let mut cc = lc.as_ref().map(|_| CrossCache {
                    x_in: x.clone(),
                    ..CrossCache::default()
                });
                let ca = attention_block(
                    exec,
                    &cross.attn,
                    &x,
                    KeyValues::Shared(e.data(), frames),
                    s,
                    &masks,
                    cfg.num_heads,
                    cc.as_mut().map(|c| &mut c.attn),
                );
                x = add_and_norm(&x, &ca, &cross.norm, eps, cc.as_mut().map(|c| &mut c.ln));
                if let Some(c) = lc.as_mut() {
                    c.cross = cc;
                }
            }

            let mut hidden = layer.ffn.w1.apply(exec, &x, n);
            nn::relu_in_place(&mut hidden);
            let f = layer.ffn.w2.apply(exec, &hidden, n);
            if let Some(c) = lc.as_mut() {
                c.ffn_in = x.clone();
                c.ffn_hidden = hidden;
            }
            x = add_and_norm(&x, &f, &layer.ffn_norm, eps, lc.as_mut().map(|c| &mut c.ffn_ln));

            if let (Some(c), Some(lc)) = (cache.as_deref_mut(), lc) {
                c.layers.push(lc);
            }
        }
        let logits = self.params.output.apply(exec, &x, n);
        if let Some(c) = cache {
            c.final_x = x;
        }
        Tensor::new(&[b, s, cfg.vocab_size], logits)
    }
}

pub(crate) enum KeyValues<'a, T> {
    /// Each sequence attends over its own rows.
    PerSequence,
    /// Every sequence attends over the same `frames x d` memory.
    Shared(&'a [T], usize),
}

/// Attention sublayer over a batch of `rows.len() / (s * d)` sequences of
/// `s` positions, including the output projection.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_block<T: Scalar>(
    exec: &dyn Executor,
    w: &AttentionWeights<T>,
    x: &[T],
    kv: KeyValues<'_, T>,
    s: usize,
    masks: &[AttentionMask],
    heads: usize,
    cache: Option<&mut AttnCache<T>>,
) -> Vec<T> {
    let d = w.d_model();
    let n = x.len() / d;
    let b = masks.len();
    let q = w.q.apply(exec, x, n);
    let (k, v, kv_rows, shared) = match kv {
        KeyValues::PerSequence => (w.k.apply(exec, x, n), w.v.apply(exec, x, n), s, false),
        KeyValues::Shared(mem, frames) => (
            w.k.apply(exec, mem, frames),
            w.v.apply(exec, mem, frames),
            frames,
            true,
        ),
    };
    let keep_probs = cache.is_some();
    let per_seq = exec::map_indices(exec, b, |i| {
        let qs = &q[i * s * d..(i + 1) * s * d];
        let (ks, vs) = if shared {
            (&k[..], &v[..])
        } else {
            (
                &k[i * s * d..(i + 1) * s * d],
                &v[i * s * d..(i + 1) * s * d],
            )
        };
        let mut probs = Vec::new();
        let ctx = nn::attention_core(
            qs,
            ks,
            vs,
            s,
            kv_rows,
            d,
            heads,
            &masks[i],
            keep_probs.then_some(&mut probs),
        );
        (ctx, probs)
    });
    let mut ctx = Vec::with_capacity(n * d);
    let mut probs = Vec::with_capacity(if keep_probs { b } else { 0 });
    for (c, p) in per_seq {
        ctx.extend_from_slice(&c);
        if keep_probs {
            probs.push(p);
        }
    }
    let out = w.o.apply(exec, &ctx, n);
    if let Some(c) = cache {
        c.q = q;
        c.k = k;
        c.v = v;
        c.ctx = ctx;
        c.probs = probs;
    }
    out
}

/// `layer_norm(x + sub)`.
pub(crate) fn add_and_norm<T: Scalar>(
    x: &[T],
    sub: &[T],
    norm: &LayerNormWeights<T>,
    eps: T,
    cache: Option<&mut LnCache<T>>,
) -> Vec<T> {
    let mut z: Vec<T> = x.iter().zip(sub).map(|(&a, &b)| a + b).collect();
    match cache {
        None => tensor::layer_norm_rows(&mut z, norm.gamma.data(), norm.beta.data(), eps, None),
        Some(c) => {
            c.inv_std.clear();
            tensor::layer_norm_rows(
                &mut z,
                &vec![T::one(); norm.gamma.len()],
                &vec![T::zero(); norm.beta.len()],
                eps,
                Some(&mut c.inv_std),
            );
            c.xhat = z.clone();
            let (g, bt) = (norm.gamma.data(), norm.beta.data());
            for row in z.chunks_mut(g.len()) {
                for ((v, &gv), &bv) in row.iter_mut().zip(g).zip(bt) {
                    *v = *v * gv + bv;
                }
            }
        }
    }
    z
}

#[derive(Debug, Clone, Default)]
pub(crate) struct EncoderCache<T> {
    pub features: Vec<T>,
    pub hidden: Vec<T>,
    pub frames: usize,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct AttnCache<T> {
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
    pub ctx: Vec<T>,
    /// Per sequence, `[head][query][key]`.
    pub probs: Vec<Vec<T>>,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct LnCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct CrossCache<T> {
    pub x_in: Vec<T>,
    pub attn: AttnCache<T>,
    pub ln: LnCache<T>,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct LayerCache<T> {
    pub x_in: Vec<T>,
    pub self_attn: AttnCache<T>,
    pub self_ln: LnCache<T>,
    pub cross: Option<CrossCache<T>>,
    pub ffn_in: Vec<T>,
    /// Post-ReLU hidden activations.
    pub ffn_hidden: Vec<T>,
    pub ffn_ln: LnCache<T>,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct DecoderCache<T> {
    pub layers: Vec<LayerCache<T>>,
    pub final_x: Vec<T>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::Sequential;

    #[test]
    fn build_accepts_paper_and_toy_configs() {
        TransformerRescorer::<f32>::random(RescorerConfig::toy(), 1).unwrap();
        TransformerRescorer::<f32>::random(RescorerConfig::paper(), 1).unwrap();
    }

    #[test]
    fn build_rejects_orphan_cross_attention() {
        let cfg = RescorerConfig::toy();
        let mut w = random_weights::<f32>(&expected_tensors(&cfg), 0, InitScheme::default());
        w.insert("layers.2.cross_attn.q.weight", Tensor::zeros(&[16, 16]));
        match TransformerRescorer::build(cfg, w) {
            Err(Error::OrphanCrossAttention { layer, name }) => {
                assert_eq!(layer, 2);
                assert_eq!(name, "layers.2.cross_attn.q.weight");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn build_reports_missing_and_misshapen_tensors() {
        let cfg = RescorerConfig::toy();
        let full = random_weights::<f32>(&expected_tensors(&cfg), 0, InitScheme::default());

        let mut w = full.clone();
        w.remove("layers.3.ffn.w2.bias");
        assert_eq!(
            TransformerRescorer::build(cfg.clone(), w).err(),
            Some(Error::MissingTensor("layers.3.ffn.w2.bias".into()))
        );

        let mut w = full.clone();
        w.insert("output.bias", Tensor::zeros(&[63]));
        assert!(matches!(
            TransformerRescorer::build(cfg.clone(), w),
            Err(Error::TensorShape { .. })
        ));

        let mut w = full;
        w.insert("extra", Tensor::zeros(&[1]));
        assert_eq!(
            TransformerRescorer::build(cfg, w).err(),
            Some(Error::UnknownTensor("extra".into()))
        );
    }

    #[test]
    fn named_round_trips_through_weights() {
        let m = TransformerRescorer::<f32>::random(RescorerConfig::toy(), 5).unwrap();
        let w = m.params().to_weights();
        let names: Vec<String> = expected_tensors(m.config()).into_iter().map(|(n, _)| n).collect();
        let got: Vec<String> = m.params().named().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, got);
        let rebuilt = TransformerRescorer::build(m.config().clone(), w).unwrap();
        assert_eq!(rebuilt.params(), m.params());
    }

    #[test]
    fn encoder_shapes_and_zero_case() {
        let cfg = RescorerConfig::toy();
        let mut m = TransformerRescorer::<f32>::random(cfg.clone(), 2).unwrap();
        let one = Tensor::full(&[1, cfg.enc_in_dim], 0.5);
        assert_eq!(m.encode(&Sequential, &one).unwrap().shape(), &[1, cfg.d_model]);
        // Biases default to zero, so zero features map to zero.
        let zero = Tensor::zeros(&[3, cfg.enc_in_dim]);
        assert!(m.encode(&Sequential, &zero).unwrap().data().iter().all(|&v| v == 0.0));
        let bad = Tensor::zeros(&[3, cfg.enc_in_dim + 1]);
        assert!(matches!(m.encode(&Sequential, &bad), Err(Error::Dimension { .. })));
        m.params_mut().encoder.proj2.bias = Some(Tensor::full(&[cfg.d_model], 1.0));
        assert!(m.encode(&Sequential, &zero).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn hand_set_two_dim_encoder() {
        let enc = AdditionalEncoder {
            proj1: Linear::new(
                Tensor::<f64>::from_rows(&[[1.0, -1.0], [2.0, 0.5]]),
                Some(Tensor::vector(vec![0.0, 0.1])),
            )
            .unwrap(),
            proj2: Linear::new(
                Tensor::<f64>::from_rows(&[[0.5, 1.0], [-1.0, 2.0]]),
                Some(Tensor::vector(vec![0.2, 0.0])),
            )
            .unwrap(),
        };
        // x = [1, 1]: pre = [1 + 2, -1 + 0.5 + 0.1] = [3, -0.4] -> relu [3, 0].
        let x = Tensor::from_rows(&[[1.0, 1.0]]);
        let e = enc.apply(&Sequential, &x, None).unwrap();
        assert_eq!(e.data(), &[3.0 * 0.5 + 0.2, 3.0]);
    }

    #[test]
    fn token_batch_layout() {
        let b = TokenBatch::from_hypotheses(&[&[7, 8], &[9]]);
        assert_eq!(b.seq_len(), 3);
        assert_eq!(b.inputs(), &[SOS, 7, 8, SOS, 9, PAD]);
        assert_eq!(b.targets(), &[7, 8, EOS, 9, EOS, PAD]);
        assert_eq!(b.lengths(), &[3, 2]);
        assert_eq!(TokenBatch::padded(&[&[7]], 5).seq_len(), 5);
    }

    #[test]
    fn forward_rejects_bad_tokens_and_lengths() {
        let cfg = RescorerConfig::toy();
        let m = TransformerRescorer::<f32>::random(cfg.clone(), 2).unwrap();
        let e = Tensor::zeros(&[4, cfg.d_model]);
        let bad = TokenBatch::from_hypotheses(&[&[5, 64]]);
        assert!(matches!(
            m.forward(&Sequential, &e, &bad),
            Err(Error::TokenOutOfRange { id: 64, position: 2, .. })
        ));
        let long: Vec<u32> = vec![5; cfg.max_seq_len];
        let batch = TokenBatch::from_hypotheses(&[&long]);
        assert!(matches!(
            m.forward(&Sequential, &e, &batch),
            Err(Error::SequenceTooLong { .. })
        ));
    }
}
