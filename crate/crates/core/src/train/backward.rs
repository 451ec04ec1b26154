//! Reverse-mode gradients of the Transformer rescorer.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::model::transformer::{AttnCache, DecoderCache, EncoderCache, LnCache};
use crate::model::{LayerNormWeights, RescorerParams, SelfAttentionMode, TokenBatch, TransformerRescorer};
use crate::nn::{AttentionMask, AttentionWeights, Linear};
use crate::scoring;
use crate::tensor::{self, Scalar, Tensor};

use super::loss::{ce_loss, mwer_loss, MwerBatch, MwerOutput};

/// Activations kept from a forward pass for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace<T = f32> {
    encoder: EncoderCache<T>,
    e: Tensor<T>,
    decoder: DecoderCache<T>,
    logits: Tensor<T>,
    batch: TokenBatch,
}

impl<T> ForwardTrace<T> {
    /// `[batch, seq_len, vocab]` logits.
    pub fn logits(&self) -> &Tensor<T> {
        &self.logits
    }

    pub fn batch(&self) -> &TokenBatch {
        &self.batch
    }
}

/// Encoder and decoder forward pass that records what the backward pass needs.
/// Quantized projections are not differentiated; train on float weights.
pub fn forward_traced<T: Scalar>(
    model: &TransformerRescorer<T>,
    exec: &dyn Executor,
    features: &Tensor<T>,
    batch: &TokenBatch,
) -> Result<ForwardTrace<T>> {
    let mut encoder = EncoderCache::default();
    let e = model.encode_cached(exec, features, &mut encoder)?;
    let mut decoder = DecoderCache::default();
    let logits = model.forward_impl(exec, &e, batch, Some(&mut decoder))?;
    Ok(ForwardTrace {
        encoder,
        e,
        decoder,
        logits,
        batch: batch.clone(),
    })
}

/// Gradients of every parameter given `d_logits`, the loss gradient with
/// respect to the traced logits.
pub fn backward<T: Scalar>(
    model: &TransformerRescorer<T>,
    trace: &ForwardTrace<T>,
    d_logits: &Tensor<T>,
) -> Result<RescorerParams<T>> {
    if d_logits.shape() != trace.logits.shape() {
        return Err(Error::Dimension {
            op: "backward",
            left: d_logits.shape().to_vec(),
            right: trace.logits.shape().to_vec(),
        });
    }
    let cfg = model.config();
    let p = model.params();
    let mut g = RescorerParams::zeros(cfg)?;
    let batch = &trace.batch;
    let (s, d) = (batch.seq_len(), cfg.d_model);
    let n = batch.batch_size() * s;
    let frames = trace.e.rows();
    let dec = &trace.decoder;

    let mut dx = linear_backward(&p.output, &dec.final_x, n, d_logits.data(), &mut g.output);
    let mut de = vec![T::zero(); frames * d];

    let causal = cfg.self_attention_mode == SelfAttentionMode::Causal;
    let self_masks: Vec<AttentionMask> = batch
        .lengths()
        .iter()
        .map(|&len| AttentionMask {
            causal,
            valid_keys: len,
        })
        .collect();
    let cross_masks = vec![AttentionMask::full(frames); batch.batch_size()];

    for (li, layer) in p.layers.iter().enumerate().rev() {
        let lc = &dec.layers[li];
        let gl = &mut g.layers[li];

        let dz = norm_backward(&lc.ffn_ln, &layer.ffn_norm, &dx, &mut gl.ffn_norm);
        let mut dh = linear_backward(&layer.ffn.w2, &lc.ffn_hidden, n, &dz, &mut gl.ffn.w2);
        relu_backward(&mut dh, &lc.ffn_hidden);
        let dxf = linear_backward(&layer.ffn.w1, &lc.ffn_in, n, &dh, &mut gl.ffn.w1);
        dx = add(&dz, &dxf);

        if let (Some(cross), Some(cc), Some(gc)) = (&layer.cross, &lc.cross, gl.cross.as_mut()) {
            let dz = norm_backward(&cc.ln, &cross.norm, &dx, &mut gc.norm);
            let (dq, dkv) = attention_backward(
                &cross.attn,
                &cc.attn,
                &cc.x_in,
                Some((trace.e.data(), frames)),
                s,
                &cross_masks,
                cfg.num_heads,
                &dz,
                &mut gc.attn,
            );
            dx = add(&dz, &dq);
            add_assign(&mut de, &dkv);
        }

        let dz = norm_backward(&lc.self_ln, &layer.self_norm, &dx, &mut gl.self_norm);
        let (dq, dkv) = attention_backward(
            &layer.self_attn,
            &lc.self_attn,
            &lc.x_in,
            None,
            s,
            &self_masks,
            cfg.num_heads,
            &dz,
            &mut gl.self_attn,
        );
        dx = add(&dz, &dq);
        add_assign(&mut dx, &dkv);
    }

    let scale = T::lit(d as f64).sqrt();
    for (r, &tok) in batch.inputs().iter().enumerate() {
        let row = g.embedding.row_mut(tok as usize);
        for (gv, &v) in row.iter_mut().zip(&dx[r * d..(r + 1) * d]) {
            *gv = *gv + v * scale;
        }
    }

    let enc = &trace.encoder;
    let mut dh = linear_backward(&p.encoder.proj2, &enc.hidden, frames, &de, &mut g.encoder.proj2);
    relu_backward(&mut dh, &enc.hidden);
    accumulate_params(&p.encoder.proj1, &enc.features, frames, &dh, &mut g.encoder.proj1);
    Ok(g)
}

/// Mean cross entropy of `batch` and its parameter gradients.
pub fn ce_objective<T: Scalar>(
    model: &TransformerRescorer<T>,
    exec: &dyn Executor,
    features: &Tensor<T>,
    batch: &TokenBatch,
) -> Result<(f64, RescorerParams<T>)> {
    let trace = forward_traced(model, exec, features, batch)?;
    let ce = ce_loss(&trace.logits, batch.targets(), batch.lengths())?;
    Ok((ce.loss, backward(model, &trace, &ce.grad)?))
}

/// Expected-word-error loss over a beam of hypotheses scored by the model,
/// and its parameter gradients.
pub fn mwer_objective<T: Scalar>(
    model: &TransformerRescorer<T>,
    exec: &dyn Executor,
    features: &Tensor<T>,
    hyps: &[&[u32]],
    word_errors: &[f64],
) -> Result<(MwerOutput, RescorerParams<T>)> {
    let batch = TokenBatch::from_hypotheses(hyps);
    let trace = forward_traced(model, exec, features, &batch)?;
    let (s, v) = (batch.seq_len(), model.config().vocab_size);
    let logits = trace.logits.data();
    let mut log_probs = Vec::with_capacity(hyps.len());
    for (b, &len) in batch.lengths().iter().enumerate() {
        let rows = &logits[b * s * v..(b * s + len) * v];
        log_probs.push(scoring::log_prob_rows(rows, v, &batch.targets()[b * s..b * s + len])?);
    }
    let out = mwer_loss(&MwerBatch {
        log_probs,
        word_errors: word_errors.to_vec(),
    })?;

    // d log P_m / d logits_t = onehot(y_t) - softmax(logits_t).
    let mut grad = vec![T::zero(); logits.len()];
    for (b, &len) in batch.lengths().iter().enumerate() {
        let gm = T::lit(out.grad[b]);
        for t in 0..len {
            let r = b * s + t;
            let row = &logits[r * v..(r + 1) * v];
            let lse = tensor::log_sum_exp(row);
            let g = &mut grad[r * v..(r + 1) * v];
            for (gv, &x) in g.iter_mut().zip(row) {
                *gv = -gm * (x - lse).exp();
            }
            let y = batch.targets()[r] as usize;
            g[y] = g[y] + gm;
        }
    }
    let grads = backward(model, &trace, &Tensor::new(trace.logits.shape(), grad)?)?;
    Ok((out, grads))
}

fn add<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x + y).collect()
}

fn add_assign<T: Scalar>(a: &mut [T], b: &[T]) {
    for (x, &y) in a.iter_mut().zip(b) {
        *x = *x + y;
    }
}

fn relu_backward<T: Scalar>(grad: &mut [T], post_relu: &[T]) {
    for (g, &h) in grad.iter_mut().zip(post_relu) {
        if h <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Adds the weight and bias gradients of `y = x W + b` into `g`.
fn accumulate_params<T: Scalar>(l: &Linear<T>, x: &[T], rows: usize, dy: &[T], g: &mut Linear<T>) {
    let (din, dout) = (l.in_dim(), l.out_dim());
    add_assign(g.weight.data_mut(), &tensor::gemm_tn(x, rows, din, dy, dout));
    if let Some(gb) = g.bias.as_mut() {
        for row in dy.chunks(dout) {
            add_assign(gb.data_mut(), row);
        }
    }
}

/// Like [`accumulate_params`], returning the input gradient `dy W^T`.
fn linear_backward<T: Scalar>(l: &Linear<T>, x: &[T], rows: usize, dy: &[T], g: &mut Linear<T>) -> Vec<T> {
    accumulate_params(l, x, rows, dy, g);
    tensor::gemm_nt(dy, rows, l.out_dim(), l.weight.data(), l.in_dim())
}

/// Backward through `y = normalize(z) * gamma + beta`; returns `dz`.
fn norm_backward<T: Scalar>(
    cache: &LnCache<T>,
    w: &LayerNormWeights<T>,
    dy: &[T],
    g: &mut LayerNormWeights<T>,
) -> Vec<T> {
    let gamma = w.gamma.data();
    let d = gamma.len();
    let dn = T::lit(d as f64);
    let mut dz = vec![T::zero(); dy.len()];
    let mut dxhat = vec![T::zero(); d];
    for (r, (dyr, xr)) in dy.chunks(d).zip(cache.xhat.chunks(d)).enumerate() {
        let gg = g.gamma.data_mut();
        for j in 0..d {
            gg[j] = gg[j] + dyr[j] * xr[j];
            dxhat[j] = dyr[j] * gamma[j];
        }
        add_assign(g.beta.data_mut(), dyr);
        let m1 = dxhat.iter().fold(T::zero(), |a, &v| a + v) / dn;
        let m2 = dxhat.iter().zip(xr).fold(T::zero(), |a, (&v, &x)| a + v * x) / dn;
        let inv = cache.inv_std[r];
        for (j, o) in dz[r * d..(r + 1) * d].iter_mut().enumerate() {
            *o = inv * (dxhat[j] - m1 - xr[j] * m2);
        }
    }
    dz
}

/// Backward through an attention sublayer. `x` holds the query-side input;
/// keys and values come from `x` itself (per sequence) or from a shared
/// memory of `frames` rows. Returns the gradients of the query-side input
/// and of the key/value source.
#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Scalar>(
    w: &AttentionWeights<T>,
    c: &AttnCache<T>,
    x: &[T],
    memory: Option<(&[T], usize)>,
    s: usize,
    masks: &[AttentionMask],
    heads: usize,
    dout: &[T],
    g: &mut AttentionWeights<T>,
) -> (Vec<T>, Vec<T>) {
    let d = w.d_model();
    let n = x.len() / d;
    let dctx = linear_backward(&w.o, &c.ctx, n, dout, &mut g.o);
    let (kv_rows, src, src_rows) = match memory {
        Some((mem, frames)) => (frames, mem, frames),
        None => (s, x, n),
    };
    let shared = memory.is_some();
    let dh = d / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut dq = vec![T::zero(); n * d];
    let mut dk = vec![T::zero(); src_rows * d];
    let mut dv = vec![T::zero(); src_rows * d];
    let mut dp = vec![T::zero(); kv_rows];
    for (seq, probs) in c.probs.iter().enumerate().take(masks.len()) {
        let qbase = seq * s;
        let kbase = if shared { 0 } else { seq * s };
        for h in 0..heads {
            let off = h * dh;
            for i in 0..s {
                let prow = &probs[(h * s + i) * kv_rows..(h * s + i + 1) * kv_rows];
                let qi = (qbase + i) * d + off;
                let dci = &dctx[qi..qi + dh];
                let mut acc = T::zero();
                for (j, &pj) in prow.iter().enumerate() {
                    if pj == T::zero() {
                        continue;
                    }
                    let kj = (kbase + j) * d + off;
                    dp[j] = tensor::dot(dci, &c.v[kj..kj + dh]);
                    acc = acc + pj * dp[j];
                }
                for (j, &pj) in prow.iter().enumerate() {
                    if pj == T::zero() {
                        continue;
                    }
                    let kj = (kbase + j) * d + off;
                    let ds = pj * (dp[j] - acc) * scale;
                    for t in 0..dh {
                        dq[qi + t] = dq[qi + t] + ds * c.k[kj + t];
                        dk[kj + t] = dk[kj + t] + ds * c.q[qi + t];
                        dv[kj + t] = dv[kj + t] + pj * dci[t];
                    }
                }
            }
        }
    }
    let dx = linear_backward(&w.q, x, n, &dq, &mut g.q);
    let mut dsrc = linear_backward(&w.k, src, src_rows, &dk, &mut g.k);
    add_assign(&mut dsrc, &linear_backward(&w.v, src, src_rows, &dv, &mut g.v));
    (dx, dsrc)
}
