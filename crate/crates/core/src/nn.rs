//! Layer building blocks: embeddings with sinusoidal positions, multi-head
//! attention, the position-wise feed-forward block and an LSTM cell.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::quant::{self, QuantizedMatrix};
use crate::tensor::{self, Scalar, Tensor};

/// Dense layer computing `x * weight + bias` for row vectors `x`.
/// `weight` is `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    quantized: Option<QuantizedMatrix>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(weight: Tensor<T>, bias: Option<Tensor<T>>) -> Result<Self> {
        if weight.rank() != 2 {
            return Err(Error::Rank(weight.rank()));
        }
        if let Some(b) = &bias {
            if b.shape() != [weight.shape()[1]] {
                return Err(Error::Dimension {
                    op: "linear bias",
                    left: weight.shape().to_vec(),
                    right: b.shape().to_vec(),
                });
            }
        }
        Ok(Self {
            weight,
            bias,
            quantized: None,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Switches the forward pass to the int8 dynamic-range path.
    pub fn quantize(&mut self) -> Result<()> {
        self.quantized = Some(quant::quantize_dynamic(&self.weight)?);
        Ok(())
    }

    pub fn is_quantized(&self) -> bool {
        self.quantized.is_some()
    }

    /// Applies the layer to `rows` row vectors stored contiguously in `x`.
    pub(crate) fn apply(&self, exec: &dyn Executor, x: &[T], rows: usize) -> Vec<T> {
        let mut y = match &self.quantized {
            Some(q) => quant::qgemm(exec, x, rows, q),
            None => tensor::gemm(
                exec,
                x,
                rows,
                self.in_dim(),
                self.weight.data(),
                self.out_dim(),
            ),
        };
        if let Some(b) = &self.bias {
            tensor::add_row_bias(&mut y, b.data());
        }
        y
    }

    pub fn forward(&self, exec: &dyn Executor, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.cols() != self.in_dim() {
            return Err(Error::Dimension {
                op: "linear",
                left: x.shape().to_vec(),
                right: self.weight.shape().to_vec(),
            });
        }
        let rows = x.rows();
        Tensor::matrix(rows, self.out_dim(), self.apply(exec, x.data(), rows))
    }
}

/// Sinusoidal position encoding value for position `pos`, channel `i` of a
/// `d`-wide model: `sin(pos / 10000^(2j/d))` on even channels `i = 2j`,
/// `cos` of the same angle on odd channels `i = 2j + 1`.
pub fn positional_encoding<T: Scalar>(pos: usize, i: usize, d: usize) -> T {
    let pair = (i / 2) as f64;
    let angle = T::lit(pos as f64) / T::lit(10000.0).powf(T::lit(2.0 * pair / d as f64));
    if i.is_multiple_of(2) {
        angle.sin()
    } else {
        angle.cos()
    }
}

/// Row `t` is `emb[tokens[t]] * sqrt(d_model) + positional_encoding(t)`.
pub fn embed_and_position<T: Scalar>(tokens: &[u32], emb: &Tensor<T>) -> Result<Tensor<T>> {
    let (vocab, d) = (emb.shape()[0], emb.cols());
    let scale = T::lit(d as f64).sqrt();
    let mut out = Tensor::zeros(&[tokens.len(), d]);
    for (t, &id) in tokens.iter().enumerate() {
        if id as usize >= vocab {
            return Err(Error::TokenOutOfRange {
                position: t,
                id,
                vocab,
            });
        }
        let src = emb.row(id as usize);
        for (c, (o, &e)) in out.row_mut(t).iter_mut().zip(src).enumerate() {
            *o = e * scale + positional_encoding(t, c, d);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<T = f32> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
}

impl<T: Scalar> AttentionWeights<T> {
    pub fn d_model(&self) -> usize {
        self.q.in_dim()
    }

    pub(crate) fn linears_mut(&mut self) -> [&mut Linear<T>; 4] {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.o]
    }
}

/// Which keys a query may attend to: keys at or beyond `valid_keys` are
/// padding, and a causal mask further hides keys after the query position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionMask {
    pub causal: bool,
    pub valid_keys: usize,
}

impl AttentionMask {
    pub fn full(keys: usize) -> Self {
        Self {
            causal: false,
            valid_keys: keys,
        }
    }

    pub fn causal(keys: usize) -> Self {
        Self {
            causal: true,
            valid_keys: keys,
        }
    }

    #[inline]
    pub fn allows(&self, query: usize, key: usize) -> bool {
        key < self.valid_keys && (!self.causal || key <= query)
    }
}

pub(crate) fn check_heads(d: usize, heads: usize) -> Result<usize> {
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "d_model {d} is not divisible by {heads} heads"
        )));
    }
    Ok(d / heads)
}

/// Scaled dot-product attention for all heads of one query/key set.
///
/// `q` is `m x d`, `k` and `v` are `n x d`. Returns the concatenated head
/// contexts (`m x d`). When `probs` is given, the attention weights are
/// appended to it laid out `[head][query][key]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_core<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    m: usize,
    n: usize,
    d: usize,
    heads: usize,
    mask: &AttentionMask,
    mut probs: Option<&mut Vec<T>>,
) -> Vec<T> {
    let dh = d / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut ctx = vec![T::zero(); m * d];
    let mut row = vec![T::zero(); n];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..m {
            let qi = &q[i * d + off..i * d + off + dh];
            for (j, s) in row.iter_mut().enumerate() {
                *s = if mask.allows(i, j) {
                    tensor::dot(qi, &k[j * d + off..j * d + off + dh]) * scale
                } else {
                    T::neg_infinity()
                };
            }
            tensor::softmax_in_place(&mut row);
            let out = &mut ctx[i * d + off..i * d + off + dh];
            for (j, &p) in row.iter().enumerate() {
                if p == T::zero() {
                    continue;
                }
                let vj = &v[j * d + off..j * d + off + dh];
                for (o, &x) in out.iter_mut().zip(vj) {
                    *o = *o + p * x;
                }
            }
            if let Some(buf) = probs.as_deref_mut() {
                buf.extend_from_slice(&row);
            }
        }
    }
    ctx
}

/// Multi-head attention of `q_in` (`m x d`) over `kv_in` (`n x d`).
pub fn multi_head_attention<T: Scalar>(
    exec: &dyn Executor,
    q_in: &Tensor<T>,
    kv_in: &Tensor<T>,
    w: &AttentionWeights<T>,
    mask: &AttentionMask,
    heads: usize,
) -> Result<Tensor<T>> {
    let d = w.d_model();
    check_heads(d, heads)?;
    if q_in.rank() != 2 || q_in.cols() != d || kv_in.rank() != 2 || kv_in.cols() != d {
        return Err(Error::Dimension {
            op: "multi_head_attention",
            left: q_in.shape().to_vec(),
            right: kv_in.shape().to_vec(),
        });
    }
    let (m, n) = (q_in.rows(), kv_in.rows());
    let q = w.q.apply(exec, q_in.data(), m);
    let k = w.k.apply(exec, kv_in.data(), n);
    let v = w.v.apply(exec, kv_in.data(), n);
    let ctx = attention_core(&q, &k, &v, m, n, d, heads, mask, None);
    Tensor::matrix(m, d, w.o.apply(exec, &ctx, m))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardWeights<T = f32> {
    pub w1: Linear<T>,
    pub w2: Linear<T>,
}

pub(crate) fn relu_in_place<T: Scalar>(x: &mut [T]) {
    for v in x {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// `relu(x * w1 + b1) * w2 + b2`.
pub fn feed_forward_block<T: Scalar>(
    exec: &dyn Executor,
    x: &Tensor<T>,
    w: &FeedForwardWeights<T>,
) -> Result<Tensor<T>> {
    if x.cols() != w.w1.in_dim() || w.w1.out_dim() != w.w2.in_dim() {
        return Err(Error::Dimension {
            op: "feed_forward_block",
            left: x.shape().to_vec(),
            right: w.w1.weight.shape().to_vec(),
        });
    }
    let rows = x.rows();
    let mut hidden = w.w1.apply(exec, x.data(), rows);
    relu_in_place(&mut hidden);
    Tensor::matrix(rows, w.w2.out_dim(), w.w2.apply(exec, &hidden, rows))
}

/// LSTM weights acting on `[x; h]`: `w` is `4h x (in + h)` with gate blocks
/// ordered input, forget, cell candidate, output.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmWeights<T = f32> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
    quantized: Option<QuantizedMatrix>,
}

impl<T: Scalar> LstmWeights<T> {
    pub fn new(w: Tensor<T>, b: Tensor<T>) -> Result<Self> {
        if w.rank() != 2 || !w.shape()[0].is_multiple_of(4) || w.shape()[0] == 0 {
            return Err(Error::Dimension {
                op: "lstm weights",
                left: w.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let hidden = w.shape()[0] / 4;
        if w.shape()[1] <= hidden || b.shape() != [4 * hidden] {
            return Err(Error::Dimension {
                op: "lstm weights",
                left: w.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        Ok(Self {
            w,
            b,
            quantized: None,
        })
    }

    pub fn hidden(&self) -> usize {
        self.w.shape()[0] / 4
    }

    pub fn input_dim(&self) -> usize {
        self.w.shape()[1] - self.hidden()
    }

    pub fn quantize(&mut self) -> Result<()> {
        self.quantized = Some(quant::quantize_dynamic_rows(&self.w)?);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState<T = f32> {
    pub c: Vec<T>,
    pub h: Vec<T>,
}

impl<T: Scalar> LstmState<T> {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            c: vec![T::zero(); hidden],
            h: vec![T::zero(); hidden],
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// One LSTM step. Consumes the previous state so a step cannot be issued
/// before the one it depends on has produced its output.
pub fn lstm_step<T: Scalar>(
    state: LstmState<T>,
    x: &[T],
    w: &LstmWeights<T>,
) -> Result<(LstmState<T>, Vec<T>)> {
    let hidden = w.hidden();
    if x.len() != w.input_dim() || state.h.len() != hidden || state.c.len() != hidden {
        return Err(Error::Dimension {
            op: "lstm_step",
            left: vec![x.len(), state.h.len()],
            right: w.w.shape().to_vec(),
        });
    }
    let mut input = Vec::with_capacity(x.len() + hidden);
    input.extend_from_slice(x);
    input.extend_from_slice(&state.h);
    let mut gates = match &w.quantized {
        Some(q) => quant::qgemm_rows(&input, q),
        None => w.w.data().chunks(input.len()).map(|r| tensor::dot(r, &input)).collect(),
    };
    tensor::add_row_bias(&mut gates, w.b.data());
    let (i, rest) = gates.split_at(hidden);
    let (f, rest) = rest.split_at(hidden);
    let (g, o) = rest.split_at(hidden);
    let mut next = LstmState::zeros(hidden);
    for u in 0..hidden {
        let c = sigmoid(f[u]) * state.c[u] + sigmoid(i[u]) * g[u].tanh();
        next.c[u] = c;
        next.h[u] = sigmoid(o[u]) * c.tanh();
    }
    let out = next.h.clone();
    Ok((next, out))
}
