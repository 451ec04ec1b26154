//! Post-training dynamic-range int8 quantization.
//!
//! Weights are quantized once, symmetrically, with one scale per output
//! channel. Activations are quantized per row at call time. Products
//! accumulate in `i32` and are rescaled by `row_scale * channel_scale`.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::exec::{self, Executor, Sequential};
use crate::tensor::{Scalar, Tensor};

const QMAX: f64 = 127.0;

/// The matrix dimension that indexes output channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelAxis {
    /// `in x out` weights applied as `x * W`.
    Columns,
    /// `out x in` weights applied as `W * x`.
    Rows,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMatrix {
    rows: usize,
    cols: usize,
    values: Vec<i8>,
    scales: Vec<f32>,
    axis: ChannelAxis,
}

impl QuantizedMatrix {
    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn values(&self) -> &[i8] {
        &self.values
    }

    /// One scale per output channel.
    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn axis(&self) -> ChannelAxis {
        self.axis
    }

    fn channel(&self, index: usize) -> usize {
        match self.axis {
            ChannelAxis::Columns => index % self.cols,
            ChannelAxis::Rows => index / self.cols,
        }
    }

    pub fn dequantize<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.rows, self.cols], |i| {
            T::lit(self.values[i] as f64 * self.scales[self.channel(i)] as f64)
        })
    }
}

/// Quantizes `v / max_abs * 127` with round-half-away-from-zero.
#[inline]
fn quantize_value(v: f64, max_abs: f64) -> i8 {
    let q = Float::round(v / max_abs * QMAX);
    q.clamp(-QMAX, QMAX) as i8
}

/// Quantizes an `in x out` weight matrix with a symmetric scale
/// `max|w[:, j]| / 127` per column (1.0 for an all-zero column).
pub fn quantize_dynamic<T: Scalar>(w: &Tensor<T>) -> Result<QuantizedMatrix> {
    quantize_along(w, ChannelAxis::Columns)
}

/// Like [`quantize_dynamic`] for an `out x in` matrix: one scale per row.
pub fn quantize_dynamic_rows<T: Scalar>(w: &Tensor<T>) -> Result<QuantizedMatrix> {
    quantize_along(w, ChannelAxis::Rows)
}

fn quantize_along<T: Scalar>(w: &Tensor<T>, axis: ChannelAxis) -> Result<QuantizedMatrix> {
    if w.rank() != 2 || w.is_empty() {
        return Err(Error::Dimension {
            op: "quantize_dynamic",
            left: w.shape().to_vec(),
            right: Vec::new(),
        });
    }
    if !w.all_finite() {
        return Err(Error::NonFinite {
            op: "quantize_dynamic",
        });
    }
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    let mut q = QuantizedMatrix {
        rows,
        cols,
        values: vec![0; w.len()],
        scales: Vec::new(),
        axis,
    };
    let channels = match axis {
        ChannelAxis::Columns => cols,
        ChannelAxis::Rows => rows,
    };
    let mut max_abs = vec![0.0f64; channels];
    for (i, v) in w.data().iter().enumerate() {
        let c = q.channel(i);
        max_abs[c] = max_abs[c].max(v.as_f64().abs());
    }
    for (i, v) in w.data().iter().enumerate() {
        let m = max_abs[q.channel(i)];
        if m > 0.0 {
            q.values[i] = quantize_value(v.as_f64(), m);
        }
    }
    q.scales = max_abs
        .iter()
        .map(|&m| if m == 0.0 { 1.0 } else { (m / QMAX) as f32 })
        .collect();
    Ok(q)
}

/// `a[m x k] * qb[k x n]` with per-row dynamic activation quantization.
pub fn qmatmul<T: Scalar>(a: &Tensor<T>, qb: &QuantizedMatrix) -> Result<Tensor<T>> {
    qmatmul_with(&Sequential, a, qb)
}

pub fn qmatmul_with<T: Scalar>(
    exec: &dyn Executor,
    a: &Tensor<T>,
    qb: &QuantizedMatrix,
) -> Result<Tensor<T>> {
    if a.rank() != 2 || a.shape()[1] != qb.rows || qb.axis != ChannelAxis::Columns {
        return Err(Error::Dimension {
            op: "qmatmul",
            left: a.shape().to_vec(),
            right: qb.shape().to_vec(),
        });
    }
    let m = a.shape()[0];
    Tensor::matrix(m, qb.cols, qgemm(exec, a.data(), m, qb))
}

pub(crate) fn qgemm<T: Scalar>(
    exec: &dyn Executor,
    a: &[T],
    m: usize,
    qb: &QuantizedMatrix,
) -> Vec<T> {
    debug_assert_eq!(qb.axis, ChannelAxis::Columns);
    let (k, n) = (qb.rows, qb.cols);
    let mut out = vec![T::zero(); m * n];
    if n == 0 {
        return out;
    }
    let rows_per_job = exec::rows_per_job(exec, m);
    exec::for_each_chunk_mut(exec, &mut out, rows_per_job * n, |job, chunk| {
        let first = job * rows_per_job;
        let mut qa = vec![0i8; k];
        let mut acc = vec![0i32; n];
        for (r, orow) in chunk.chunks_mut(n).enumerate() {
            let arow = &a[(first + r) * k..(first + r + 1) * k];
            let max_abs = arow.iter().fold(0.0f64, |m, v| m.max(v.as_f64().abs()));
            if max_abs == 0.0 {
                continue;
            }
            for (q, v) in qa.iter_mut().zip(arow) {
                *q = quantize_value(v.as_f64(), max_abs);
            }
            acc.fill(0);
            for (p, &qv) in qa.iter().enumerate() {
                if qv == 0 {
                    continue;
                }
                let qv = qv as i32;
                let brow = &qb.values[p * n..(p + 1) * n];
                for (s, &bv) in acc.iter_mut().zip(brow) {
                    *s += qv * bv as i32;
                }
            }
            let row_scale = max_abs / QMAX;
            for ((o, &s), &cs) in orow.iter_mut().zip(&acc).zip(&qb.scales) {
                *o = T::lit(s as f64 * (row_scale * cs as f64));
            }
        }
    });
    out
}

/// `qw[r x c] * x[c]` for a weight stored output-major, with `x` quantized
/// dynamically as one row.
pub(crate) fn qgemm_rows<T: Scalar>(x: &[T], qw: &QuantizedMatrix) -> Vec<T> {
    debug_assert_eq!(x.len(), qw.cols);
    debug_assert_eq!(qw.axis, ChannelAxis::Rows);
    let max_abs = x.iter().fold(0.0f64, |m, v| m.max(v.as_f64().abs()));
    if max_abs == 0.0 {
        return vec![T::zero(); qw.rows];
    }
    let qx: Vec<i32> = x
        .iter()
        .map(|v| quantize_value(v.as_f64(), max_abs) as i32)
        .collect();
    let row_scale = max_abs / QMAX;
    qw.values
        .chunks(qw.cols)
        .zip(&qw.scales)
        .map(|(row, &cs)| {
            let s: i32 = row.iter().zip(&qx).map(|(&w, &q)| w as i32 * q).sum();
            T::lit(s as f64 * (row_scale * cs as f64))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::matmul;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn quantize_examples() {
        let z = quantize_dynamic(&Tensor::<f32>::zeros(&[2, 3])).unwrap();
        assert_eq!(z.values(), &[0; 6]);
        assert_eq!(z.scales(), &[1.0; 3]);

        let q = quantize_dynamic(&Tensor::<f32>::from_rows(&[[127.0, -127.0], [1.0, 0.0]])).unwrap();
        assert_eq!(q.values(), &[127, -127, 1, 0]);
        assert_eq!(q.scales(), &[1.0, 1.0]);

        // Each column is scaled by its own largest magnitude.
        let q = quantize_dynamic(&Tensor::<f32>::from_rows(&[[1.0, 0.5], [0.5, -0.25]])).unwrap();
        assert_eq!(q.values(), &[127, 127, 64, -64]);
        assert_eq!(q.scales(), &[(1.0f64 / 127.0) as f32, (0.5f64 / 127.0) as f32]);

        let r = quantize_dynamic_rows(&Tensor::<f32>::from_rows(&[[1.0, 0.5], [0.5, -0.25]])).unwrap();
        assert_eq!(r.values(), &[127, 64, 127, -64]);
        assert_eq!(r.scales(), &[(1.0f64 / 127.0) as f32, (0.5f64 / 127.0) as f32]);

        let bad = Tensor::<f32>::from_rows(&[[f64::INFINITY, 0.0]]);
        assert!(matches!(quantize_dynamic(&bad), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn dequantized_within_half_step() {
        let w = Tensor::<f64>::from_fn(&[7, 9], |i| ((i * 37 % 19) as f64 - 9.0) * 0.173);
        for q in [quantize_dynamic(&w).unwrap(), quantize_dynamic_rows(&w).unwrap()] {
            let d = q.dequantize::<f64>();
            for (i, (a, b)) in w.data().iter().zip(d.data()).enumerate() {
                let half = q.scales()[q.channel(i)] as f64 / 2.0 * (1.0 + 1e-6);
                assert!((a - b).abs() <= half, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn identity_weight_and_zero_activation() {
        let n = 6;
        let id = Tensor::<f32>::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 });
        let qid = quantize_dynamic(&id).unwrap();
        let a = Tensor::<f32>::from_fn(&[3, n], |i| (i as f32 - 8.0) * 0.37);
        let out = qmatmul(&a, &qid).unwrap();
        for r in 0..3 {
            let row = a.row(r);
            let step = row.iter().fold(0f32, |m, v| m.max(v.abs())) / 127.0;
            for (x, y) in row.iter().zip(out.row(r)) {
                assert!((x - y).abs() <= step, "{x} vs {y}");
            }
        }
        let zero = Tensor::<f32>::zeros(&[2, n]);
        assert!(qmatmul(&zero, &qid).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gaussian_relative_error_below_two_percent() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut gauss = |n: usize| -> Tensor<f32> {
            Tensor::from_fn(&[n, n], |_| StandardNormal.sample(&mut rng))
        };
        let a = gauss(64);
        let b = gauss(64);
        let exact = matmul(&a, &b).unwrap();
        let approx = qmatmul(&a, &quantize_dynamic(&b).unwrap()).unwrap();
        let (mut num, mut den) = (0f64, 0f64);
        for (x, y) in exact.data().iter().zip(approx.data()) {
            num += ((x - y) as f64).powi(2);
            den += (*x as f64).powi(2);
        }
        let rel = (num / den).sqrt();
        assert!(rel <= 0.02, "relative Frobenius error {rel}");
    }

    #[test]
    fn shape_mismatch() {
        let q = quantize_dynamic(&Tensor::<f32>::full(&[3, 2], 1.0)).unwrap();
        assert!(matches!(
            qmatmul(&Tensor::<f32>::zeros(&[1, 2]), &q),
            Err(Error::Dimension { .. })
        ));
    }
}
