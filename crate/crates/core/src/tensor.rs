//! Dense row-major tensors and the full-precision kernels built on them.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Debug;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::exec::{self, Executor, Sequential};

/// Floating-point element type. `f32` is used for inference and training,
/// `f64` for finite-difference gradient checks.
pub trait Scalar: Float + Default + Debug + Send + Sync + 'static {
    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major tensor of rank 1 to 3. The innermost dimension is
/// contiguous. Leading dimensions may be zero (an empty sequence is a
/// `0 x d` matrix).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 3 {
            return Err(Error::Rank(shape.len()));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::DataLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// # Panics
    /// If the rank is not 1 to 3.
    pub fn zeros(shape: &[usize]) -> Self {
        assert!(
            (1..=3).contains(&shape.len()),
            "tensor rank {} unsupported",
            shape.len()
        );
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(&[rows, cols], data)
    }

    /// Builds a matrix from nested rows. Convenient in tests.
    ///
    /// # Panics
    /// If the rows are ragged.
    pub fn from_rows<const N: usize>(rows: &[[f64; N]]) -> Self {
        let data = rows.iter().flatten().map(|&v| T::lit(v)).collect();
        Self::new(&[rows.len(), N], data).expect("consistent rows")
    }

    pub fn vector(data: Vec<T>) -> Self {
        let n = data.len();
        Self {
            shape: vec![n],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Size of the innermost dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    /// Number of innermost rows (product of all leading dimensions).
    pub fn rows(&self) -> usize {
        self.shape[..self.shape.len() - 1].iter().product()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self += alpha * other`, elementwise.
    pub fn axpy(&mut self, alpha: T, other: &Self) {
        assert_eq!(self.shape, other.shape, "axpy shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + alpha * b;
        }
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
    }
}

fn as_matrix<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::Dimension {
            op,
            left: t.shape.clone(),
            right: Vec::new(),
        });
    }
    Ok((t.shape[0], t.shape[1]))
}

/// Rows handled together by the register-blocked path.
const MR: usize = 4;
/// Columns handled together by the register-blocked path.
const NR: usize = 32;

/// Computes columns `j0..j0 + w` of `a * b` into `out` (`m x w`, row-major).
///
/// Every output element is accumulated as `((0 + a0*b0) + a1*b1) + ...` in
/// ascending inner index on every path, so the result does not depend on
/// how columns are split across jobs.
#[allow(clippy::too_many_arguments)]
fn gemm_stripe<T: Scalar>(
    a: &[T],
    m: usize,
    k: usize,
    b: &[T],
    n: usize,
    j0: usize,
    w: usize,
    out: &mut [T],
) {
    let mut i = 0;
    while i + MR <= m {
        let mut jj = 0;
        while jj + NR <= w {
            let mut acc = [[T::zero(); NR]; MR];
            for p in 0..k {
                let brow: &[T; NR] = b[p * n + j0 + jj..p * n + j0 + jj + NR]
                    .try_into()
                    .expect("NR columns");
                for (r, acc_r) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * k + p];
                    for c in 0..NR {
                        acc_r[c] = acc_r[c] + av * brow[c];
                    }
                }
            }
            for (r, acc_r) in acc.iter().enumerate() {
                out[(i + r) * w + jj..(i + r) * w + jj + NR].copy_from_slice(acc_r);
            }
            jj += NR;
        }
        for r in i..i + MR {
            gemm_row_tail(a, k, b, n, j0, jj, w, r, out);
        }
        i += MR;
    }
    for r in i..m {
        gemm_row_tail(a, k, b, n, j0, 0, w, r, out);
    }
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn gemm_row_tail<T: Scalar>(
    a: &[T],
    k: usize,
    b: &[T],
    n: usize,
    j0: usize,
    from: usize,
    w: usize,
    r: usize,
    out: &mut [T],
) {
    let orow = &mut out[r * w + from..r * w + w];
    orow.fill(T::zero());
    let arow = &a[r * k..(r + 1) * k];
    for (p, &av) in arow.iter().enumerate() {
        let brow = &b[p * n + j0 + from..p * n + j0 + w];
        for (o, &bv) in orow.iter_mut().zip(brow) {
            *o = *o + av * bv;
        }
    }
}

/// `a[m x k] * b[k x n]` on the calling thread.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    matmul_with(&Sequential, a, b)
}

/// `a[m x k] * b[k x n]`, with output column stripes spread over `exec`.
pub fn matmul_with<T: Scalar>(
    exec: &dyn Executor,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (m, k) = as_matrix("matmul", a)?;
    let (k2, n) = as_matrix("matmul", b)?;
    if k != k2 {
        return Err(Error::Dimension {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: gemm(exec, &a.data, m, k, &b.data, n),
    })
}

/// Raw row-major product used by the layers. `a` is `m x k`, `b` is `k x n`.
pub(crate) fn gemm<T: Scalar>(
    exec: &dyn Executor,
    a: &[T],
    m: usize,
    k: usize,
    b: &[T],
    n: usize,
) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![T::zero(); m * n];
    if m == 0 || n == 0 {
        return c;
    }
    let workers = exec.workers().max(1);
    if workers == 1 || m * n * k < 32 * 1024 {
        gemm_stripe(a, m, k, b, n, 0, n, &mut c);
        return c;
    }
    let stripe = n.div_ceil(workers).div_ceil(NR) * NR;
    let stripes = n.div_ceil(stripe);
    let parts = exec::map_indices(exec, stripes, |s| {
        let j0 = s * stripe;
        let w = stripe.min(n - j0);
        let mut part = vec![T::zero(); m * w];
        gemm_stripe(a, m, k, b, n, j0, w, &mut part);
        part
    });
    for (s, part) in parts.iter().enumerate() {
        let j0 = s * stripe;
        let w = stripe.min(n - j0);
        for i in 0..m {
            c[i * n + j0..i * n + j0 + w].copy_from_slice(&part[i * w..(i + 1) * w]);
        }
    }
    c
}

/// `a[m x k] * b[n x k]^T`.
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], m: usize, k: usize, b: &[T], n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = dot(arow, brow);
        }
    }
    c
}

/// `a[k x m]^T * b[k x n]`.
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], k: usize, m: usize, b: &[T], n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
    c
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Adds `bias` to every row of a row-major matrix with `bias.len()` columns.
pub(crate) fn add_row_bias<T: Scalar>(x: &mut [T], bias: &[T]) {
    for row in x.chunks_mut(bias.len()) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v = *v + b;
        }
    }
}

/// Softmax over a single row, in place. Entries equal to `-inf` get weight 0.
pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row
        .iter()
        .fold(T::neg_infinity(), |m, &v| if v > m { v } else { m });
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Softmax over the innermost dimension.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if !x.all_finite() {
        return Err(Error::NonFinite { op: "softmax_rows" });
    }
    let mut out = x.clone();
    let c = out.cols();
    if c > 0 {
        for row in out.data.chunks_mut(c) {
            softmax_in_place(row);
        }
    }
    Ok(out)
}

/// Log-sum-exp of a row.
pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row
        .iter()
        .fold(T::neg_infinity(), |m, &v| if v > m { v } else { m });
    let sum = row.iter().fold(T::zero(), |s, &v| s + (v - max).exp());
    max + sum.ln()
}

/// Default layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Per-row `(x - mean) / sqrt(var + eps) * gamma + beta` with population
/// variance.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let d = x.cols();
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::Dimension {
            op: "layer_norm",
            left: x.shape.clone(),
            right: gamma.shape.clone(),
        });
    }
    let mut out = x.clone();
    layer_norm_rows(&mut out.data, &gamma.data, &beta.data, eps, None);
    Ok(out)
}

/// Normalizes rows of `x` in place. When `inv_std` is given it receives the
/// per-row `1 / sqrt(var + eps)` for backpropagation.
pub(crate) fn layer_norm_rows<T: Scalar>(
    x: &mut [T],
    gamma: &[T],
    beta: &[T],
    eps: T,
    mut inv_std: Option<&mut Vec<T>>,
) {
    let d = gamma.len();
    if d == 0 {
        return;
    }
    let dn = T::lit(d as f64);
    for row in x.chunks_mut(d) {
        let mean = row.iter().fold(T::zero(), |s, &v| s + v) / dn;
        let var = row
            .iter()
            .fold(T::zero(), |s, &v| s + (v - mean) * (v - mean))
            / dn;
        let r = T::one() / (var + eps).sqrt();
        for ((v, &g), &b) in row.iter_mut().zip(gamma).zip(beta) {
            *v = (*v - mean) * r * g + b;
        }
        if let Some(s) = inv_std.as_deref_mut() {
            s.push(r);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        Tensor::from_fn(&[m, n], |idx| {
            let (i, j) = (idx / n, idx % n);
            (0..k).map(|p| a.data()[i * k + p] * b.data()[p * n + j]).sum()
        })
    }

    #[test]
    fn matmul_examples() {
        let id = Tensor::<f32>::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let x = Tensor::<f32>::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(matmul(&id, &x).unwrap(), x);

        let z = Tensor::<f32>::from_rows(&[[0.0, 0.0]]);
        let col = Tensor::<f32>::from_rows(&[[5.0], [7.0]]);
        assert_eq!(matmul(&z, &col).unwrap().data(), &[0.0]);

        let y = Tensor::<f32>::from_rows(&[[5.0, 6.0], [7.0, 8.0]]);
        assert_eq!(matmul(&x, &y).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        match matmul(&a, &b) {
            Err(Error::Dimension { left, right, .. }) => {
                assert_eq!(left, [2, 3]);
                assert_eq!(right, [2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn blocked_matches_naive_on_odd_shapes() {
        // Shapes straddle the 4x32 register block.
        for &(m, k, n) in &[(1, 1, 1), (5, 3, 33), (9, 17, 70), (4, 8, 32), (13, 2, 65)] {
            let a = Tensor::<f64>::from_fn(&[m, k], |i| ((i * 7 % 11) as f64) - 5.0);
            let b = Tensor::<f64>::from_fn(&[k, n], |i| ((i * 5 % 13) as f64) * 0.5 - 3.0);
            assert_eq!(matmul(&a, &b).unwrap(), naive(&a, &b), "{m}x{k}x{n}");
        }
    }

    #[test]
    fn transposed_products_match_plain() {
        let a = Tensor::<f64>::from_fn(&[3, 4], |i| i as f64 * 0.25 - 1.0);
        let b = Tensor::<f64>::from_fn(&[5, 4], |i| (i % 3) as f64 - 1.0);
        let nt = gemm_nt(a.data(), 3, 4, b.data(), 5);
        let bt = Tensor::from_fn(&[4, 5], |idx| b.data()[(idx % 5) * 4 + idx / 5]);
        assert_eq!(nt, naive(&a, &bt).into_data());

        let c = Tensor::<f64>::from_fn(&[3, 2], |i| i as f64);
        let tn = gemm_tn(a.data(), 3, 4, c.data(), 2);
        let at = Tensor::from_fn(&[4, 3], |idx| a.data()[(idx % 3) * 4 + idx / 3]);
        assert_eq!(tn, naive(&at, &c).into_data());
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Tensor::<f64>::from_rows(&[[0.0, 0.0]])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&Tensor::<f64>::from_rows(&[[1000.0, 1000.0]])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&Tensor::<f64>::from_rows(&[[0.0, 3f64.ln()]])).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
        let bad = Tensor::<f64>::from_rows(&[[f64::NAN, 0.0]]);
        assert!(matches!(softmax_rows(&bad), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn layer_norm_examples() {
        let one = Tensor::<f64>::vector(alloc::vec![1.0, 1.0]);
        let zero = Tensor::<f64>::vector(alloc::vec![0.0, 0.0]);
        let c = Tensor::<f64>::from_rows(&[[3.0, 3.0]]);
        assert_eq!(layer_norm(&c, &one, &zero, 1e-6).unwrap().data(), &[0.0, 0.0]);

        let beta = Tensor::<f64>::vector(alloc::vec![0.5, -2.0]);
        let x = Tensor::<f64>::from_rows(&[[1.0, 7.0]]);
        assert_eq!(layer_norm(&x, &zero, &beta, 1e-6).unwrap().data(), &[0.5, -2.0]);

        let x = Tensor::<f64>::from_rows(&[[1.0, 3.0]]);
        assert_eq!(layer_norm(&x, &one, &zero, 0.0).unwrap().data(), &[-1.0, 1.0]);

        let bad = Tensor::<f64>::vector(alloc::vec![1.0; 3]);
        assert!(layer_norm(&x, &bad, &zero, 0.0).is_err());
    }

    #[test]
    fn zero_row_tensor_is_allowed() {
        let t = Tensor::<f32>::new(&[0, 4], alloc::vec![]).unwrap();
        assert_eq!(t.rows(), 0);
        assert!(Tensor::<f32>::new(&[], alloc::vec![]).is_err());
        assert!(Tensor::<f32>::new(&[2, 2], alloc::vec![0.0; 3]).is_err());
    }
}
