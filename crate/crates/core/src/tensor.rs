//! Dense row-major tensors and the handful of neural primitives the rest of
//! the crate is built from.
//!
//! Every reduction accumulates sequentially in index order, so results are
//! bit-reproducible regardless of how callers schedule work. The slice-level
//! kernels in [`kernels`] are what the transformer forward/backward passes use
//! directly; the [`Tensor`]-level functions wrap them with shape checking.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Scalar type the engine is generic over: `f32` for normal runs, `f64` for
/// gradient checks.
pub trait Real:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from a double-precision literal.
    fn lit(v: f64) -> Self;
    fn widen(self) -> f64;
    fn erf(self) -> Self;
    const DTYPE: &'static str;
}

impl Real for f32 {
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn widen(self) -> f64 {
        self as f64
    }
    #[inline]
    fn erf(self) -> Self {
        libm::erff(self)
    }
    const DTYPE: &'static str = "f32";
}

impl Real for f64 {
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }
    #[inline]
    fn widen(self) -> f64 {
        self
    }
    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }
    const DTYPE: &'static str = "f64";
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn fmt_shape(shape: &[usize]) -> String {
    let parts: Vec<String> = shape.iter().map(|s| s.to_string()).collect();
    format!("[{}]", parts.join("x"))
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&s| s == 0) {
            return Err(Error::Dimension(format!(
                "shape {} has a zero extent",
                fmt_shape(&shape)
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {} holds {} elements but {} were given",
                fmt_shape(&shape),
                n,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(
            shape.iter().all(|&s| s > 0),
            "zero extent in {}",
            fmt_shape(shape)
        );
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Builds a 2-D tensor from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Extent of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    /// Product of all extents except the last.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.widen())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sum of squares accumulated in `f64`.
    pub fn sum_squares(&self) -> f64 {
        kernels::sum_squares(&self.data)
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn scale(&mut self, factor: T) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "cannot add {} to {}",
                fmt_shape(&other.shape),
                fmt_shape(&self.shape)
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }
}

/// Slice-level kernels. All matrices are row-major and all sums run in
/// ascending index order.
pub mod kernels {
    use super::Real;

    /// `out = a · b` with `a: m×k`, `b: k×p`.
    ///
    /// Each output element accumulates `a[i][0]·b[0][j] + a[i][1]·b[1][j] + …`
    /// in ascending `k`, which is the same floating-point sequence as the
    /// textbook triple loop.
    pub fn matmul<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, p: usize) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * p);
        debug_assert_eq!(out.len(), m * p);
        out.iter_mut().for_each(|v| *v = T::zero());
        let k4 = k - k % 4;
        for i in 0..m {
            let orow = &mut out[i * p..(i + 1) * p];
            let arow = &a[i * k..(i + 1) * k];
            // Four k-steps per pass over the row; each element still adds
            // its terms one at a time in ascending k.
            for kk in (0..k4).step_by(4) {
                let (a0, a1, a2, a3) = (arow[kk], arow[kk + 1], arow[kk + 2], arow[kk + 3]);
                let b0 = &b[kk * p..(kk + 1) * p];
                let b1 = &b[(kk + 1) * p..(kk + 2) * p];
                let b2 = &b[(kk + 2) * p..(kk + 3) * p];
                let b3 = &b[(kk + 3) * p..(kk + 4) * p];
                for ((((o, &v0), &v1), &v2), &v3) in orow.iter_mut().zip(b0).zip(b1).zip(b2).zip(b3)
                {
                    let mut acc = *o;
                    acc += a0 * v0;
                    acc += a1 * v1;
                    acc += a2 * v2;
                    acc += a3 * v3;
                    *o = acc;
                }
            }
            for kk in k4..k {
                let aik = arow[kk];
                let brow = &b[kk * p..(kk + 1) * p];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aik * bv;
                }
            }
        }
    }

    /// `out = x · w + bias` (row-broadcast bias), `x: m×k`, `w: k×p`.
    pub fn linear<T: Real>(
        x: &[T],
        w: &[T],
        bias: &[T],
        out: &mut [T],
        m: usize,
        k: usize,
        p: usize,
    ) {
        matmul(x, w, out, m, k, p);
        for row in out.chunks_exact_mut(p) {
            for (o, &b) in row.iter_mut().zip(bias) {
                *o += b;
            }
        }
    }

    /// `out = a · bᵀ` with `a: m×k`, `b: p×k`.
    ///
    /// `b` is transposed into scratch so the row-streaming kernel can run;
    /// the per-element summation order is unchanged.
    pub fn matmul_bt<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, p: usize) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), p * k);
        if m == 1 {
            for (j, o) in out.iter_mut().enumerate() {
                let mut acc = T::zero();
                for (&x, &y) in a.iter().zip(&b[j * k..(j + 1) * k]) {
                    acc += x * y;
                }
                *o = acc;
            }
            return;
        }
        let mut bt = vec![T::zero(); k * p];
        for (j, brow) in b.chunks_exact(k).enumerate() {
            for (kk, &v) in brow.iter().enumerate() {
                bt[kk * p + j] = v;
            }
        }
        matmul(a, &bt, out, m, k, p);
    }

    /// `out += aᵀ · b` with `a: m×k`, `b: m×p`, `out: k×p`.
    pub fn matmul_at_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, p: usize) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), m * p);
        debug_assert_eq!(out.len(), k * p);
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let brow = &b[i * p..(i + 1) * p];
            for (kk, &aik) in arow.iter().enumerate() {
                let orow = &mut out[kk * p..(kk + 1) * p];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aik * bv;
                }
            }
        }
    }

    /// Adds the column sums of `x: m×p` into `out: p`.
    pub fn col_sum_acc<T: Real>(x: &[T], out: &mut [T], p: usize) {
        for row in x.chunks_exact(p) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
    }

    /// Row-wise layer normalization over rows of width `d`.
    ///
    /// When `stats` is given it receives `(x̂, 1/σ)` per row for the backward pass.
    pub fn layer_norm<T: Real>(
        x: &[T],
        gamma: &[T],
        beta: &[T],
        eps: T,
        d: usize,
        out: &mut [T],
        mut stats: Option<(&mut [T], &mut [T])>,
    ) {
        let inv_d = T::one() / T::lit(d as f64);
        for (r, (xr, or)) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)).enumerate() {
            let mut mean = T::zero();
            for &v in xr {
                mean += v;
            }
            mean *= inv_d;
            let mut var = T::zero();
            for &v in xr {
                let c = v - mean;
                var += c * c;
            }
            var *= inv_d;
            let rstd = T::one() / (var + eps).sqrt();
            for j in 0..d {
                let xh = (xr[j] - mean) * rstd;
                or[j] = xh * gamma[j] + beta[j];
            }
            if let Some((xhat, rstds)) = stats.as_mut() {
                for j in 0..d {
                    xhat[r * d + j] = (xr[j] - mean) * rstd;
                }
                rstds[r] = rstd;
            }
        }
    }

    /// In-place max-subtracted softmax over one row.
    pub fn softmax_row<T: Real>(row: &mut [T]) {
        let mut max = T::neg_infinity();
        for &v in row.iter() {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = T::one() / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }

    const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
    /// 1/√(2π)
    const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

    /// Standard normal CDF.
    #[inline]
    pub fn normal_cdf<T: Real>(x: T) -> T {
        T::lit(0.5) * (T::one() + (x * T::lit(FRAC_1_SQRT_2)).erf())
    }

    #[inline]
    pub fn gelu<T: Real>(x: T) -> T {
        x * normal_cdf(x)
    }

    /// d/dx [x·Φ(x)] = Φ(x) + x·φ(x).
    #[inline]
    pub fn gelu_grad<T: Real>(x: T) -> T {
        let pdf = T::lit(INV_SQRT_2PI) * (T::lit(-0.5) * x * x).exp();
        normal_cdf(x) + x * pdf
    }

    pub fn sum_squares<T: Real>(x: &[T]) -> f64 {
        let mut acc = 0.0f64;
        for &v in x {
            let w = v.widen();
            acc += w * w;
        }
        acc
    }
}

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::Dimension(format!(
            "matmul of {} by {}",
            fmt_shape(&a.shape),
            fmt_shape(&b.shape)
        )));
    }
    let (m, k, p) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![T::zero(); m * p];
    kernels::matmul(&a.data, &b.data, &mut out, m, k, p);
    Tensor::new(vec![m, p], out)
}

/// Layer normalization over the last axis with the biased variance estimate.
pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let d = x.cols();
    if gamma.shape != [d] || beta.shape != [d] {
        return Err(Error::Dimension(format!(
            "layer_norm over width {d} with gamma {} and beta {}",
            fmt_shape(&gamma.shape),
            fmt_shape(&beta.shape)
        )));
    }
    if !(eps >= 0.0) {
        return Err(Error::Config(format!(
            "layer_norm eps must be >= 0, got {eps}"
        )));
    }
    let mut out = vec![T::zero(); x.len()];
    kernels::layer_norm(
        &x.data,
        &gamma.data,
        &beta.data,
        T::lit(eps),
        d,
        &mut out,
        None,
    );
    Tensor::new(x.shape.clone(), out)
}

/// Softmax over the last axis.
pub fn softmax<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    let c = out.cols();
    for row in out.data.chunks_exact_mut(c) {
        kernels::softmax_row(row);
    }
    out
}

/// Exact GeLU, `x·Φ(x)`.
pub fn gelu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(kernels::gelu)
}

/// Global L2 norm over a collection of tensors, accumulated in `f64`.
pub fn global_norm<'a, T: Real>(tensors: impl IntoIterator<Item = &'a Tensor<T>>) -> f64 {
    tensors
        .into_iter()
        .map(|t| t.sum_squares())
        .fold(0.0, |a, b| a + b)
        .sqrt()
}

/// Rescales every tensor by `max_norm / g` when the global norm `g` exceeds
/// `max_norm`. Returns the pre-clip norm.
pub fn clip_global_norm<'a, T: Real>(
    grads: impl IntoIterator<Item = &'a mut Tensor<T>>,
    max_norm: f64,
) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::Config(format!(
            "max_norm must be > 0, got {max_norm}"
        )));
    }
    let mut grads: Vec<&mut Tensor<T>> = grads.into_iter().collect();
    let norm = grads
        .iter()
        .map(|t| t.sum_squares())
        .fold(0.0, |a, b| a + b)
        .sqrt();
    if norm > max_norm {
        let factor = T::lit(max_norm / norm);
        for g in grads.iter_mut() {
            g.scale(factor);
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn new_rejects_inconsistent_shape() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let a = t2(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], &[7.0, 8.0, 9.5]]);
        assert_eq!(matmul(&Tensor::identity(3), &a).unwrap(), a);

        let a = t2(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = t2(&[&[0.0], &[1.0]]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2x3]"), "{msg}");
    }

    #[test]
    fn kernels_agree_with_transposed_forms() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // 3x4
        let mut ab = vec![0.0; 8];
        kernels::matmul(&a, &b, &mut ab, 2, 3, 4);

        // bᵀ stored as 4x3
        let mut bt = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..4 {
                bt[j * 3 + i] = b[i * 4 + j];
            }
        }
        let mut ab2 = vec![0.0; 8];
        kernels::matmul_bt(&a, &bt, &mut ab2, 2, 3, 4);
        assert_eq!(ab, ab2);

        // aᵀ stored as 3x2: (aᵀ)ᵀ b' with b' 3x... use a as m×k=2×3, out 3×4 = aᵀ·c, c: 2×4
        let c: Vec<f64> = (0..8).map(|v| v as f64).collect();
        let mut atc = vec![0.0; 12];
        kernels::matmul_at_acc(&a, &c, &mut atc, 2, 3, 4);
        for kk in 0..3 {
            for j in 0..4 {
                let expect = a[kk] * c[j] + a[3 + kk] * c[4 + j];
                assert_eq!(atc[kk * 4 + j], expect);
            }
        }
    }

    #[test]
    fn layer_norm_cases() {
        let ones = Tensor::<f64>::full(&[3], 1.0);
        let zeros = Tensor::<f64>::zeros(&[3]);
        let x = Tensor::new(vec![3], vec![5.0f64; 3]).unwrap();
        assert_eq!(
            layer_norm(&x, &ones, &zeros, 1e-12).unwrap().data(),
            &[0.0; 3]
        );

        let x = Tensor::new(vec![2], vec![1.0f64, -1.0]).unwrap();
        let g = Tensor::<f64>::full(&[2], 1.0);
        let b = Tensor::<f64>::zeros(&[2]);
        assert_eq!(layer_norm(&x, &g, &b, 0.0).unwrap().data(), &[1.0, -1.0]);

        // mean 2, population variance 8/3 -> ±2/sqrt(8/3)
        let x = Tensor::new(vec![3], vec![0.0f64, 2.0, 4.0]).unwrap();
        let y = layer_norm(&x, &ones, &zeros, 1e-12).unwrap();
        let expect = [-1.224_744_871_391_589, 0.0, 1.224_744_871_391_589];
        for (a, e) in y.data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-9, "{a} vs {e}");
        }
    }

    #[test]
    fn layer_norm_rejects_wrong_gamma() {
        let x = Tensor::<f32>::zeros(&[2, 4]);
        let g = Tensor::<f32>::zeros(&[3]);
        assert!(layer_norm(&x, &g, &g, 1e-12).is_err());
    }

    #[test]
    fn softmax_cases() {
        let x = Tensor::new(vec![3], vec![0.0f64; 3]).unwrap();
        for v in softmax(&x).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = Tensor::new(vec![2], vec![1000.0f32, 0.0]).unwrap();
        let y = softmax(&x);
        assert!(y.is_finite());
        assert!((y.data()[0] - 1.0).abs() < 1e-7 && y.data()[1] < 1e-30);

        let x = Tensor::new(vec![3], vec![1.0f64, 2.0, 3.0]).unwrap();
        let expect = [
            0.090_030_573_170_380_46,
            0.244_728_471_054_797_6,
            0.665_240_955_774_821_9,
        ];
        for (a, e) in softmax(&x).data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_cases() {
        assert_eq!(kernels::gelu(0.0f64), 0.0);
        assert!((kernels::gelu(10.0f64) - 10.0).abs() < 1e-6);
        assert!((kernels::gelu(10.0f32) - 10.0).abs() < 1e-6);
        // 1·Φ(1)
        assert!((kernels::gelu(1.0f64) - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert!((kernels::gelu(1.0f32) - 0.841_344_7).abs() < 1e-6);
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for i in -40..=40 {
            let x = i as f64 * 0.2;
            let h = 1e-5;
            let fd = (kernels::gelu(x + h) - kernels::gelu(x - h)) / (2.0 * h);
            assert!((fd - kernels::gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn clip_cases() {
        let mut g = vec![Tensor::new(vec![2], vec![0.3f64, 0.4]).unwrap()];
        let n = clip_global_norm(g.iter_mut(), 1.0).unwrap();
        assert!((n - 0.5).abs() < 1e-15);
        assert_eq!(g[0].data(), &[0.3, 0.4]);

        let mut g = vec![Tensor::new(vec![2], vec![1.2f64, 1.6]).unwrap()];
        let n = clip_global_norm(g.iter_mut(), 1.0).unwrap();
        assert!((n - 2.0).abs() < 1e-15);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15 && (g[0].data()[1] - 0.8).abs() < 1e-15);
        assert!((global_norm(g.iter()) - 1.0).abs() < 1e-6);

        let mut g = vec![
            Tensor::new(vec![2], vec![3.0f64, 0.0]).unwrap(),
            Tensor::new(vec![2], vec![0.0f64, 4.0]).unwrap(),
        ];
        let n = clip_global_norm(g.iter_mut(), 1.0).unwrap();
        assert_eq!(n, 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
        assert!((g[1].data()[1] - 0.8).abs() < 1e-15);

        assert!(clip_global_norm(g.iter_mut(), 0.0).is_err());
    }
}
