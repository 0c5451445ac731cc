//! Dense row-major 2-D tensors and a reverse-mode autodiff tape.
//!
//! [`Tensor`] carries the value-level operations. [`Tape`] records the same
//! operations on node ids and replays them backwards to produce gradients;
//! every taped forward calls the corresponding `Tensor` method, so the
//! inference path and the training path compute identical values.

mod tape;

pub use tape::{Gradients, NodeId, Tape};

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Whether stochastic layers are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Sigmoid,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} values for a {rows}x{cols} tensor",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// A `1 x n` row vector.
    pub fn row(values: Vec<T>) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::row(vec![value])
    }

    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn row_slice(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Value of a `1 x 1` tensor.
    pub fn item(&self) -> Result<T> {
        if self.shape() != (1, 1) {
            return Err(Error::shape(format!(
                "expected 1x1, got {}x{}",
                self.rows, self.cols
            )));
        }
        Ok(self.data[0])
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.widen()).unwrap_or_else(U::nan))
                .collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "{what}: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.same_shape(other, "elementwise")?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn binary(&self, other: &Self, kind: Binary) -> Result<Self> {
        match kind {
            Binary::Add => self.zip_with(other, |a, b| a + b),
            Binary::Sub => self.zip_with(other, |a, b| a - b),
            Binary::Mul => self.zip_with(other, |a, b| a * b),
        }
    }

    pub fn unary(&self, kind: Unary) -> Self {
        match kind {
            Unary::Relu => self.map(relu),
            Unary::Sigmoid => self.map(sigmoid),
            Unary::Tanh => self.map(|v| v.tanh()),
        }
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.same_shape(other, "accumulate")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        gemm_into(self, false, other, false, &mut out, false);
        Ok(out)
    }

    /// Adds a `1 x cols` row to every row.
    pub fn add_row(&self, bias: &Self) -> Result<Self> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(Error::shape(format!(
                "row broadcast of {}x{} onto {}x{}",
                bias.rows, bias.cols, self.rows, self.cols
            )));
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.cols.max(1)) {
            for (v, &b) in row.iter_mut().zip(&bias.data) {
                *v += b;
            }
        }
        Ok(out)
    }

    /// Row-wise layer normalisation with population variance.
    pub fn layer_norm(&self, gain: &Self, bias: &Self, eps: T) -> Result<Self> {
        Ok(self.layer_norm_cached(gain, bias, eps)?.0)
    }

    /// Layer norm returning the normalised pre-affine values and the
    /// per-row inverse standard deviation, which the tape reuses backwards.
    pub(crate) fn layer_norm_cached(
        &self,
        gain: &Self,
        bias: &Self,
        eps: T,
    ) -> Result<(Self, Self, Vec<T>)> {
        let d = self.cols;
        if d < 2 {
            return Err(Error::Degenerate(format!(
                "layer norm over {d} feature(s)"
            )));
        }
        if !(eps >= T::zero()) {
            return Err(Error::Param("layer norm eps must be non-negative".into()));
        }
        if gain.shape() != (1, d) || bias.shape() != (1, d) {
            return Err(Error::shape("layer norm gain/bias must be 1 x d"));
        }
        let n = T::from_usize(d).unwrap();
        let mut xhat = Self::zeros(self.rows, d);
        let mut out = Self::zeros(self.rows, d);
        let mut inv_std = Vec::with_capacity(self.rows);
        for r in 0..self.rows {
            let x = self.row_slice(r);
            let mean = x.iter().copied().sum::<T>() / n;
            let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let denom = (var + eps).sqrt();
            if denom == T::zero() {
                return Err(Error::Degenerate(
                    "zero variance with eps = 0".into(),
                ));
            }
            let inv = T::one() / denom;
            inv_std.push(inv);
            for c in 0..d {
                let h = (x[c] - mean) * inv;
                xhat.data[r * d + c] = h;
                out.data[r * d + c] = h * gain.data[c] + bias.data[c];
            }
        }
        Ok((out, xhat, inv_std))
    }

    /// Column-wise mean over rows (frames).
    pub fn mean_pool(&self) -> Result<Self> {
        if self.rows == 0 {
            return Err(Error::EmptySequence("mean pool over zero frames".into()));
        }
        let mut out = vec![T::zero(); self.cols];
        for row in self.data.chunks(self.cols.max(1)) {
            for (acc, &v) in out.iter_mut().zip(row) {
                *acc += v;
            }
        }
        let n = T::from_usize(self.rows).unwrap();
        for v in &mut out {
            *v /= n;
        }
        Ok(Self::row(out))
    }

    /// Horizontal concatenation of two non-empty row vectors.
    pub fn concat_cols(&self, other: &Self) -> Result<Self> {
        if self.rows != 1 || other.rows != 1 {
            return Err(Error::shape("concat_cols expects row vectors"));
        }
        if self.cols == 0 || other.cols == 0 {
            return Err(Error::shape("concat_cols of an empty row vector"));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Self::row(data))
    }

    /// Vertical stacking of tensors with equal column counts.
    pub fn stack_rows(parts: &[&Self]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return Err(Error::shape("stack_rows of nothing"));
        };
        let cols = first.cols;
        if parts.iter().any(|p| p.cols != cols) {
            return Err(Error::shape("stack_rows with differing widths"));
        }
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Self::new(data.len() / cols.max(1), cols, data)
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.cols || len == 0 {
            return Err(Error::shape(format!(
                "column slice {start}..{} of width {}",
                start + len,
                self.cols
            )));
        }
        Ok(Self::from_fn(self.rows, len, |r, c| self.get(r, start + c)))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.rows || len == 0 {
            return Err(Error::shape(format!(
                "row slice {start}..{} of height {}",
                start + len,
                self.rows
            )));
        }
        Ok(Self {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        })
    }

    /// Inverted dropout. Returns the output and the multiplicative mask
    /// (`0` or `1/(1-rate)` per entry; all ones in eval mode).
    pub fn dropout<R: Rng + ?Sized>(&self, rate: f64, mode: Mode, rng: &mut R) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Param(format!("dropout rate {rate} outside [0, 1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok((self.clone(), Self::filled(self.rows, self.cols, T::one())));
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let mask = Self::from_fn(self.rows, self.cols, |_, _| {
            if rng.gen::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        });
        let out = self.zip_with(&mask, |a, m| a * m)?;
        Ok((out, mask))
    }

    pub fn sum(&self) -> T {
        crate::scalar::pairwise_sum(&self.data)
    }

    pub fn mean(&self) -> Result<T> {
        if self.data.is_empty() {
            return Err(Error::EmptySequence("mean of empty tensor".into()));
        }
        Ok(self.sum() / T::from_usize(self.data.len()).unwrap())
    }
}

pub(crate) fn relu<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        T::zero()
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// `out (+)= op(a) · op(b)` where `op` optionally transposes.
pub(crate) fn gemm_into<T: Scalar>(
    a: &Tensor<T>,
    ta: bool,
    b: &Tensor<T>,
    tb: bool,
    out: &mut Tensor<T>,
    accumulate: bool,
) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    debug_assert_eq!(k, k2);
    debug_assert_eq!(out.shape(), (m, n));
    let a_strides = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let b_strides = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(
        m,
        k,
        n,
        T::one(),
        &a.data,
        a_strides,
        &b.data,
        b_strides,
        beta,
        &mut out.data,
        (n as isize, 1),
    );
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let m = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(Tensor::identity(2).matmul(&m).unwrap(), m);
        let p = t(&[&[1.0, 2.0]]).matmul(&t(&[&[3.0], &[4.0]])).unwrap();
        assert_eq!(p, t(&[&[11.0]]));
        assert!(matches!(m.matmul(&t(&[&[1.0, 2.0]])), Err(Error::Shape(_))));
    }

    #[test]
    fn unary_kinds() {
        let x = Tensor::row(vec![-1.0, 0.0, 2.0]);
        assert_eq!(x.unary(Unary::Relu).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(Tensor::scalar(0.0).unary(Unary::Sigmoid).data(), &[0.5]);
        assert!(sigmoid(-800.0f64).is_finite() && sigmoid(800.0f64) == 1.0);
    }

    #[test]
    fn binary_shape_mismatch() {
        let a = Tensor::<f64>::zeros(1, 2);
        let b = Tensor::<f64>::zeros(2, 1);
        assert!(matches!(a.binary(&b, Binary::Add), Err(Error::Shape(_))));
    }

    #[test]
    fn layer_norm_cases() {
        let g = Tensor::filled(1, 4, 1.0f64);
        let b = Tensor::zeros(1, 4);
        let y = Tensor::row(vec![1.0; 4]).layer_norm(&g, &b, 1e-5).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-12));

        let g = Tensor::filled(1, 2, 1.0);
        let b = Tensor::zeros(1, 2);
        let y = Tensor::row(vec![0.0, 2.0]).layer_norm(&g, &b, 0.0).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);

        let one = Tensor::row(vec![3.0]);
        let r = one.layer_norm(&Tensor::scalar(1.0), &Tensor::scalar(0.0), 1e-5);
        assert!(matches!(r, Err(Error::Degenerate(_))));
        let flat = Tensor::row(vec![2.0, 2.0]);
        assert!(matches!(flat.layer_norm(&g, &b, 0.0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn layer_norm_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::from_fn(1, 37, |_, _| rng.gen_range(-3.0..5.0));
        let y = x
            .layer_norm(&Tensor::filled(1, 37, 1.0), &Tensor::zeros(1, 37), 1e-5)
            .unwrap();
        let mean = y.mean().unwrap();
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 37.0;
        assert!(mean.abs() <= 1e-9);
        assert!((var - 1.0).abs() <= 1e-5, "{var}");
    }

    #[test]
    fn mean_pool_cases() {
        assert_eq!(Tensor::row(vec![5.0, 7.0]).mean_pool().unwrap().data(), &[5.0, 7.0]);
        let x = t(&[&[0.0, 0.0], &[2.0, 4.0]]);
        assert_eq!(x.mean_pool().unwrap().data(), &[1.0, 2.0]);
        assert!(matches!(
            Tensor::<f64>::zeros(0, 3).mean_pool(),
            Err(Error::EmptySequence(_))
        ));
    }

    #[test]
    fn concat_cols_cases() {
        let c = Tensor::row(vec![1.0]).concat_cols(&Tensor::row(vec![2.0, 3.0])).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 3.0]);
        let empty = Tensor::<f64>::row(vec![]);
        assert!(empty.concat_cols(&Tensor::row(vec![1.0])).is_err());
        assert!(Tensor::<f64>::zeros(2, 1).concat_cols(&Tensor::row(vec![1.0])).is_err());
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::from_fn(3, 4, |r, c| (r * 4 + c) as f64);
        assert_eq!(x.dropout(0.5, Mode::Eval, &mut rng).unwrap().0, x);
        assert_eq!(x.dropout(0.0, Mode::Train, &mut rng).unwrap().0, x);
        assert!(matches!(x.dropout(1.0, Mode::Train, &mut rng), Err(Error::Param(_))));
        assert!(x.dropout(-0.1, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_preserves_expectation() {
        // Monte-Carlo: each output entry is x * Bernoulli(0.5) * 2, so the
        // sample mean over N trials has std x / sqrt(N).
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::row(vec![1.0, -2.0, 0.5]);
        let trials = 10_000;
        let mut acc = Tensor::zeros(1, 3);
        for _ in 0..trials {
            acc.add_assign(&x.dropout(0.5, Mode::Train, &mut rng).unwrap().0).unwrap();
        }
        for (i, &xi) in x.data().iter().enumerate() {
            let mean = acc.data()[i] / trials as f64;
            let sigma = xi.abs() / (trials as f64).sqrt();
            assert!((mean - xi).abs() <= 3.0 * sigma, "entry {i}: {mean} vs {xi}");
        }
    }

    #[test]
    fn slicing_and_stacking() {
        let x = t(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        assert_eq!(x.slice_cols(1, 2).unwrap(), t(&[&[2.0, 3.0], &[5.0, 6.0]]));
        assert_eq!(x.slice_rows(1, 1).unwrap(), t(&[&[4.0, 5.0, 6.0]]));
        assert!(x.slice_cols(2, 2).is_err());
        let s = Tensor::stack_rows(&[&x, &x.slice_rows(0, 1).unwrap()]).unwrap();
        assert_eq!(s.shape(), (3, 3));
    }
}
