//! Dense tensors and a reverse-mode tape.
//!
//! Tensors are row-major and generic over [`Real`] so the same code runs at
//! 32 or 64 bits. Gradient checks always use `f64`.

pub mod gradcheck;
mod graph;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{shape, Error, Result};

pub use graph::{Gradients, Graph, Var};

/// Floating-point element type accepted by [`Tensor`] and [`Graph`].
pub trait Real: Float + Default + Debug + Display + Send + Sync + Sum + 'static {
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
    const NAME: &'static str;
}

impl Real for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    const NAME: &'static str = "f32";
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    const NAME: &'static str = "f64";
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(
    try_from = "RawTensor<T>",
    bound(deserialize = "T: Real + Deserialize<'de>")
)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

#[derive(Deserialize)]
struct RawTensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> TryFrom<RawTensor<T>> for Tensor<T> {
    type Error = Error;

    fn try_from(raw: RawTensor<T>) -> Result<Self> {
        Tensor::new(raw.shape, raw.data)
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(&shape, data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::of(x)).collect())
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { T::one() } else { T::zero() })
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

    /// Number of rows when viewed as a matrix; every leading extent is folded in.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            n => self.shape[..n - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err(&shape, self.data.len()));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::of(x.as_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn norm(&self) -> f64 {
        self.data
            .iter()
            .map(|x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Matrix product of two 2-D tensors.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.as_matrix()?;
        let (k2, n) = other.as_matrix()?;
        if k != k2 {
            return Err(shape(format!(
                "matmul inner extents differ: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_acc(&self.data, &other.data, &mut out, m, k, n);
        Self::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.as_matrix()?;
        Ok(Self::from_fn(n, m, |r, c| self.data[c * n + r]))
    }

    pub(crate) fn as_matrix(&self) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(shape(format!(
                "expected a matrix, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    /// Rows `[start, start + len)` of a tensor viewed as a matrix.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        let c = self.cols();
        if start + len > self.rows() {
            return Err(shape(format!(
                "row slice {start}..{} out of {} rows",
                start + len,
                self.rows()
            )));
        }
        Self::new(
            vec![len, c],
            self.data[start * c..(start + len) * c].to_vec(),
        )
    }

    pub fn concat_rows(parts: &[&Self]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return Err(shape("concat of zero tensors"));
        };
        let c = first.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols() != c {
                return Err(shape(format!(
                    "concat_rows column mismatch {c} vs {}",
                    p.cols()
                )));
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Self::new(vec![rows, c], data)
    }
}

fn shape_err(shape: &[usize], len: usize) -> Error {
    Error::Shape(format!("shape {shape:?} does not hold {len} values"))
}

/// `out[m,n] += a[m,k] * b[k,n]`
pub(crate) fn matmul_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aip * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] * b[n,k]^T`
pub(crate) fn matmul_nt_acc<T: Real>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc = acc + x * y;
            }
            out[i * n + j] = out[i * n + j] + acc;
        }
    }
}

/// `out[k,n] += a[m,k]^T * b[m,n]`
pub(crate) fn matmul_tn_acc<T: Real>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aip * bv;
            }
        }
    }
}

/// Row-wise softmax over the entries allowed by `mask` (all entries when `None`).
/// Masked entries come out as exact zeros.
pub fn softmax_rows<T: Real>(x: &Tensor<T>, mask: Option<&[bool]>) -> Result<Tensor<T>> {
    let cols = x.cols();
    if cols == 0 {
        return Err(shape("softmax over an empty row"));
    }
    if let Some(m) = mask {
        if m.len() != x.len() {
            return Err(shape(format!(
                "mask has {} entries for {} logits",
                m.len(),
                x.len()
            )));
        }
    }
    let mut out = vec![T::zero(); x.len()];
    for r in 0..x.rows() {
        let row = &x.data[r * cols..(r + 1) * cols];
        let allowed = |c: usize| mask.is_none_or(|m| m[r * cols + c]);
        let mut max = T::neg_infinity();
        for (c, &v) in row.iter().enumerate() {
            if allowed(c) {
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("softmax input row {r}")));
                }
                max = max.max(v);
            }
        }
        if max == T::neg_infinity() {
            return Err(shape(format!("softmax row {r} has no unmasked entries")));
        }
        let orow = &mut out[r * cols..(r + 1) * cols];
        let mut total = T::zero();
        for (c, &v) in row.iter().enumerate() {
            if allowed(c) {
                let e = (v - max).exp();
                orow[c] = e;
                total = total + e;
            }
        }
        let inv = T::one() / total;
        for o in orow.iter_mut() {
            *o = *o * inv;
        }
    }
    Tensor::new(x.shape.clone(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn matmul_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(3, 3, &mut rng);
        assert_eq!(Tensor::eye(3).matmul(&x).unwrap(), x);
    }

    #[test]
    fn matmul_hand_values() {
        let a = Tensor::<f64>::from_f64(vec![2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f64>::from_f64(vec![2, 1], &[1.0, 1.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_against_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(3, 4, &mut rng);
        let b = random(4, 2, &mut rng);
        let c = a.matmul(&b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for p in 0..4 {
                    s += a.at(i, p) * b.at(p, j);
                }
                assert!((c.at(i, j) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&a), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_is_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = random(3, 5, &mut rng);
            let b = random(5, 4, &mut rng);
            let c = random(4, 2, &mut rng);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            assert!(left.max_abs_diff(&right) < 1e-5);
        }
    }

    #[test]
    fn nt_and_tn_kernels_match_transposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(3, 4, &mut rng);
        let b = random(5, 4, &mut rng);
        let mut out = vec![0.0; 15];
        matmul_nt_acc(a.data(), b.data(), &mut out, 3, 4, 5);
        let want = a.matmul(&b.transpose().unwrap()).unwrap();
        assert!(Tensor::new(vec![3, 5], out).unwrap().max_abs_diff(&want) < 1e-12);

        let c = random(3, 5, &mut rng);
        let mut out = vec![0.0; 20];
        matmul_tn_acc(a.data(), c.data(), &mut out, 3, 4, 5);
        let want = a.transpose().unwrap().matmul(&c).unwrap();
        assert!(Tensor::new(vec![4, 5], out).unwrap().max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn softmax_uniform_row() {
        let x = Tensor::<f64>::zeros(&[1, 3]);
        let p = softmax_rows(&x, None).unwrap();
        for &v in p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_large_logits_saturate() {
        let x = Tensor::<f64>::from_f64(vec![1, 2], &[800.0, -800.0]).unwrap();
        let p = softmax_rows(&x, None).unwrap();
        assert_eq!(p.data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(1, 7, &mut rng).map(|v| v * 5.0);
        let p = softmax_rows(&x, None).unwrap();
        let denom: f64 = x.data().iter().map(|v| v.exp()).sum();
        for (pv, xv) in p.data().iter().zip(x.data()) {
            assert!((pv - xv.exp() / denom).abs() < 1e-14);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let x = Tensor::<f64>::from_f64(vec![1, 2], &[f64::NAN, 0.0]).unwrap();
        assert!(matches!(softmax_rows(&x, None), Err(Error::NonFinite(_))));
    }

    #[test]
    fn softmax_mask_zeroes_entries() {
        let x = Tensor::<f64>::from_f64(vec![2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = softmax_rows(&x, Some(&[true, false, true, true])).unwrap();
        assert_eq!(p.at(0, 0), 1.0);
        assert_eq!(p.at(0, 1), 0.0);
        assert!((p.at(1, 0) + p.at(1, 1) - 1.0).abs() < 1e-15);
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_normalized_and_shift_invariant(
            row in proptest::collection::vec(-30.0f64..30.0, 1..12),
            shift in -100.0f64..100.0,
        ) {
            let n = row.len();
            let x = Tensor::<f64>::from_f64(vec![1, n], &row).unwrap();
            let p = softmax_rows(&x, None).unwrap();
            let s: f64 = p.data().iter().sum();
            proptest::prop_assert!((s - 1.0).abs() < 1e-6);
            proptest::prop_assert!(p.data().iter().all(|&v| v >= 0.0));
            let shifted = x.map(|v| v + shift);
            let q = softmax_rows(&shifted, None).unwrap();
            proptest::prop_assert!(p.max_abs_diff(&q) < 1e-9);
        }
    }
}
