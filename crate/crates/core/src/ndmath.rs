//! Dense numeric kernel: row-major matrices, probability vectors, stable
//! softmax/entropy and a splittable deterministic RNG.
//!
//! Everything is `f64`. Entropies are in nats with `0 * ln 0 = 0`.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on the sum of a [`ProbVector`].
pub const PROB_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MathError {
    #[error("invalid class count: softmax needs at least one logit")]
    EmptyLogits,
    #[error("{op}: shape mismatch between {}x{} and {}x{}", .left.0, .left.1, .right.0, .right.1)]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("buffer of length {len} cannot back a {rows}x{cols} matrix")]
    BadLength { len: usize, rows: usize, cols: usize },
    #[error("not a probability vector: {0}")]
    InvalidProbability(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, MathError> {
        if data.len() != rows * cols {
            return Err(MathError::BadLength {
                len: data.len(),
                rows,
                cols,
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(MathError::NonFinite("Matrix::from_vec"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, MathError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(MathError::ShapeMismatch {
                    op: "from_rows",
                    left: (1, cols),
                    right: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, so zero-width matrices yield empty rows explicitly
        let cols = self.cols;
        (0..self.rows).map(move |r| &self.data[r * cols..(r + 1) * cols])
    }

    /// Gathers the given rows into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, MathError> {
        if self.cols != other.rows {
            return Err(MathError::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(
            (self.rows, self.cols, other.cols),
            (&self.data, self.cols, 1),
            (&other.data, other.cols, 1),
            &mut out,
        );
        Ok(out)
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix, MathError> {
        if self.rows != other.rows {
            return Err(MathError::ShapeMismatch {
                op: "t_matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        gemm(
            (self.cols, self.rows, other.cols),
            (&self.data, 1, self.cols),
            (&other.data, other.cols, 1),
            &mut out,
        );
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix, MathError> {
        if self.cols != other.cols {
            return Err(MathError::ShapeMismatch {
                op: "matmul_t",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        gemm(
            (self.rows, self.cols, other.rows),
            (&self.data, self.cols, 1),
            (&other.data, 1, other.cols),
            &mut out,
        );
        Ok(out)
    }

    /// Adds `bias` to every row.
    pub fn add_bias(&self, bias: &[f64]) -> Result<Matrix, MathError> {
        let mut out = self.clone();
        out.add_bias_in_place(bias)?;
        Ok(out)
    }

    pub fn add_bias_in_place(&mut self, bias: &[f64]) -> Result<(), MathError> {
        if bias.len() != self.cols {
            return Err(MathError::ShapeMismatch {
                op: "add_bias",
                left: self.shape(),
                right: (1, bias.len()),
            });
        }
        let cols = self.cols;
        for r in 0..self.rows {
            for (v, b) in self.data[r * cols..(r + 1) * cols].iter_mut().zip(bias) {
                *v += b;
            }
        }
        Ok(())
    }

    pub fn relu(&self) -> Matrix {
        let mut out = self.clone();
        out.relu_in_place();
        out
    }

    pub fn relu_in_place(&mut self) {
        for v in &mut self.data {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }

    /// Subgradient of ReLU evaluated at `self`: 1 where positive, 0 elsewhere (including 0).
    pub fn relu_grad(&self) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// Column sums, used for bias gradients.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for row in self.iter_rows() {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `out = a · b` for an `m x k` operand `a` and `k x n` operand `b`, each
/// given as (data, row stride, column stride). `out` must be zeroed `m x n`.
fn gemm(
    (m, k, n): (usize, usize, usize),
    (a, rsa, csa): (&[f64], usize, usize),
    (b, rsb, csb): (&[f64], usize, usize),
    out: &mut Matrix,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n && out.data.len() == m * n);
    // SAFETY: the strides address only elements inside `a`, `b` and `out`,
    // whose lengths were checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// A categorical distribution over classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Validates entries in `[0, 1]` summing to one within [`PROB_SUM_TOL`].
    pub fn new(probs: Vec<f64>) -> Result<Self, MathError> {
        if probs.is_empty() {
            return Err(MathError::InvalidProbability("empty".into()));
        }
        if let Some(bad) = probs
            .iter()
            .find(|p| !p.is_finite() || **p < 0.0 || **p > 1.0)
        {
            return Err(MathError::InvalidProbability(format!(
                "entry {bad} outside [0, 1]"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(MathError::InvalidProbability(format!("sum is {sum}")));
        }
        Ok(Self(probs))
    }

    pub fn uniform(n_classes: usize) -> Self {
        Self(vec![1.0 / n_classes as f64; n_classes])
    }

    pub fn one_hot(n_classes: usize, class: usize) -> Self {
        let mut v = vec![0.0; n_classes];
        v[class] = 1.0;
        Self(v)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn entropy(&self) -> f64 {
        entropy_of(&self.0)
    }
}

/// Index of the largest entry; ties go to the lowest index. Returns 0 for an empty slice.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Result<ProbVector, MathError> {
    if logits.is_empty() {
        return Err(MathError::EmptyLogits);
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(MathError::NonFinite("softmax"));
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(ProbVector(out))
}

/// Max-shifted softmax over a non-empty slice, in place.
pub fn softmax_in_place(values: &mut [f64]) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in values.iter_mut() {
        *v /= sum;
    }
}

/// Entropy in nats of a validated distribution.
pub fn entropy(p: &ProbVector) -> f64 {
    entropy_of(p.as_slice())
}

/// `-Σ p ln p` with `0 ln 0 = 0`, on a raw slice assumed to be a distribution.
#[inline]
pub fn entropy_of(p: &[f64]) -> f64 {
    let mut h = 0.0;
    for &q in p {
        if q > 0.0 {
            h -= q * q.ln();
        }
    }
    // -0.0 for one-hot inputs
    h.max(0.0)
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seedable stream generator with pure, keyed child streams.
///
/// The key never changes after construction, so [`Rng::split`] depends only on
/// `(key, stream_id)` and leaves the parent's draw sequence untouched.
#[derive(Debug, Clone)]
pub struct Rng {
    key: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut material = [0u8; 32];
        let mut z = seed;
        for chunk in material.chunks_exact_mut(8) {
            z = splitmix64(z);
            chunk.copy_from_slice(&z.to_le_bytes());
        }
        Self {
            key: seed,
            inner: ChaCha8Rng::from_seed(material),
        }
    }

    /// The seed this stream was built from.
    pub fn key(&self) -> u64 {
        self.key
    }

    /// Derives an independent child stream. Calling it twice with the same id
    /// yields the same child.
    pub fn split(&self, stream_id: u64) -> Rng {
        let child = splitmix64(self.key ^ splitmix64(stream_id ^ 0xD1B5_4A32_D192_ED03));
        Rng::new(child.rotate_left(17) ^ stream_id.wrapping_mul(0xA24B_AED4_963E_E407))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    #[inline]
    pub fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[low, high)`.
    #[inline]
    pub fn uniform_range(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.uniform()
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    #[inline]
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// `true` with probability `p`.
    #[inline]
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct elements of `items`, drawn uniformly without replacement.
    pub fn choose_distinct<T: Copy>(&mut self, items: &[T], k: usize) -> Vec<T> {
        let k = k.min(items.len());
        let mut pool = items.to_vec();
        for i in 0..k {
            let j = i + self.below(pool.len() - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}
