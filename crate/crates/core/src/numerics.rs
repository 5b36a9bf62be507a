//! Dense linear algebra, activations, and seeded randomness.
//!
//! Everything here works in 64-bit floats. Matrices are row-major. The
//! batched products used by the network go through [`gemm`], which hands the
//! work to the `matrixmultiply` kernels; [`DenseMatrix::matvec`] is a plain
//! loop kept for single-vector use and as an independent reference.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "DenseMatrix::new",
                format!("{} values for {rows}x{cols}", rows * cols),
                format!("{} values", data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "matrix entry {pos} is not finite ({})",
                data[pos]
            )));
        }
        Ok(Self { rows, cols, data })
    }

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

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::shape("DenseMatrix::from_rows", cols, bad.len()));
        }
        Self::new(rows.len(), cols, rows.concat())
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

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the raw storage. Callers must keep entries finite.
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// `y = M x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::shape(
                "matvec",
                format!("vector of length {} for {}x{} matrix", self.cols, self.rows, self.cols),
                format!("length {}", x.len()),
            ));
        }
        Ok(self
            .data
            .chunks_exact(self.cols.max(1))
            .take(self.rows)
            .map(|row| dot(row, x))
            .collect())
    }

    /// `y = Mᵀ x`.
    pub fn matvec_transposed(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.rows {
            return Err(Error::shape(
                "matvec_transposed",
                format!("vector of length {} for {}x{} matrix", self.rows, self.rows, self.cols),
                format!("length {}", x.len()),
            ));
        }
        let mut y = vec![0.0; self.cols];
        for (row, &xi) in self.data.chunks_exact(self.cols.max(1)).zip(x) {
            for (yj, &m) in y.iter_mut().zip(row) {
                *yj += m * xi;
            }
        }
        Ok(y)
    }

    pub fn sum_of_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Storage orientation of a `gemm` operand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// Stored as the logical `rows x cols` matrix.
    Normal,
    /// Stored as the transpose of the logical matrix.
    Transposed,
}

/// `C = A·B` or `C += A·B` for logical shapes `A: m×k`, `B: k×n`, `C: m×n`,
/// all row-major. A `Transposed` operand is stored as its own transpose.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_layout: Layout,
    b: &[f64],
    b_layout: Layout,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: A has wrong length");
    assert_eq!(b.len(), k * n, "gemm: B has wrong length");
    assert_eq!(c.len(), m * n, "gemm: C has wrong length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = match a_layout {
        Layout::Normal => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match b_layout {
        Layout::Normal => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices, and `c` does not alias `a` or `b` (borrow rules).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Inner product with four independent partial sums, so the loop vectorizes.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

/// Subgradient of ReLU, taking 0 at the kink.
pub fn relu_grad(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect()
}

/// Seeded, replayable random stream (ChaCha8 keyed by the seed).
///
/// ChaCha is a counter-mode generator, so its state never repeats within
/// 2^64 draws. Independent sub-streams are made by reseeding with
/// [`RandomStream::fork`].
#[derive(Clone, Debug)]
pub struct RandomStream {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RandomStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Rewinds to the start of the sequence for the stored seed.
    pub fn reset(&mut self) {
        self.rng = ChaCha8Rng::seed_from_u64(self.seed);
    }

    /// A fresh stream seeded with `seed + offset`.
    pub fn fork(&self, offset: u64) -> Self {
        Self::new(self.seed.wrapping_add(offset))
    }

    /// Uniform draw in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    /// Uniform draw in the closed interval `[lo, hi]`.
    pub fn uniform_closed(&mut self, lo: f64, hi: f64) -> f64 {
        if lo == hi {
            return lo;
        }
        self.rng.gen_range(lo..=hi)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.rng);
    }
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`, else `1/(1-rate)`.
pub fn dropout_mask(stream: &mut RandomStream, len: usize, rate: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
    }
    if rate == 0.0 {
        return Ok(vec![1.0; len]);
    }
    let keep = 1.0 / (1.0 - rate);
    Ok((0..len)
        .map(|_| if stream.next_f64() < rate { 0.0 } else { keep })
        .collect())
}

/// Glorot-uniform weight matrix: entries in `±sqrt(6 / (rows + cols))`.
pub fn init_dense(stream: &mut RandomStream, rows: usize, cols: usize) -> DenseMatrix {
    assert!(rows >= 1 && cols >= 1, "init_dense needs a non-empty shape");
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| (2.0 * stream.next_f64() - 1.0) * bound)
        .collect();
    DenseMatrix { rows, cols, data }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn matvec_identity_and_zero() {
        let id = DenseMatrix::identity(3);
        assert_eq!(id.matvec(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
        let zero = DenseMatrix::zeros(2, 4);
        assert_eq!(zero.matvec(&[5.0, -1.0, 2.0, 7.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn matvec_hand_computed() {
        let m = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(m.matvec(&[1.0, 1.0]).unwrap(), vec![3.0, 7.0]);
        assert_eq!(m.matvec_transposed(&[1.0, 1.0]).unwrap(), vec![4.0, 6.0]);
    }

    #[test]
    fn matvec_shape_error_names_both_shapes() {
        let m = DenseMatrix::zeros(2, 3);
        let msg = m.matvec(&[1.0, 2.0]).unwrap_err().to_string();
        assert!(msg.contains("2x3"), "{msg}");
        assert!(msg.contains("length 2"), "{msg}");
    }

    #[test]
    fn new_rejects_bad_length_and_nan() {
        assert!(DenseMatrix::new(2, 2, vec![0.0; 3]).is_err());
        assert!(DenseMatrix::new(1, 2, vec![0.0, f64::NAN]).is_err());
    }

    #[test]
    fn gemm_matches_matvec_in_every_layout() {
        let mut s = RandomStream::new(3);
        let (m, k, n) = (4, 5, 3);
        let a: Vec<f64> = (0..m * k).map(|_| s.next_f64() - 0.5).collect();
        let b: Vec<f64> = (0..k * n).map(|_| s.next_f64() - 0.5).collect();
        let reference = {
            let mut c = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                }
            }
            c
        };
        let transpose = |x: &[f64], r: usize, c: usize| {
            let mut t = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    t[j * r + i] = x[i * c + j];
                }
            }
            t
        };
        let at = transpose(&a, m, k);
        let bt = transpose(&b, k, n);
        for (aa, al) in [(&a, Layout::Normal), (&at, Layout::Transposed)] {
            for (bb, bl) in [(&b, Layout::Normal), (&bt, Layout::Transposed)] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, aa, al, bb, bl, &mut c, false);
                for (x, y) in c.iter().zip(&reference) {
                    assert!((x - y).abs() < 1e-14);
                }
                gemm(m, k, n, aa, al, bb, bl, &mut c, true);
                for (x, y) in c.iter().zip(&reference) {
                    assert!((x - 2.0 * y).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn relu_cases() {
        assert_eq!(relu(&[-1.0, 0.0, 2.0]), vec![0.0, 0.0, 2.0]);
        assert_eq!(relu_grad(&[-1.0, 0.0, 2.0]), vec![0.0, 0.0, 1.0]);
        assert_eq!(relu(&[5.0]), vec![5.0]);
    }

    #[test]
    fn dropout_rate_zero_is_all_ones() {
        let mut s = RandomStream::new(1);
        assert_eq!(dropout_mask(&mut s, 7, 0.0).unwrap(), vec![1.0; 7]);
    }

    #[test]
    fn dropout_rejects_bad_rate() {
        let mut s = RandomStream::new(1);
        assert!(dropout_mask(&mut s, 3, 1.0).is_err());
        assert!(dropout_mask(&mut s, 3, -0.1).is_err());
    }

    #[test]
    fn dropout_zero_fraction_and_mean() {
        let mut s = RandomStream::new(11);
        let n = 100_000;
        let mask = dropout_mask(&mut s, n, 0.2).unwrap();
        let zeros = mask.iter().filter(|&&v| v == 0.0).count() as f64 / n as f64;
        assert!((zeros - 0.2).abs() < 0.01, "zero fraction {zeros}");
        // Each entry has variance rate/(1-rate) = 0.25, so the standard error
        // of the mean is 0.5/sqrt(n).
        let mean = mask.iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 3.0 * 0.5 / (n as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn dropout_replays_after_reset() {
        let mut s = RandomStream::new(99);
        let a = dropout_mask(&mut s, 64, 0.2).unwrap();
        s.reset();
        let b = dropout_mask(&mut s, 64, 0.2).unwrap();
        assert_eq!(a, b);
        let mut t = RandomStream::new(99);
        assert_eq!(dropout_mask(&mut t, 64, 0.2).unwrap(), a);
    }

    #[test]
    fn init_dense_range_mean_and_determinism() {
        let mut s = RandomStream::new(5);
        let one = init_dense(&mut s, 1, 1);
        assert!(one.get(0, 0).abs() <= 3f64.sqrt());

        let mut s = RandomStream::new(5);
        let big = init_dense(&mut s, 100, 100);
        let bound = (6.0f64 / 200.0).sqrt();
        assert!(big.as_slice().iter().all(|v| v.abs() <= bound));
        let mean = big.as_slice().iter().sum::<f64>() / 10_000.0;
        assert!(mean.abs() < 0.01, "mean {mean}");

        let mut s2 = RandomStream::new(5);
        assert_eq!(init_dense(&mut s2, 100, 100), big);
    }

    #[test]
    fn fork_is_reseed_by_offset() {
        let base = RandomStream::new(40);
        let mut a = base.fork(2);
        let mut b = RandomStream::new(42);
        assert_eq!(a.next_f64().to_bits(), b.next_f64().to_bits());
    }

    proptest! {
        #[test]
        fn matvec_is_linear(
            entries in proptest::collection::vec(-1.0f64..1.0, 12),
            x in proptest::collection::vec(-1.0f64..1.0, 4),
            y in proptest::collection::vec(-1.0f64..1.0, 4),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            let m = DenseMatrix::new(3, 4, entries).unwrap();
            let combo: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
            let lhs = m.matvec(&combo).unwrap();
            let mx = m.matvec(&x).unwrap();
            let my = m.matvec(&y).unwrap();
            for i in 0..3 {
                let rhs = a * mx[i] + b * my[i];
                let scale = lhs[i].abs().max(rhs.abs()).max(1.0);
                prop_assert!((lhs[i] - rhs).abs() <= 1e-12 * scale);
            }
        }

        #[test]
        fn relu_is_idempotent(x in proptest::collection::vec(-10.0f64..10.0, 0..32)) {
            prop_assert_eq!(relu(&relu(&x)), relu(&x));
        }
    }
}
