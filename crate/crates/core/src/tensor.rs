//! Dense row-major matrices, vector helpers, exact summation and seeded
//! random streams.
//!
//! Everything here is a pure function of its inputs. `gemm` uses a fixed
//! `i-k-j` loop order so every output element is accumulated as
//! `((0 + a0*b0) + a1*b1) + ...`, the same sequence as the textbook triple
//! loop, which makes results bit-reproducible.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use smallvec::SmallVec;

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
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

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// Copies the listed rows (repeats allowed) into a new matrix.
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Matrix product `a * b` with a fixed summation order.
pub fn gemm(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "gemm: {}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut c = Matrix::zeros(m, n);
    for i in 0..m {
        let out = &mut c.data[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p];
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in out.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Ok(c)
}

/// Returns `y + alpha * x`.
pub fn saxpy(alpha: f64, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!(
            "saxpy: x has {} entries, y has {}",
            x.len(),
            y.len()
        )));
    }
    Ok(y.iter().zip(x).map(|(&yv, &xv)| yv + alpha * xv).collect())
}

/// A seedable, platform-stable random stream.
///
/// Backed by ChaCha8: the 64-bit `seed` is expanded to the 256-bit key with
/// the generator's `seed_from_u64` (PCG32 expansion) and `stream_id` selects
/// the ChaCha stream (nonce). Distinct stream ids on the same seed give
/// independent sequences.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Uniform index in `0..n`. `n` must be nonzero.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn gaussian(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// `n` draws from `N(mean, std^2)`.
pub fn draw_gaussian(rng: &mut RngStream, n: usize, mean: f64, std: f64) -> Vec<f64> {
    debug_assert!(std >= 0.0);
    (0..n).map(|_| mean + std * rng.gaussian()).collect()
}

/// Exact running sum of `f64` vectors.
///
/// Each coordinate keeps a nonoverlapping expansion (Shewchuk's partials), so
/// the represented value is the exact real sum of everything added. The sum
/// is rounded once, when [`ExactVecSum::rounded`] is called. Because the
/// exact value does not depend on grouping, combining sub-sums in any tree
/// shape yields the same rounded result as adding all vectors flat.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactVecSum {
    partials: Vec<SmallVec<[f64; 2]>>,
    count: usize,
}

impl ExactVecSum {
    pub fn new(len: usize) -> Self {
        Self {
            partials: vec![SmallVec::new(); len],
            count: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.partials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.partials.is_empty()
    }

    /// Number of vectors folded in so far (including those inside merged sums).
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn add(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.partials.len() {
            return Err(Error::Shape(format!(
                "exact sum: vector of length {} added to sum of length {}",
                v.len(),
                self.partials.len()
            )));
        }
        for (p, &x) in self.partials.iter_mut().zip(v) {
            grow(p, x);
        }
        self.count += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &ExactVecSum) -> Result<()> {
        if other.partials.len() != self.partials.len() {
            return Err(Error::Shape(format!(
                "exact sum: merging length {} into length {}",
                other.partials.len(),
                self.partials.len()
            )));
        }
        for (p, q) in self.partials.iter_mut().zip(&other.partials) {
            for &x in q {
                grow(p, x);
            }
        }
        self.count += other.count;
        Ok(())
    }

    /// The correctly rounded sum of every added vector.
    pub fn rounded(&self) -> Vec<f64> {
        self.partials.iter().map(|p| round_partials(p)).collect()
    }

    /// Rounded sum divided by the number of vectors.
    pub fn mean(&self) -> Result<Vec<f64>> {
        if self.count == 0 {
            return Err(Error::Precondition("mean of an empty sum".into()));
        }
        let c = self.count as f64;
        Ok(self.rounded().into_iter().map(|s| s / c).collect())
    }
}

fn grow(partials: &mut SmallVec<[f64; 2]>, mut x: f64) {
    let mut i = 0;
    for j in 0..partials.len() {
        let mut y = partials[j];
        if x.abs() < y.abs() {
            std::mem::swap(&mut x, &mut y);
        }
        let hi = x + y;
        let lo = y - (hi - x);
        if lo != 0.0 {
            partials[i] = lo;
            i += 1;
        }
        x = hi;
    }
    partials.truncate(i);
    partials.push(x);
}

// Correct rounding of a nonoverlapping expansion (same tail handling as
// Python's math.fsum).
fn round_partials(p: &[f64]) -> f64 {
    let mut n = p.len();
    if n == 0 {
        return 0.0;
    }
    n -= 1;
    let mut hi = p[n];
    let mut lo = 0.0;
    while n > 0 {
        let x = hi;
        n -= 1;
        let y = p[n];
        hi = x + y;
        let yr = hi - x;
        lo = y - yr;
        if lo != 0.0 {
            break;
        }
    }
    if n > 0 && ((lo < 0.0 && p[n - 1] < 0.0) || (lo > 0.0 && p[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        let yr = x - hi;
        if y == yr {
            hi = x;
        }
    }
    hi
}
