//! Dense row-major `f64` matrices and the handful of linear-algebra kernels the
//! normalization layers need.
//!
//! Activations are stored features-by-samples (`d x n`), so a batch covariance
//! is `X * X^T` and per-feature statistics are row reductions.

use std::fmt;
use std::io::Write;
use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};
use crate::fmt::g17;

/// Counts scalar multiplications performed inside matrix products.
///
/// Elementwise work and additions are not counted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounter {
    matmul_mults: u64,
}

impl OpCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn matmul_mults(&self) -> u64 {
        self.matmul_mults
    }

    pub fn record(&mut self, mults: u64) {
        self.matmul_mults += mults;
    }

    pub fn reset(&mut self) {
        self.matmul_mults = 0;
    }
}

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting empty shapes, length
    /// mismatches and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid(format!("matrix shape must be positive, got {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "data length {} does not match shape {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
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

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in diag.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Convenience constructor for literals; panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    /// `n x 1` column.
    pub fn column(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
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

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column_vec(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.data[r * self.cols + c]).collect()
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|v| v * k)
    }

    pub fn add(&self, other: &Matrix) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Self> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::shape(op, self.shape(), other.shape()));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// In-place `self -= k * other`.
    pub fn sub_scaled_assign(&mut self, k: f64, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape("sub_scaled", self.shape(), other.shape()));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a -= k * b;
        }
        Ok(())
    }

    /// `self - I`; square only.
    pub fn minus_identity(&self) -> Result<Self> {
        if !self.is_square() {
            return Err(Error::shape("minus_identity", self.shape(), self.shape()));
        }
        let mut out = self.clone();
        for i in 0..self.rows {
            out.data[i * self.cols + i] -= 1.0;
        }
        Ok(out)
    }

    /// Per-row arithmetic mean.
    pub fn row_means(&self) -> Vec<f64> {
        let n = self.cols as f64;
        (0..self.rows).map(|r| self.row(r).iter().sum::<f64>() / n).collect()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|r| self.row(r).iter().sum()).collect()
    }

    /// Copies the listed columns, in order, into a new `rows x indices.len()` matrix.
    pub fn select_columns(&self, indices: &[usize]) -> Self {
        let mut out = Self::zeros(self.rows, indices.len());
        for r in 0..self.rows {
            let src = self.row(r);
            let dst = out.row_mut(r);
            for (d, &c) in dst.iter_mut().zip(indices) {
                *d = src[c];
            }
        }
        out
    }

    /// Writes one line per row, comma separated, `%.17g` formatting.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        for r in 0..self.rows {
            let line: Vec<String> = self.row(r).iter().map(|&v| g17(v)).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }

    /// Parses the output of [`Matrix::write_csv`].
    pub fn read_csv(text: &str) -> Result<Self> {
        let mut data = Vec::new();
        let mut rows = 0;
        let mut cols = None;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let vals = line
                .split(',')
                .map(|t| t.trim().parse::<f64>().map_err(|e| Error::Format(format!("{t:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            match cols {
                None => cols = Some(vals.len()),
                Some(c) if c != vals.len() => {
                    return Err(Error::Format(format!("row {rows} has {} columns, expected {c}", vals.len())))
                }
                _ => {}
            }
            data.extend(vals);
            rows += 1;
        }
        Matrix::new(rows, cols.unwrap_or(0), data)
    }

    /// 8-bit binary PGM (`P5`). Entries are mapped linearly from `[-1, 1]` to
    /// `[0, 255]` and clamped; `scale` flips which end is dark.
    pub fn write_pgm<W: Write>(&self, mut w: W, scale: PgmScale) -> Result<()> {
        write!(w, "P5\n{} {}\n255\n", self.cols, self.rows)?;
        let bytes: Vec<u8> = self.data.iter().map(|&v| scale.to_byte(v)).collect();
        w.write_all(&bytes)?;
        Ok(())
    }
}

/// Pixel mapping for [`Matrix::write_pgm`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgmScale {
    /// `v` in `[-1, 1]` maps to `round((v + 1) * 127.5)`.
    Signed,
    /// `|v|` in `[0, 1]` is first mapped to `2|v| - 1`, so zero is black and
    /// `|v| = 1` is white.
    Magnitude,
}

impl PgmScale {
    pub fn to_byte(self, v: f64) -> u8 {
        let v = match self {
            PgmScale::Signed => v,
            PgmScale::Magnitude => 2.0 * v.abs() - 1.0,
        };
        let v = if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) };
        ((v + 1.0) * 127.5).round() as u8
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

#[derive(Clone, Copy)]
enum Layout {
    Normal,
    Transposed,
}

/// Logical shape and strides of `m` read as `m` or `m^T`.
fn view(m: &Matrix, layout: Layout) -> (usize, usize, isize, isize) {
    match layout {
        Layout::Normal => (m.rows, m.cols, m.cols as isize, 1),
        Layout::Transposed => (m.cols, m.rows, 1, m.cols as isize),
    }
}

fn gemm(
    a: &Matrix,
    la: Layout,
    b: &Matrix,
    lb: Layout,
    op: &'static str,
    counter: Option<&mut OpCounter>,
) -> Result<Matrix> {
    let (m, k, rsa, csa) = view(a, la);
    let (k2, n, rsb, csb) = view(b, lb);
    if k != k2 {
        return Err(Error::shape(op, (m, k), (k2, n)));
    }
    let mut out = Matrix::zeros(m, n);
    if m > 0 && n > 0 && k > 0 {
        // SAFETY: strides describe in-bounds views of the backing vectors and
        // `out` is a distinct, correctly sized allocation.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data.as_ptr(),
                rsa,
                csa,
                b.data.as_ptr(),
                rsb,
                csb,
                0.0,
                out.data.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    if let Some(c) = counter {
        c.record((m * k * n) as u64);
    }
    Ok(out)
}

/// `a * b`. Records `a.rows * a.cols * b.cols` multiplications.
pub fn matmul(a: &Matrix, b: &Matrix, counter: Option<&mut OpCounter>) -> Result<Matrix> {
    gemm(a, Layout::Normal, b, Layout::Normal, "matmul", counter)
}

/// `a * b^T` without materialising the transpose.
pub fn matmul_bt(a: &Matrix, b: &Matrix, counter: Option<&mut OpCounter>) -> Result<Matrix> {
    gemm(a, Layout::Normal, b, Layout::Transposed, "matmul_bt", counter)
}

/// `a^T * b` without materialising the transpose.
pub fn matmul_at(a: &Matrix, b: &Matrix, counter: Option<&mut OpCounter>) -> Result<Matrix> {
    gemm(a, Layout::Transposed, b, Layout::Normal, "matmul_at", counter)
}

/// `(1/n) * xs * xs^T` for a `d x n` matrix of already-centred samples.
///
/// The divisor is `n`, not `n - 1`.
pub fn sample_covariance(xs: &Matrix, counter: Option<&mut OpCounter>) -> Result<Matrix> {
    let n = xs.cols() as f64;
    let mut cov = matmul_bt(xs, xs, counter)?;
    for v in cov.as_mut_slice() {
        *v /= n;
    }
    // The product is symmetric up to rounding; mirror the upper triangle so
    // callers see an exactly symmetric matrix.
    let d = cov.rows();
    for i in 0..d {
        for j in (i + 1)..d {
            cov[(j, i)] = cov[(i, j)];
        }
    }
    Ok(cov)
}

/// `0.5 * (a + a^T)`, exactly symmetric.
pub fn symmetrize(a: &Matrix) -> Result<Matrix> {
    if !a.is_square() {
        return Err(Error::shape("symmetrize", a.shape(), a.shape()));
    }
    let n = a.rows();
    Ok(Matrix::from_fn(n, n, |i, j| 0.5 * (a[(i, j)] + a[(j, i)])))
}

pub fn frobenius_norm(a: &Matrix) -> f64 {
    a.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Mean of `|a_ij|` over the off-diagonal entries of a square matrix.
pub fn mean_abs_offdiag(a: &Matrix) -> Result<f64> {
    if !a.is_square() {
        return Err(Error::shape("mean_abs_offdiag", a.shape(), a.shape()));
    }
    let d = a.rows();
    if d < 2 {
        return Err(Error::invalid("mean_abs_offdiag needs d >= 2"));
    }
    let mut sum = 0.0;
    for i in 0..d {
        for j in 0..d {
            if i != j {
                sum += a[(i, j)].abs();
            }
        }
    }
    Ok(sum / (d * (d - 1)) as f64)
}

/// Rescales a covariance to unit diagonal: `D^{-1/2} S D^{-1/2}`.
pub fn correlation_from_covariance(cov: &Matrix) -> Result<Matrix> {
    if !cov.is_square() {
        return Err(Error::shape("correlation", cov.shape(), cov.shape()));
    }
    let d = cov.rows();
    let inv_sd: Vec<f64> = cov
        .diag()
        .iter()
        .map(|&v| if v > 0.0 { 1.0 / v.sqrt() } else { 0.0 })
        .collect();
    let mut out = Matrix::from_fn(d, d, |i, j| cov[(i, j)] * inv_sd[i] * inv_sd[j]);
    for i in 0..d {
        if inv_sd[i] > 0.0 {
            out[(i, i)] = 1.0;
        }
    }
    Ok(out)
}

/// Lower-triangular Cholesky factor `L` with `a = L L^T`.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    if !a.is_square() {
        return Err(Error::shape("cholesky", a.shape(), a.shape()));
    }
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut diag = a[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if !(diag > 0.0) {
            return Err(Error::NotPositiveDefinite { pivot: j, value: diag });
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// `ln det(a)` for symmetric positive-definite `a`, via Cholesky.
pub fn ln_det_spd(a: &Matrix) -> Result<f64> {
    let l = cholesky(a)?;
    Ok(l.diag().iter().map(|v| 2.0 * v.ln()).sum())
}

/// Streaming accumulator for the correlation matrix of `d`-dimensional
/// samples delivered as `d x b` column batches.
#[derive(Debug, Clone)]
pub struct CorrelationAccumulator {
    count: usize,
    sum: Vec<f64>,
    outer: Matrix,
}

impl CorrelationAccumulator {
    pub fn new(d: usize) -> Self {
        Self {
            count: 0,
            sum: vec![0.0; d],
            outer: Matrix::zeros(d, d),
        }
    }

    pub fn push(&mut self, batch: &Matrix) -> Result<()> {
        if batch.rows() != self.sum.len() {
            return Err(Error::shape("correlation_push", batch.shape(), (self.sum.len(), 0)));
        }
        for (s, r) in self.sum.iter_mut().zip(0..batch.rows()) {
            *s += batch.row(r).iter().sum::<f64>();
        }
        let prod = matmul_bt(batch, batch, None)?;
        for (o, p) in self.outer.as_mut_slice().iter_mut().zip(prod.as_slice()) {
            *o += p;
        }
        self.count += batch.cols();
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.sum.len()
    }

    pub fn correlation(&self) -> Result<Matrix> {
        if self.count < 2 {
            return Err(Error::invalid("correlation needs at least two samples"));
        }
        let n = self.count as f64;
        let d = self.sum.len();
        let mean: Vec<f64> = self.sum.iter().map(|s| s / n).collect();
        let cov = Matrix::from_fn(d, d, |i, j| {
            let (a, b) = if i <= j { (i, j) } else { (j, i) };
            self.outer[(a, b)] / n - mean[a] * mean[b]
        });
        correlation_from_covariance(&cov)
    }
}

/// Correlation matrix of the rows of a `d x n` sample matrix.
pub fn row_correlation(x: &Matrix) -> Result<Matrix> {
    let mut acc = CorrelationAccumulator::new(x.rows());
    acc.push(x)?;
    acc.correlation()
}
