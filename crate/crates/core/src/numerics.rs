//! Dense `f64` tensors and the handful of kernels the rest of the crate needs.
//!
//! Storage is flat and row-major with no strides. Matrix kernels operate on
//! rank-2 tensors; a rank-1 tensor of length `n` is read as a `1 x n` row.

use std::cell::Cell;
use std::fmt;

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && !shape.contains(&0),
            "tensor dimensions must be positive, got {shape:?}"
        );
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Format {
                what: "matrix rows",
                detail: "rows have different lengths".into(),
            });
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|x| x * s)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// In-place `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        if self.data.len() != other.data.len() {
            return Err(Error::shape("axpy", &self.shape, &other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Tensor> {
        let c = self.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= self.rows() {
                return Err(Error::Index {
                    index: r,
                    len: self.rows(),
                });
            }
            data.extend_from_slice(self.row(r));
        }
        Tensor::new(vec![rows.len(), c], data)
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        if start + len > self.rows() {
            return Err(Error::Index {
                index: start + len,
                len: self.rows(),
            });
        }
        let c = self.cols();
        Tensor::new(vec![len, c], self.data[start * c..(start + len) * c].to_vec())
    }

    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let c = parts.first().map_or(0, |t| t.cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols() != c {
                return Err(Error::shape("concat_rows", &parts[0].shape, &p.shape));
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Tensor::new(vec![rows, c], data)
    }

    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        let r = parts.first().map_or(0, |t| t.rows());
        if let Some(p) = parts.iter().find(|p| p.rows() != r) {
            return Err(Error::shape("concat_cols", &parts[0].shape, &p.shape));
        }
        let total: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Tensor::new(vec![r, total], data)
    }
}

/// Row-major boolean grid; `true` marks an allowed (query, key) pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    cells: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, fill: bool) -> Self {
        Self {
            rows,
            cols,
            cells: vec![fill; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut cells = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                cells.push(f(r, c));
            }
        }
        Self { rows, cols, cells }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.cells[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.cells[r * self.cols + c] = v;
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&b| b).count()
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.cells[r * self.cols..(r + 1) * self.cols]
    }
}

/// Which part of a forward pass a matrix product belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MatmulKind {
    Embed,
    Projection,
    Score,
    Value,
    FeedForward,
    Head,
}

impl MatmulKind {
    pub const ALL: [MatmulKind; 6] = [
        MatmulKind::Embed,
        MatmulKind::Projection,
        MatmulKind::Score,
        MatmulKind::Value,
        MatmulKind::FeedForward,
        MatmulKind::Head,
    ];

    fn slot(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            MatmulKind::Embed => "embed",
            MatmulKind::Projection => "projection",
            MatmulKind::Score => "score",
            MatmulKind::Value => "value",
            MatmulKind::FeedForward => "ffn",
            MatmulKind::Head => "head",
        }
    }
}

/// FLOP totals per [`MatmulKind`], multiply-add counted as two FLOPs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopBreakdown {
    pub by_kind: [u64; 6],
}

impl FlopBreakdown {
    pub fn get(&self, kind: MatmulKind) -> u64 {
        self.by_kind[kind.slot()]
    }

    pub fn add(&mut self, kind: MatmulKind, flops: u64) {
        self.by_kind[kind.slot()] += flops;
    }

    pub fn total(&self) -> u64 {
        self.by_kind.iter().sum()
    }

    /// Score plus value products: the attention-matrix work.
    pub fn attention(&self) -> u64 {
        self.get(MatmulKind::Score) + self.get(MatmulKind::Value)
    }

    pub fn merge(&mut self, other: &FlopBreakdown) {
        for (a, b) in self.by_kind.iter_mut().zip(other.by_kind) {
            *a += b;
        }
    }
}

/// Per-evaluation FLOP accumulator. Not shared across threads; each
/// evaluation context owns one.
#[derive(Debug, Default)]
pub struct FlopCounter {
    counts: [Cell<u64>; 6],
}

impl FlopCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, kind: MatmulKind, flops: u64) {
        let c = &self.counts[kind.slot()];
        c.set(c.get() + flops);
    }

    pub fn snapshot(&self) -> FlopBreakdown {
        let mut b = FlopBreakdown::default();
        for kind in MatmulKind::ALL {
            b.add(kind, self.counts[kind.slot()].get());
        }
        b
    }

    pub fn reset(&self) {
        for c in &self.counts {
            c.set(0);
        }
    }

    /// `a x b`, recorded as `2*M*K*N` FLOPs under `kind`.
    pub fn matmul(&self, kind: MatmulKind, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let out = matmul(a, b)?;
        self.record(kind, 2 * (a.rows() * a.cols() * b.cols()) as u64);
        Ok(out)
    }

    /// `a x bᵀ`, recorded as `2*M*K*N` FLOPs under `kind`.
    pub fn matmul_bt(&self, kind: MatmulKind, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let out = matmul_bt(a, b)?;
        self.record(kind, 2 * (a.rows() * a.cols() * b.rows()) as u64);
        Ok(out)
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a x bᵀ` without materializing the transpose.
pub fn matmul_bt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = (a.rows(), a.cols());
    let (n, k2) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::shape("matmul_bt", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Row-wise softmax restricted to `allowed` entries.
///
/// Masked entries come out as exactly `0.0`. A row with no allowed entry is
/// all zeros.
pub fn softmax_rows(a: &Tensor, allowed: &Mask) -> Result<Tensor> {
    if a.rows() != allowed.rows() || a.cols() != allowed.cols() {
        return Err(Error::shape(
            "softmax_rows",
            a.shape(),
            &[allowed.rows(), allowed.cols()],
        ));
    }
    let mut out = Tensor::zeros(&[a.rows(), a.cols()]);
    for r in 0..a.rows() {
        let row = a.row(r);
        let mask = allowed.row(r);
        let max = row
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .fold(f64::NEG_INFINITY, |m, (&x, _)| m.max(x));
        if max == f64::NEG_INFINITY {
            continue;
        }
        let orow = out.row_mut(r);
        let mut total = 0.0;
        for ((o, &x), &m) in orow.iter_mut().zip(row).zip(mask) {
            if m {
                *o = (x - max).exp();
                total += *o;
            }
        }
        for o in orow.iter_mut() {
            *o /= total;
        }
    }
    Ok(out)
}

/// Unmasked row-wise softmax.
pub fn softmax_rows_dense(a: &Tensor) -> Tensor {
    let mut out = a.clone();
    for r in 0..a.rows() {
        let row = out.row_mut(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let mut total = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        for x in row.iter_mut() {
            *x /= total;
        }
    }
    out
}

/// Seeded generator backed by ChaCha8, whose output stream is fixed across
/// platforms for a given seed.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.gen::<u64>()
    }

    /// Standard normal draw via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn rand_normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let mut t = Tensor::zeros(shape);
        for x in t.data_mut() {
            *x = std * self.normal();
        }
        t
    }

    /// Uniform integer in the closed range `[lo, hi]`.
    pub fn uniform_int(&mut self, lo: i64, hi: i64) -> i64 {
        assert!(lo <= hi, "empty range [{lo}, {hi}]");
        self.inner.gen_range(lo..=hi)
    }

    /// Uniform index in `[0, n)`.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }

    /// Independent child generator seeded from this stream.
    pub fn fork(&mut self) -> Rng {
        Rng::new(self.next_u64())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&Tensor::eye(2), &a).unwrap(), a);
        let z = matmul(&Tensor::eye(2), &m(&[&[0.0], &[0.0]])).unwrap();
        assert_eq!(z, m(&[&[0.0], &[0.0]]));
    }

    #[test]
    fn matmul_hand_dot_products() {
        let out = matmul(&m(&[&[1.0, 2.0], &[3.0, 4.0]]), &m(&[&[5.0], &[6.0]])).unwrap();
        assert_eq!(out, m(&[&[17.0], &[39.0]]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn counter_records_two_flops_per_mac() {
        let c = FlopCounter::new();
        c.matmul(MatmulKind::Projection, &Tensor::zeros(&[3, 4]), &Tensor::zeros(&[4, 5]))
            .unwrap();
        c.matmul_bt(MatmulKind::Score, &Tensor::zeros(&[3, 4]), &Tensor::zeros(&[7, 4]))
            .unwrap();
        let s = c.snapshot();
        assert_eq!(s.get(MatmulKind::Projection), 120);
        assert_eq!(s.get(MatmulKind::Score), 168);
        assert_eq!(s.total(), 288);
    }

    #[test]
    fn softmax_examples() {
        let all = Mask::new(1, 2, true);
        let p = softmax_rows(&m(&[&[0.0, 0.0]]), &all).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);

        let mut first = Mask::new(1, 2, false);
        first.set(0, 0, true);
        let p = softmax_rows(&m(&[&[-3.0, 40.0]]), &first).unwrap();
        assert_eq!(p.data(), &[1.0, 0.0]);

        let p = softmax_rows(&m(&[&[1f64.ln(), 3f64.ln()]]), &all).unwrap();
        assert!((p.get(0, 0) - 0.25).abs() < 1e-15);
        assert!((p.get(0, 1) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_empty_row_is_zero() {
        let p = softmax_rows(&m(&[&[1.0, 2.0]]), &Mask::new(1, 2, false)).unwrap();
        assert_eq!(p.data(), &[0.0, 0.0]);
    }

    #[test]
    fn rng_is_reproducible() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        let a1 = a.rand_normal(&[3, 3], 1.0);
        let a2 = a.rand_normal(&[3, 3], 1.0);
        assert_ne!(a1, a2);
        assert_eq!(a1, b.rand_normal(&[3, 3], 1.0));
        assert_eq!(a2, b.rand_normal(&[3, 3], 1.0));
        assert_eq!(a.uniform_int(5, 5), 5);
    }

    #[test]
    fn normal_draws_have_zero_mean() {
        let mut rng = Rng::new(7);
        let n = 100_000;
        let mean = (0..n).map(|_| rng.normal()).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn tensor_rejects_inconsistent_shape() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }
}
