//! Rank-1 approximation of reshaped filters and extraction of filter representatives.
//!
//! A filter with `c` input channels and a `kH x kW` kernel is viewed as a
//! `(kH*kW) x c` matrix whose column `j` is channel `j`'s kernel slice stacked
//! row-major. Its best rank-1 approximation `sigma1 * u1 * v1^T` has every
//! column proportional to `u1`, so the l2-normalized columns all equal `±u1`;
//! the sign-canonical `u1` is the filter's representative.

use serde::Serialize;

use crate::error::{Error, Result};

/// Relative change in the singular-value estimate below which power iteration stops.
pub const SIGMA_TOLERANCE: f64 = 1e-10;
/// Bound on `||G v - lambda v|| / lambda` at convergence, with `G = F^T F`.
pub const EIGEN_RESIDUAL_TOLERANCE: f64 = 1e-10;
pub const MAX_ITERATIONS: usize = 10_000;

/// One convolutional filter: `channels` kernel slices of `height x width`,
/// laid out `[channel][row][col]` (the per-filter slice of a conv weight).
#[derive(Debug, Clone, PartialEq)]
pub struct FilterTensor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FilterTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), height * width * channels, "filter data length does not match its shape");
        Self { height, width, channels, data }
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&x| x == 0.0)
    }

    /// Sum of absolute weights, accumulated in f64.
    pub fn l1_norm(&self) -> f64 {
        self.data.iter().map(|&x| f64::from(x).abs()).sum()
    }
}

/// Dense row-major matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length does not match its shape");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let data = rows.iter().flat_map(|r| {
            assert_eq!(r.len(), cols, "ragged rows");
            r.iter().copied()
        });
        Self::new(rows.len(), cols, data.collect())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    /// `self * x`
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        self.data.chunks_exact(self.cols).map(|row| dot(row, x)).collect()
    }

    /// `self^T * y`
    pub fn tr_mul_vec(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (row, &yr) in self.data.chunks_exact(self.cols).zip(y) {
            for (o, &a) in out.iter_mut().zip(row) {
                *o += a * yr;
            }
        }
        out
    }

    /// `self^T * self`, a `cols x cols` matrix.
    pub fn gram(&self) -> Matrix {
        let k = self.cols;
        let mut g = vec![0.0; k * k];
        for row in self.data.chunks_exact(k) {
            for i in 0..k {
                for j in i..k {
                    g[i * k + j] += row[i] * row[j];
                }
            }
        }
        for i in 0..k {
            for j in 0..i {
                g[i * k + j] = g[j * k + i];
            }
        }
        Matrix::new(k, k, g)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Reshapes a filter into its `(height*width) x channels` matrix.
pub fn filter_to_matrix(filter: &FilterTensor) -> Matrix {
    let area = filter.height * filter.width;
    let mut data = vec![0.0; area * filter.channels];
    for ch in 0..filter.channels {
        for pos in 0..area {
            data[pos * filter.channels + ch] = f64::from(filter.data[ch * area + pos]);
        }
    }
    Matrix::new(area, filter.channels, data)
}

/// Inverse of [`filter_to_matrix`]; values are narrowed to f32.
pub fn matrix_to_filter(matrix: &Matrix, height: usize, width: usize) -> FilterTensor {
    assert_eq!(matrix.rows, height * width, "matrix rows do not match the kernel area");
    let area = matrix.rows;
    let mut data = vec![0.0f32; area * matrix.cols];
    for ch in 0..matrix.cols {
        for pos in 0..area {
            data[ch * area + pos] = matrix.get(pos, ch) as f32;
        }
    }
    FilterTensor::new(height, width, matrix.cols, data)
}

/// Leading singular triplet of a matrix.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rank1Factors {
    pub sigma1: f64,
    /// Unit vector, length = matrix rows.
    pub u1: Vec<f64>,
    /// Unit vector, length = matrix cols.
    pub v1: Vec<f64>,
    pub iterations: usize,
}

impl Rank1Factors {
    pub fn reconstruct(&self) -> Matrix {
        let data = self.u1.iter().flat_map(|&u| self.v1.iter().map(move |&v| self.sigma1 * u * v)).collect();
        Matrix::new(self.u1.len(), self.v1.len(), data)
    }
}

struct PowerOutcome {
    v: Vec<f64>,
    converged: bool,
    iterations: usize,
    last_change: f64,
}

/// Power iteration `v <- normalize(G v)` on a symmetric PSD matrix `G`.
fn power_iterate(gram: &Matrix, mut v: Vec<f64>) -> PowerOutcome {
    let mut prev_sigma = 0.0;
    let mut last_change = f64::INFINITY;
    for it in 1..=MAX_ITERATIONS {
        let w = gram.mul_vec(&v);
        let lambda = dot(&v, &w);
        let sigma = lambda.max(0.0).sqrt();
        let residual = norm(&w.iter().zip(&v).map(|(a, b)| a - lambda * b).collect::<Vec<_>>());
        last_change = if sigma > 0.0 { (sigma - prev_sigma).abs() / sigma } else { 0.0 };
        if last_change < SIGMA_TOLERANCE && residual <= EIGEN_RESIDUAL_TOLERANCE * lambda {
            return PowerOutcome { v, converged: true, iterations: it, last_change };
        }
        let wn = norm(&w);
        if wn == 0.0 {
            // v lies in the null space; nothing more to extract
            return PowerOutcome { v, converged: true, iterations: it, last_change: 0.0 };
        }
        prev_sigma = sigma;
        v = w.into_iter().map(|x| x / wn).collect();
    }
    PowerOutcome { v, converged: false, iterations: MAX_ITERATIONS, last_change }
}

/// Normalized `F^T c` for the column `c` of `F` with the largest l2 norm (ties: lowest index).
fn start_vector(matrix: &Matrix) -> Option<Vec<f64>> {
    let mut best: Option<(usize, f64)> = None;
    for c in 0..matrix.cols {
        let n = norm(&matrix.column(c));
        if best.is_none_or(|(_, b)| n > b) {
            best = Some((c, n));
        }
    }
    let (col, n) = best?;
    if n == 0.0 {
        return None;
    }
    let w = matrix.tr_mul_vec(&matrix.column(col));
    let wn = norm(&w);
    (wn > 0.0).then(|| w.into_iter().map(|x| x / wn).collect())
}

fn subtract_outer(matrix: &Matrix, sigma: f64, u: &[f64], v: &[f64]) -> Matrix {
    let mut data = matrix.data.clone();
    for (r, row) in data.chunks_exact_mut(matrix.cols).enumerate() {
        for (c, x) in row.iter_mut().enumerate() {
            *x -= sigma * u[r] * v[c];
        }
    }
    Matrix::new(matrix.rows, matrix.cols, data)
}

/// Best rank-1 approximation in the Frobenius norm, by power iteration on `F^T F`.
///
/// Power iteration started from a fixed vector can settle on a non-dominant
/// singular pair when the start happens to be orthogonal to the dominant
/// subspace, so after convergence the residual is probed for a larger
/// singular value and the iteration restarts from it if one exists.
pub fn best_rank1(matrix: &Matrix) -> Result<Rank1Factors> {
    if matrix.data.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("matrix has non-finite entries".into()));
    }
    let Some(start) = start_vector(matrix) else {
        return Err(Error::DegenerateFilter);
    };
    let gram = matrix.gram();
    let mut outcome = power_iterate(&gram, start);
    let mut total_iterations = outcome.iterations;
    if !outcome.converged {
        return Err(Error::NoConvergence { iterations: total_iterations, last_change: outcome.last_change });
    }
    loop {
        let fv = matrix.mul_vec(&outcome.v);
        let sigma = norm(&fv);
        let u: Vec<f64> = fv.iter().map(|x| x / sigma).collect();
        let residual = subtract_outer(matrix, sigma, &u, &outcome.v);
        let Some(probe_start) = start_vector(&residual) else {
            break;
        };
        let probe = power_iterate(&residual.gram(), probe_start);
        let probe_sigma = norm(&matrix.mul_vec(&probe.v));
        if probe_sigma <= sigma * (1.0 + 1e-12) {
            break;
        }
        outcome = power_iterate(&gram, probe.v);
        total_iterations += outcome.iterations;
        if !outcome.converged {
            return Err(Error::NoConvergence { iterations: total_iterations, last_change: outcome.last_change });
        }
    }
    let fv = matrix.mul_vec(&outcome.v);
    let sigma1 = norm(&fv);
    let u1 = fv.iter().map(|x| x / sigma1).collect();
    Ok(Rank1Factors { sigma1, u1, v1: outcome.v, iterations: total_iterations })
}

/// Flips `v` so its largest-magnitude entry (lowest index on ties) is non-negative.
pub fn sign_canonical(mut v: Vec<f64>) -> Vec<f64> {
    let mut pivot = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[pivot].abs() {
            pivot = i;
        }
    }
    if v.get(pivot).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    v
}

/// Unit vector of length `height*width` standing in for one filter.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FilterRepresentative {
    pub vector: Vec<f64>,
    pub source_filter_index: usize,
}

/// Sign-canonical first left singular vector of the reshaped filter.
pub fn representative(filter: &FilterTensor, source_filter_index: usize) -> Result<FilterRepresentative> {
    let factors = best_rank1(&filter_to_matrix(filter))?;
    Ok(FilterRepresentative { vector: sign_canonical(factors.u1), source_filter_index })
}

/// Representatives for a whole layer. All-zero filters yield `None`.
pub fn layer_representatives(filters: &[FilterTensor]) -> Result<Vec<Option<FilterRepresentative>>> {
    filters
        .iter()
        .enumerate()
        .map(|(i, f)| match representative(f, i) {
            Ok(r) => Ok(Some(r)),
            Err(Error::DegenerateFilter) => Ok(None),
            Err(e) => Err(e),
        })
        .collect()
}
