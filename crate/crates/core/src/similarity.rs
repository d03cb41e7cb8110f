//! Pairwise distance matrices over filter representatives and closest-pair statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rank1::{dot, FilterRepresentative};

pub const DEFAULT_HISTOGRAM_BINS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Cosine,
    Chebyshev,
}

/// Symmetric `n x n` distance matrix with a zero diagonal.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityMatrix {
    n: usize,
    entries: Vec<f64>,
    metric: Metric,
}

impl SimilarityMatrix {
    /// Builds a matrix from a pairwise function evaluated once per unordered pair.
    pub fn from_fn(n: usize, metric: Metric, mut distance: impl FnMut(usize, usize) -> f64) -> Self {
        let mut entries = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let d = distance(i, j);
                entries[i * n + j] = d;
                entries[j * n + i] = d;
            }
        }
        Self { n, entries, metric }
    }

    /// Wraps an explicit matrix, checking symmetry, zero diagonal and finiteness.
    pub fn from_entries(n: usize, entries: Vec<f64>, metric: Metric) -> Result<Self> {
        if entries.len() != n * n {
            return Err(Error::Argument(format!("{} entries do not form a {n}x{n} matrix", entries.len())));
        }
        for i in 0..n {
            if entries[i * n + i] != 0.0 {
                return Err(Error::Argument(format!("diagonal entry {i} is nonzero")));
            }
            for j in 0..n {
                let d = entries[i * n + j];
                if !d.is_finite() || d < 0.0 {
                    return Err(Error::Argument(format!(
                        "entry ({i}, {j}) = {d} is not a finite non-negative distance"
                    )));
                }
                if d != entries[j * n + i] {
                    return Err(Error::Argument(format!("entries ({i}, {j}) and ({j}, {i}) differ")));
                }
            }
        }
        Ok(Self { n, entries, metric })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.n..(i + 1) * self.n]
    }

    /// Row-major nested copy, convenient for JSON output.
    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.entries.chunks(self.n.max(1)).map(<[f64]>::to_vec).collect()
    }

    /// Matrix with every entry multiplied by `alpha`.
    pub fn scaled(&self, alpha: f64) -> Self {
        Self { n: self.n, entries: self.entries.iter().map(|d| d * alpha).collect(), metric: self.metric }
    }

    /// Restriction to the given indices, in the given order.
    pub fn submatrix(&self, indices: &[usize]) -> Self {
        Self::from_fn(indices.len(), self.metric, |a, b| self.get(indices[a], indices[b]))
    }

    /// `(partner, distance)` minimizing row `i` off the diagonal; ties go to the lowest partner.
    pub fn closest(&self, i: usize) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (j, &d) in self.row(i).iter().enumerate() {
            if j != i && best.is_none_or(|(_, b)| d < b) {
                best = Some((j, d));
            }
        }
        best
    }
}

fn check_dims(reps: &[FilterRepresentative]) -> Result<()> {
    if reps.len() < 2 {
        return Err(Error::Argument(format!("need at least 2 representatives, got {}", reps.len())));
    }
    let dim = reps[0].vector.len();
    if let Some(r) = reps.iter().find(|r| r.vector.len() != dim) {
        return Err(Error::Argument(format!(
            "representative of filter {} has dimension {}, expected {dim}",
            r.source_filter_index,
            r.vector.len()
        )));
    }
    Ok(())
}

/// `W[i][j] = 1 - f_i . f_j`, clamped into `[0, 2]`.
pub fn cosine_distance_matrix(reps: &[FilterRepresentative]) -> Result<SimilarityMatrix> {
    check_dims(reps)?;
    Ok(SimilarityMatrix::from_fn(reps.len(), Metric::Cosine, |i, j| {
        (1.0 - dot(&reps[i].vector, &reps[j].vector)).clamp(0.0, 2.0)
    }))
}

/// `W[i][j] = max_k |f_i[k] - f_j[k]|`
pub fn chebyshev_distance_matrix(reps: &[FilterRepresentative]) -> Result<SimilarityMatrix> {
    check_dims(reps)?;
    Ok(SimilarityMatrix::from_fn(reps.len(), Metric::Chebyshev, |i, j| {
        reps[i].vector.iter().zip(&reps[j].vector).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }))
}

pub fn distance_matrix(reps: &[FilterRepresentative], metric: Metric) -> Result<SimilarityMatrix> {
    match metric {
        Metric::Cosine => cosine_distance_matrix(reps),
        Metric::Chebyshev => chebyshev_distance_matrix(reps),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    /// `bins + 1` equal-width edges over `[0, max distance]`.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClosestPairStats {
    /// Each filter's distance to its closest other filter.
    pub distances: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub histogram: Histogram,
}

pub fn closest_pair_stats(w: &SimilarityMatrix) -> Result<ClosestPairStats> {
    closest_pair_stats_with_bins(w, DEFAULT_HISTOGRAM_BINS)
}

pub fn closest_pair_stats_with_bins(w: &SimilarityMatrix, bins: usize) -> Result<ClosestPairStats> {
    if w.n() < 2 {
        return Err(Error::Argument("closest-pair statistics need at least 2 filters".into()));
    }
    if bins == 0 {
        return Err(Error::Argument("histogram needs at least one bin".into()));
    }
    let distances: Vec<f64> = (0..w.n()).filter_map(|i| w.closest(i).map(|(_, d)| d)).collect();
    let n = distances.len() as f64;
    let mean = distances.iter().sum::<f64>() / n;
    let std = (distances.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt();

    let max = distances.iter().copied().fold(0.0, f64::max);
    let edges = (0..=bins).map(|b| max * b as f64 / bins as f64).collect();
    let mut counts = vec![0; bins];
    for &d in &distances {
        let bin = if max > 0.0 { ((d / max) * bins as f64).floor() as usize } else { 0 };
        counts[bin.min(bins - 1)] += 1;
    }
    Ok(ClosestPairStats { distances, mean, std, histogram: Histogram { edges, counts } })
}
