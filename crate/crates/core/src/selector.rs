//! Important-filter selection.
//!
//! The greedy pass pairs every filter with its closest neighbour, walks the
//! pairs from the smallest distance upward and, for each pair `(i, m)` whose
//! anchor `i` has not already been marked redundant, keeps `i` and marks `m`
//! redundant. The number of kept filters falls out of the pass; no pruning
//! ratio is involved. The l1-norm and average-merge methods are the baselines
//! it is compared against.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rank1::{layer_representatives, FilterTensor};
use crate::similarity::{distance_matrix, Metric, SimilarityMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClosestPair {
    pub anchor: usize,
    pub partner: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMethod {
    CosineGreedy,
    ChebyshevGreedy,
    L1Norm,
    Average,
}

impl SelectionMethod {
    fn for_metric(metric: Metric) -> Self {
        match metric {
            Metric::Cosine => SelectionMethod::CosineGreedy,
            Metric::Chebyshev => SelectionMethod::ChebyshevGreedy,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Diagnostics {
    /// l1 norm of every filter, when the filters were available.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub l1_norms: Vec<f64>,
    /// Closest-pair distance per filter; `None` for all-zero filters.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub closest_distances: Vec<Option<f64>>,
    /// All-zero filters, removed before the greedy pass.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub degenerate: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionResult {
    /// Important filters in the order they were chosen.
    pub kept: Vec<usize>,
    /// Ascending.
    pub removed: Vec<usize>,
    pub method: SelectionMethod,
    pub diagnostics: Diagnostics,
}

impl SelectionResult {
    pub fn n(&self) -> usize {
        self.kept.len() + self.removed.len()
    }

    /// Fraction of filters removed.
    pub fn ratio(&self) -> f64 {
        self.removed.len() as f64 / self.n() as f64
    }
}

/// One closest pair per filter, ascending by distance (ties: anchor, then partner).
pub fn closest_pairs(w: &SimilarityMatrix) -> Vec<ClosestPair> {
    let mut pairs: Vec<ClosestPair> = (0..w.n())
        .filter_map(|i| w.closest(i).map(|(partner, distance)| ClosestPair { anchor: i, partner, distance }))
        .collect();
    pairs.sort_by(|a, b| {
        a.distance.total_cmp(&b.distance).then(a.anchor.cmp(&b.anchor)).then(a.partner.cmp(&b.partner))
    });
    pairs
}

/// Pairs `(kept, reddened)` that passed the membership check, in processing order.
fn greedy_pass(w: &SimilarityMatrix) -> (Vec<usize>, Vec<(usize, usize)>) {
    let mut important = Vec::new();
    let mut redundant = BTreeSet::new();
    let mut contributing = Vec::new();
    for pair in closest_pairs(w) {
        if !redundant.contains(&pair.anchor) {
            important.push(pair.anchor);
            redundant.insert(pair.partner);
            contributing.push((pair.anchor, pair.partner));
        }
    }
    (important, contributing)
}

fn partition(n: usize, kept: Vec<usize>, method: SelectionMethod, diagnostics: Diagnostics) -> SelectionResult {
    let kept_set: BTreeSet<usize> = kept.iter().copied().collect();
    let removed = (0..n).filter(|i| !kept_set.contains(i)).collect();
    SelectionResult { kept, removed, method, diagnostics }
}

/// Greedy important-filter identification over a distance matrix.
///
/// An index that is reddened after it was already kept stays kept: the final
/// classification is membership in the kept list.
pub fn greedy_select(w: &SimilarityMatrix) -> Result<SelectionResult> {
    if w.n() < 2 {
        return Err(Error::Argument(format!("greedy selection needs at least 2 filters, got {}", w.n())));
    }
    let (kept, _) = greedy_pass(w);
    let diagnostics = Diagnostics {
        closest_distances: (0..w.n()).map(|i| w.closest(i).map(|(_, d)| d)).collect(),
        ..Diagnostics::default()
    };
    Ok(partition(w.n(), kept, SelectionMethod::for_metric(w.metric()), diagnostics))
}

/// Removes the `floor(ratio * n)` filters with the smallest l1 norm (ties: lower index first).
pub fn l1_select(filters: &[FilterTensor], ratio: f64) -> Result<SelectionResult> {
    let n = filters.len();
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Argument(format!("pruning ratio {ratio} must lie strictly between 0 and 1")));
    }
    if n < 2 {
        return Err(Error::Argument(format!("l1 selection needs at least 2 filters, got {n}")));
    }
    let count = removal_count(ratio, n);
    if count == 0 {
        return Err(Error::Argument(format!("ratio {ratio} removes no filters out of {n}")));
    }
    let norms: Vec<f64> = filters.iter().map(FilterTensor::l1_norm).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[a].total_cmp(&norms[b]).then(a.cmp(&b)));
    let removed: BTreeSet<usize> = order[..count].iter().copied().collect();
    let kept = (0..n).filter(|i| !removed.contains(i)).collect();
    let diagnostics = Diagnostics { l1_norms: norms, ..Diagnostics::default() };
    Ok(partition(n, kept, SelectionMethod::L1Norm, diagnostics))
}

/// `floor(ratio * n)`, tolerant of ratios such as `5.0 / 16.0` computed upstream.
pub fn removal_count(ratio: f64, n: usize) -> usize {
    (ratio * n as f64 + 1e-9).floor() as usize
}

/// Greedy selection on `w`, then each kept filter `i` that reddened a partner `m`
/// is replaced by the element-wise mean of the original `F_i` and `F_m`.
pub fn average_merge(filters: &[FilterTensor], w: &SimilarityMatrix) -> Result<(Vec<FilterTensor>, SelectionResult)> {
    if filters.len() != w.n() {
        return Err(Error::Argument(format!("{} filters but a {}x{} distance matrix", filters.len(), w.n(), w.n())));
    }
    let mut result = greedy_select(w)?;
    result.method = SelectionMethod::Average;
    let (_, contributing) = greedy_pass(w);
    let mut merged = filters.to_vec();
    for (keep, red) in contributing {
        merged[keep] = mean_filter(&filters[keep], &filters[red]);
    }
    Ok((merged, result))
}

fn mean_filter(a: &FilterTensor, b: &FilterTensor) -> FilterTensor {
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| ((f64::from(x) + f64::from(y)) / 2.0) as f32).collect();
    FilterTensor::new(a.height, a.width, a.channels, data)
}

/// Selection for one conv layer straight from its filters.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerSelection {
    pub result: SelectionResult,
    /// Replacement filters (average method only); indexed like the input.
    #[serde(skip)]
    pub merged: Option<Vec<FilterTensor>>,
}

/// Runs `method` over a layer's filters.
///
/// All-zero filters have no representative: they are removed up front and the
/// similarity-based methods run on the rest. If fewer than two filters remain,
/// the nonzero filters (or filter 0 when every filter is zero) are kept.
pub fn select_layer(filters: &[FilterTensor], method: SelectionMethod, ratio: Option<f64>) -> Result<LayerSelection> {
    let n = filters.len();
    let norms: Vec<f64> = filters.iter().map(FilterTensor::l1_norm).collect();
    if method == SelectionMethod::L1Norm {
        let ratio = ratio.ok_or_else(|| Error::Argument("the l1 method requires a pruning ratio".into()))?;
        return Ok(LayerSelection { result: l1_select(filters, ratio)?, merged: None });
    }
    if ratio.is_some() {
        return Err(Error::Argument("similarity-based selection does not take a pruning ratio".into()));
    }
    if n < 2 {
        return Err(Error::Argument(format!("selection needs at least 2 filters, got {n}")));
    }
    let metric = match method {
        SelectionMethod::ChebyshevGreedy => Metric::Chebyshev,
        _ => Metric::Cosine,
    };
    let reps = layer_representatives(filters)?;
    let live: Vec<usize> = (0..n).filter(|&i| reps[i].is_some()).collect();
    let degenerate: Vec<usize> = (0..n).filter(|&i| reps[i].is_none()).collect();
    let mut diagnostics = Diagnostics { l1_norms: norms, degenerate, closest_distances: vec![None; n] };

    if live.len() < 2 {
        let kept = if live.is_empty() { vec![0] } else { live };
        return Ok(LayerSelection { result: partition(n, kept, method, diagnostics), merged: None });
    }

    let live_reps: Vec<_> = live.iter().filter_map(|&i| reps[i].clone()).collect();
    let w = distance_matrix(&live_reps, metric)?;
    for (local, &global) in live.iter().enumerate() {
        diagnostics.closest_distances[global] = w.closest(local).map(|(_, d)| d);
    }
    let (local_kept, contributing) = greedy_pass(&w);
    let kept = local_kept.iter().map(|&l| live[l]).collect();
    let merged = (method == SelectionMethod::Average).then(|| {
        let mut merged = filters.to_vec();
        for (keep, red) in contributing {
            merged[live[keep]] = mean_filter(&filters[live[keep]], &filters[live[red]]);
        }
        merged
    });
    Ok(LayerSelection { result: partition(n, kept, method, diagnostics), merged })
}
