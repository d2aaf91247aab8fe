//! Surrogate labels and dataset reduction.
//!
//! The posterior means of each active latent are sorted and differentiated.
//! Large jumps in the (smoothed) derivative separate plateaus of nearly equal
//! codes; the plateaus between jumps are candidate intervals, ranked by how
//! much the bounding jumps dominate the spread inside. Intersecting the chosen
//! interval of every active latent yields a subset in which the learned
//! factors hardly vary.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::DatasetView;
use crate::vae::{encode_means, VaeError, VaeParams};

pub const RATIO_EPS: f64 = 1e-9;
pub const RATIO_CAP: f64 = 1e9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReducerError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("rank {rank} out of range: latent {latent} has {available} intervals")]
    InvalidRank { rank: usize, latent: usize, available: usize },
    #[error(transparent)]
    Vae(#[from] VaeError),
}

/// Posterior means of the active latents for every sample of a view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevTable {
    /// Global sample indices, in view order.
    pub sample_indices: Vec<usize>,
    /// Latent dimension of each column.
    pub latents: Vec<usize>,
    /// `values[c][p]` is the code of latent `latents[c]` for sample `p`.
    pub values: Vec<Vec<f64>>,
}

impl LevTable {
    pub fn len(&self) -> usize {
        self.sample_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_indices.is_empty()
    }

    pub fn num_columns(&self) -> usize {
        self.latents.len()
    }

    /// Samples x columns matrix.
    pub fn to_array(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.len(), self.num_columns()), |(p, c)| self.values[c][p])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    /// Half-open range of positions in the sorted order.
    pub lo_rank: usize,
    pub hi_rank: usize,
    /// Global sample indices in the interval, ascending.
    pub member_indices: Vec<usize>,
    pub ratio: f64,
}

impl Interval {
    pub fn len(&self) -> usize {
        self.hi_rank - self.lo_rank
    }

    pub fn is_empty(&self) -> bool {
        self.hi_rank == self.lo_rank
    }
}

/// Everything computed while searching one column, kept for plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnAnalysis {
    pub sorted_values: Vec<f64>,
    pub sorted_indices: Vec<usize>,
    pub window: usize,
    pub smoothed_derivative: Vec<f64>,
    /// Derivative positions of the interior peaks; a peak at `p` separates
    /// sorted positions `p` and `p + 1`.
    pub peaks: Vec<usize>,
    /// Candidate intervals, best first. Empty when no interior peak exists.
    pub intervals: Vec<Interval>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Candidates {
    Found(Vec<Interval>),
    NoStructure,
}

pub fn smoothing_window(n: usize) -> usize {
    let w = (n / 100).max(1);
    if w.is_multiple_of(2) {
        w + 1
    } else {
        w
    }
}

/// Centered moving average, truncated at the ends.
fn moving_average(d: &[f64], w: usize) -> Vec<f64> {
    let half = w / 2;
    let mut prefix = vec![0.0; d.len() + 1];
    for (i, v) in d.iter().enumerate() {
        prefix[i + 1] = prefix[i] + v;
    }
    (0..d.len())
        .map(|k| {
            let lo = k.saturating_sub(half);
            let hi = (k + half + 1).min(d.len());
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

fn find_peaks(raw: &[f64], s: &[f64], w: usize) -> Vec<usize> {
    let m = s.len();
    let mean = s.iter().sum::<f64>() / m as f64;
    let std = (s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64).sqrt();
    let threshold = mean + std;
    let half = w / 2;
    let mut peaks: Vec<usize> = Vec::new();
    for k in 0..m {
        let rises = k == 0 || s[k] > s[k - 1];
        let holds = k + 1 == m || s[k] >= s[k + 1];
        if !(rises && holds && s[k] > threshold) {
            continue;
        }
        // the average spreads one jump over the whole window; move the peak
        // onto the largest raw step it covers
        let lo = k.saturating_sub(half);
        let hi = (k + half + 1).min(m);
        let mut at = lo;
        for j in lo..hi {
            if raw[j] > raw[at] {
                at = j;
            }
        }
        if peaks.last() != Some(&at) {
            peaks.push(at);
        }
    }
    peaks.sort_unstable();
    peaks.dedup();
    peaks
}

/// Full interval search over one column of codes.
pub fn analyze_column(values: &[f64], sample_indices: &[usize]) -> Result<ColumnAnalysis, ReducerError> {
    let n = values.len();
    if n < 3 {
        return Err(ReducerError::InvalidInput(format!("{n} samples, need at least 3")));
    }
    if sample_indices.len() != n {
        return Err(ReducerError::InvalidInput("index and value lengths differ".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(ReducerError::InvalidInput("non-finite code".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        values[a]
            .total_cmp(&values[b])
            .then(sample_indices[a].cmp(&sample_indices[b]))
    });
    let sorted_values: Vec<f64> = order.iter().map(|&i| values[i]).collect();
    let sorted_indices: Vec<usize> = order.iter().map(|&i| sample_indices[i]).collect();
    let raw: Vec<f64> = sorted_values.windows(2).map(|p| p[1] - p[0]).collect();
    let window = smoothing_window(n);
    let smoothed = moving_average(&raw, window);
    let peaks = find_peaks(&raw, &smoothed, window);

    let mut intervals = Vec::new();
    if !peaks.is_empty() {
        // sentinels: a boundary before position 0 and after position n - 1
        let mut bounds: Vec<(i64, f64)> = vec![(-1, f64::INFINITY)];
        bounds.extend(peaks.iter().map(|&p| (p as i64, smoothed[p])));
        bounds.push(((n - 1) as i64, f64::INFINITY));
        for pair in bounds.windows(2) {
            let ((pa, ha), (pb, hb)) = (pair[0], pair[1]);
            let lo = (pa + 1) as usize;
            let hi = (pb + 1) as usize;
            // derivative positions strictly inside [lo, hi)
            if hi - lo < 2 {
                continue;
            }
            let inner = &smoothed[lo..hi - 1];
            let mean = inner.iter().sum::<f64>() / inner.len() as f64;
            let height = ha.min(hb);
            let ratio = if mean <= RATIO_EPS {
                RATIO_CAP
            } else {
                (height / (mean + RATIO_EPS)).min(RATIO_CAP)
            };
            let mut members = sorted_indices[lo..hi].to_vec();
            members.sort_unstable();
            intervals.push(Interval {
                lo_rank: lo,
                hi_rank: hi,
                member_indices: members,
                ratio,
            });
        }
        intervals.sort_by(|a, b| {
            b.ratio
                .total_cmp(&a.ratio)
                .then(b.len().cmp(&a.len()))
                .then(a.lo_rank.cmp(&b.lo_rank))
        });
    }
    Ok(ColumnAnalysis {
        sorted_values,
        sorted_indices,
        window,
        smoothed_derivative: smoothed,
        peaks,
        intervals,
    })
}

pub fn candidate_intervals(values: &[f64], sample_indices: &[usize]) -> Result<Candidates, ReducerError> {
    let a = analyze_column(values, sample_indices)?;
    Ok(if a.intervals.is_empty() {
        Candidates::NoStructure
    } else {
        Candidates::Found(a.intervals)
    })
}

/// Variance of the codes inside `interval` over the variance of all codes.
pub fn variance_ratio(analysis: &ColumnAnalysis, interval: &Interval) -> f64 {
    fn var(v: &[f64]) -> f64 {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
    }
    let total = var(&analysis.sorted_values);
    if total == 0.0 {
        return 0.0;
    }
    var(&analysis.sorted_values[interval.lo_rank..interval.hi_rank]) / total
}

pub fn encode_dataset(params: &VaeParams, view: &DatasetView, active: &[usize]) -> Result<LevTable, ReducerError> {
    if active.is_empty() {
        return Err(ReducerError::InvalidInput("no active latents".into()));
    }
    if let Some(&bad) = active.iter().find(|&&a| a >= params.latent_dim()) {
        return Err(ReducerError::InvalidInput(format!(
            "latent {bad} out of range for {} latents",
            params.latent_dim()
        )));
    }
    let positions: Vec<usize> = (0..view.len()).collect();
    let mu = encode_means(params, view, &positions)?;
    Ok(LevTable {
        sample_indices: view.indices().to_vec(),
        latents: active.to_vec(),
        values: active.iter().map(|&a| mu.column(a).to_vec()).collect(),
    })
}

/// The codes used as labels; identical to [`encode_dataset`].
pub fn surrogate_label(params: &VaeParams, view: &DatasetView, active: &[usize]) -> Result<LevTable, ReducerError> {
    encode_dataset(params, view, active)
}

/// Per-reduction record for plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionTrace {
    pub rank: usize,
    pub columns: Vec<ColumnAnalysis>,
    /// Interval chosen for each column, if the search got that far.
    pub chosen: Vec<Interval>,
    pub result_size: usize,
}

#[derive(Debug, Clone)]
pub enum Reduction {
    Reduced(DatasetView),
    TooSmall { size: usize },
    NoStructure { latent: usize },
}

/// Picks the `rank`-th interval of every column and intersects them.
pub fn reduce_with_levs(
    view: &DatasetView,
    levs: &LevTable,
    rank: usize,
    size_min: usize,
) -> Result<(Reduction, ReductionTrace), ReducerError> {
    if levs.num_columns() == 0 {
        return Err(ReducerError::InvalidInput("no active latents".into()));
    }
    if levs.sample_indices != view.indices() {
        return Err(ReducerError::InvalidInput("codes do not belong to this view".into()));
    }
    let columns = levs
        .values
        .iter()
        .map(|v| analyze_column(v, &levs.sample_indices))
        .collect::<Result<Vec<_>, _>>()?;
    let mut trace = ReductionTrace {
        rank,
        columns,
        chosen: Vec::new(),
        result_size: 0,
    };
    if let Some(c) = trace.columns.iter().position(|c| c.intervals.is_empty()) {
        return Ok((Reduction::NoStructure { latent: levs.latents[c] }, trace));
    }
    for (c, col) in trace.columns.iter().enumerate() {
        if rank >= col.intervals.len() {
            return Err(ReducerError::InvalidRank {
                rank,
                latent: levs.latents[c],
                available: col.intervals.len(),
            });
        }
    }
    trace.chosen = trace.columns.iter().map(|c| c.intervals[rank].clone()).collect();
    let mut keep: Vec<usize> = trace.chosen[0].member_indices.clone();
    for iv in &trace.chosen[1..] {
        keep.retain(|i| iv.member_indices.binary_search(i).is_ok());
    }
    trace.result_size = keep.len();
    if keep.len() < size_min || keep.is_empty() {
        return Ok((Reduction::TooSmall { size: keep.len() }, trace));
    }
    let out = DatasetView::from_global(view.parent().clone(), keep)
        .map_err(|e| ReducerError::InvalidInput(e.to_string()))?;
    Ok((Reduction::Reduced(out), trace))
}

pub fn reduce(
    view: &DatasetView,
    params: &VaeParams,
    active: &[usize],
    rank: usize,
    size_min: usize,
) -> Result<(Reduction, ReductionTrace), ReducerError> {
    let levs = encode_dataset(params, view, active)?;
    reduce_with_levs(view, &levs, rank, size_min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    use crate::dataset::{generate, FactorSpec};

    fn ids(n: usize) -> Vec<usize> {
        (0..n).collect()
    }

    #[test]
    fn window_is_odd_and_grows() {
        assert_eq!(smoothing_window(9), 1);
        assert_eq!(smoothing_window(250), 3);
        assert_eq!(smoothing_window(400), 5);
        assert_eq!(smoothing_window(1000), 11);
    }

    #[test]
    fn three_step_staircase() {
        let v = [2.0, 0.0, 1.0, 0.0, 2.0, 1.0, 0.0, 1.0, 2.0];
        let a = analyze_column(&v, &ids(9)).unwrap();
        assert_eq!(a.peaks, vec![2, 5]);
        assert_eq!(a.intervals.len(), 3);
        assert!(a.intervals.iter().all(|iv| iv.ratio == RATIO_CAP && iv.len() == 3));
        let lows: Vec<usize> = a.intervals.iter().map(|iv| iv.lo_rank).collect();
        assert_eq!(lows, vec![0, 3, 6]);
        assert_eq!(a.intervals[0].member_indices, vec![1, 3, 6]);
    }

    #[test]
    fn linear_values_have_no_structure() {
        let v: Vec<f64> = (0..50).map(f64::from).collect();
        assert_eq!(candidate_intervals(&v, &ids(50)).unwrap(), Candidates::NoStructure);
    }

    #[test]
    fn too_few_samples_rejected() {
        assert!(candidate_intervals(&[1.0, 2.0], &[0, 1]).is_err());
    }

    #[test]
    fn intervals_are_disjoint_in_rank_space() {
        let v: Vec<f64> = (0..300).map(|i| (i / 37) as f64 + 0.001 * (i % 7) as f64).collect();
        let a = analyze_column(&v, &ids(300)).unwrap();
        let mut spans: Vec<(usize, usize)> = a.intervals.iter().map(|iv| (iv.lo_rank, iv.hi_rank)).collect();
        spans.sort_unstable();
        for w in spans.windows(2) {
            assert!(w[0].1 <= w[1].0);
        }
    }

    #[test]
    fn one_latent_reduce_keeps_the_best_plateau() {
        let ds = Arc::new(generate(&FactorSpec::new(&[("x", 4), ("y", 4)], 16, 16)).unwrap());
        let view = DatasetView::full(ds);
        // codes equal to the x factor
        let levs = LevTable {
            sample_indices: view.indices().to_vec(),
            latents: vec![0],
            values: vec![(0..16).map(|i| (i / 4) as f64).collect()],
        };
        let (r, trace) = reduce_with_levs(&view, &levs, 0, 2).unwrap();
        let Reduction::Reduced(sub) = r else { panic!("{r:?}") };
        assert_eq!(sub.indices(), &[0, 1, 2, 3]);
        assert_eq!(trace.result_size, 4);
        assert!(matches!(
            reduce_with_levs(&view, &levs, 4, 2),
            Err(ReducerError::InvalidRank { available: 4, .. })
        ));
        let (r, _) = reduce_with_levs(&view, &levs, 0, 5).unwrap();
        assert!(matches!(r, Reduction::TooSmall { size: 4 }));
    }

    #[test]
    fn empty_active_set_rejected() {
        let ds = Arc::new(generate(&FactorSpec::new(&[("x", 4), ("y", 4)], 16, 16)).unwrap());
        let view = DatasetView::full(ds);
        let p = VaeParams::zeros(crate::vae::Architecture::desk(view.num_pixels(), 2));
        assert!(encode_dataset(&p, &view, &[]).is_err());
        let t = encode_dataset(&p, &view, &[1, 0]).unwrap();
        assert_eq!((t.len(), t.num_columns()), (16, 2));
        assert_eq!(t, encode_dataset(&p, &view, &[1, 0]).unwrap());
    }
}
