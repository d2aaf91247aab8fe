//! Unsupervised disentanglement ranking (Spearman variant).
//!
//! Models trained with the same hyperparameters are compared pairwise: the
//! similarity matrix holds absolute Spearman correlations between their
//! latent means on a shared evaluation sample, and each pair is scored by
//! how close that matrix is to a (signed) permutation over informative
//! latents.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::DatasetView;
use crate::vae::{encode_means, latent_stats, VaeError, VaeParams};

pub const DEFAULT_KL_MASK_THRESHOLD: f64 = 0.01;
const DENOM_FLOOR: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UdrError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Vae(#[from] VaeError),
}

/// Latent means of one model on the evaluation sample plus its per-latent KL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCodes {
    pub means: Array2<f64>,
    pub kl: Vec<f64>,
}

impl ModelCodes {
    pub fn new(means: Array2<f64>, kl: Vec<f64>) -> Result<Self, UdrError> {
        if means.nrows() < 2 {
            return Err(UdrError::InvalidInput(format!("{} samples", means.nrows())));
        }
        if kl.len() != means.ncols() {
            return Err(UdrError::InvalidInput(format!(
                "kl has {} entries for {} latents",
                kl.len(),
                means.ncols()
            )));
        }
        Ok(Self { means, kl })
    }

    /// Encodes `positions` of `view`; KL statistics come from the same sample.
    pub fn from_model(params: &VaeParams, view: &DatasetView, positions: &[usize]) -> Result<Self, UdrError> {
        let means = encode_means(params, view, positions)?;
        let sub = view
            .subset(positions)
            .map_err(|e| UdrError::InvalidInput(e.to_string()))?;
        let kl = latent_stats(params, &sub, sub.len())?.kl;
        Self::new(means, kl)
    }
}

/// Average ranks (ties share the mean of their positions).
pub(crate) fn ranks(col: ArrayView1<'_, f64>) -> Vec<f64> {
    let n = col.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| col[i].total_cmp(&col[j]));
    let mut out = vec![0.0; n];
    let mut s = 0;
    while s < n {
        let mut e = s + 1;
        while e < n && col[order[e]] == col[order[s]] {
            e += 1;
        }
        let r = (s + e - 1) as f64 / 2.0;
        for &i in &order[s..e] {
            out[i] = r;
        }
        s = e;
    }
    out
}

fn centered_unit(r: Vec<f64>) -> Option<Vec<f64>> {
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    let c: Vec<f64> = r.into_iter().map(|v| v - mean).collect();
    let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
    (norm > 0.0).then(|| c.into_iter().map(|v| v / norm).collect())
}

/// `S[i, j] = |spearman(a_i, b_j)|`, zero for constant columns.
pub fn similarity_matrix(a: &ModelCodes, b: &ModelCodes) -> Result<Array2<f64>, UdrError> {
    if a.means.nrows() != b.means.nrows() {
        return Err(UdrError::InvalidInput(format!(
            "sample counts differ: {} vs {}",
            a.means.nrows(),
            b.means.nrows()
        )));
    }
    let prep = |m: &Array2<f64>| -> Vec<Option<Vec<f64>>> {
        m.columns().into_iter().map(|c| centered_unit(ranks(c))).collect()
    };
    let (ra, rb) = (prep(&a.means), prep(&b.means));
    let mut s = Array2::zeros((ra.len(), rb.len()));
    for (i, x) in ra.iter().enumerate() {
        for (j, y) in rb.iter().enumerate() {
            if let (Some(x), Some(y)) = (x, y) {
                let r: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                s[[i, j]] = r.abs().min(1.0);
            }
        }
    }
    Ok(s)
}

/// Pair score over the informative latents of both models.
pub fn udr_pair(s: &Array2<f64>, kl_a: &[f64], kl_b: &[f64], kl_mask_threshold: f64) -> f64 {
    let ia: Vec<usize> = (0..kl_a.len()).filter(|&i| kl_a[i] > kl_mask_threshold).collect();
    let ib: Vec<usize> = (0..kl_b.len()).filter(|&j| kl_b[j] > kl_mask_threshold).collect();
    if ia.is_empty() || ib.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for &j in &ib {
        let r = ia.iter().map(|&i| s[[i, j]]).fold(0.0, f64::max);
        let sum: f64 = ia.iter().map(|&i| s[[i, j]]).sum();
        total += r * r / sum.max(DENOM_FLOOR);
    }
    for &i in &ia {
        let c = ib.iter().map(|&j| s[[i, j]]).fold(0.0, f64::max);
        let sum: f64 = ib.iter().map(|&j| s[[i, j]]).sum();
        total += c * c / sum.max(DENOM_FLOOR);
    }
    (total / (ia.len() + ib.len()) as f64).clamp(0.0, 1.0)
}

pub(crate) fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberUdr {
    /// Median pair score of each model against the others.
    pub per_model: Vec<f64>,
    /// Maximum over `per_model`.
    pub score: f64,
}

impl MemberUdr {
    pub fn best_model(&self) -> usize {
        let mut best = 0;
        for (i, &s) in self.per_model.iter().enumerate() {
            if s > self.per_model[best] {
                best = i;
            }
        }
        best
    }
}

pub fn udr_member(models: &[ModelCodes], kl_mask_threshold: f64) -> Result<MemberUdr, UdrError> {
    let n = models.len();
    if n < 2 {
        return Err(UdrError::InvalidInput(format!("UDR needs at least 2 models, got {n}")));
    }
    let mut pair = vec![0.0; n * n];
    for a in 0..n {
        for b in a + 1..n {
            let s = similarity_matrix(&models[a], &models[b])?;
            let v = udr_pair(&s, &models[a].kl, &models[b].kl, kl_mask_threshold);
            pair[a * n + b] = v;
            pair[b * n + a] = v;
        }
    }
    let per_model: Vec<f64> = (0..n)
        .map(|a| {
            let mut row: Vec<f64> = (0..n).filter(|&b| b != a).map(|b| pair[a * n + b]).collect();
            median(&mut row)
        })
        .collect();
    let score = per_model.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(MemberUdr { per_model, score })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;
    use crate::vae::standard_normal;

    fn codes(seed: u64, n: usize, l: usize) -> ModelCodes {
        let m = standard_normal(n, l, &mut rng_for(seed, &[]));
        ModelCodes::new(m, vec![1.0; l]).unwrap()
    }

    #[test]
    fn self_similarity_diagonal_is_one() {
        let a = codes(1, 200, 4);
        let s = similarity_matrix(&a, &a).unwrap();
        for i in 0..4 {
            assert!((s[[i, i]] - 1.0).abs() < 1e-12);
        }
        let mut b = a.clone();
        b.means.column_mut(2).mapv_inplace(|v| -v);
        let s = similarity_matrix(&a, &b).unwrap();
        assert!((s[[2, 2]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_column_has_zero_similarity() {
        let a = codes(2, 50, 3);
        let mut b = a.clone();
        b.means.column_mut(0).fill(0.5);
        let s = similarity_matrix(&a, &b).unwrap();
        assert_eq!(s.column(0).sum(), 0.0);
    }

    #[test]
    fn sample_mismatch_rejected() {
        assert!(similarity_matrix(&codes(1, 10, 2), &codes(2, 11, 2)).is_err());
    }

    #[test]
    fn identity_and_uniform_pair_scores() {
        let eye = Array2::eye(10);
        assert!((udr_pair(&eye, &[1.0; 10], &[1.0; 10], 0.01) - 1.0).abs() < 1e-12);
        let c = 0.37;
        let uni = Array2::from_elem((10, 10), c);
        assert!((udr_pair(&uni, &[1.0; 10], &[1.0; 10], 0.01) - c / 10.0).abs() < 1e-12);
    }

    #[test]
    fn uninformative_member_scores_zero() {
        let eye = Array2::eye(3);
        assert_eq!(udr_pair(&eye, &[0.0; 3], &[1.0; 3], 0.01), 0.0);
    }

    #[test]
    fn two_models_share_their_pair_score() {
        let a = codes(3, 100, 3);
        let b = codes(4, 100, 3);
        let r = udr_member(&[a.clone(), b.clone()], 0.01).unwrap();
        let s = similarity_matrix(&a, &b).unwrap();
        let p = udr_pair(&s, &a.kl, &b.kl, 0.01);
        assert_eq!(r.per_model, vec![p, p]);
        assert!(udr_member(&[a], 0.01).is_err());
    }

    #[test]
    fn identical_models_score_one() {
        // columns are monotone in disjoint digits of the index, so their
        // rank correlations are exactly zero
        let n = 16;
        let m = Array2::from_shape_fn((n, 2), |(i, j)| if j == 0 { (i % 4) as f64 } else { (i / 4) as f64 });
        let a = ModelCodes::new(m, vec![1.0; 2]).unwrap();
        let r = udr_member(&vec![a; 5], 0.01).unwrap();
        assert!(r.per_model.iter().all(|&v| (v - 1.0).abs() < 1e-12), "{:?}", r.per_model);
        assert!((r.score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn average_ranks_for_ties() {
        let v = ndarray::array![3.0, 1.0, 3.0, 2.0];
        assert_eq!(ranks(v.view()), vec![2.5, 0.0, 2.5, 1.0]);
    }
}
