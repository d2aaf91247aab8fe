//! Supervised disentanglement metrics over discretised latent codes.
//!
//! Latent columns are discretised with equal-count (quantile) bins, then
//! compared with discrete factor labels through the plug-in mutual
//! information estimate (natural log, so values are in nats).

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_BINS: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("factor {0} has fewer than two distinct values; entropy undefined")]
    UndefinedEntropy(usize),
    #[error("importance matrix has no positive entry")]
    UndefinedScore,
}

/// Relabels arbitrary labels to `0..k` in order of first appearance.
fn compact(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut map = std::collections::BTreeMap::new();
    let out = labels
        .iter()
        .map(|&l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect();
    (out, map.len())
}

pub fn entropy(labels: &[usize]) -> f64 {
    let (c, k) = compact(labels);
    let mut counts = vec![0usize; k];
    for v in c {
        counts[v] += 1;
    }
    let n = labels.len() as f64;
    counts
        .into_iter()
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Plug-in mutual information of two label sequences.
pub fn discrete_mi(a: &[usize], b: &[usize]) -> Result<f64, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::InvalidInput(format!(
            "length mismatch {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(MetricsError::InvalidInput("empty label sequence".into()));
    }
    let (a, ka) = compact(a);
    let (b, kb) = compact(b);
    let mut joint = vec![0usize; ka * kb];
    let mut ca = vec![0usize; ka];
    let mut cb = vec![0usize; kb];
    for (&x, &y) in a.iter().zip(&b) {
        joint[x * kb + y] += 1;
        ca[x] += 1;
        cb[y] += 1;
    }
    let n = a.len() as f64;
    let mut mi = 0.0;
    for x in 0..ka {
        for y in 0..kb {
            let c = joint[x * kb + y];
            if c == 0 {
                continue;
            }
            let pxy = c as f64 / n;
            mi += pxy * (c as f64 * n / (ca[x] as f64 * cb[y] as f64)).ln();
        }
    }
    Ok(mi.max(0.0))
}

/// Equal-count binning: bin of rank `r` is `floor(r * n_bins / n)`, ranks
/// ordered by value then sample index. Exactly tied values share the bin of
/// the first member of their tie group.
pub fn quantile_bin(values: &[f64], n_bins: usize) -> Vec<usize> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]).then(i.cmp(&j)));
    let mut bins = vec![0; n];
    let mut group_bin = 0;
    for (rank, &i) in order.iter().enumerate() {
        if rank == 0 || values[i] != values[order[rank - 1]] {
            group_bin = rank * n_bins / n;
        }
        bins[i] = group_bin;
    }
    bins
}

fn check_shapes(latents: &ArrayView2<'_, f64>, factors: &ArrayView2<'_, usize>, n_bins: usize) -> Result<(), MetricsError> {
    if latents.nrows() != factors.nrows() {
        return Err(MetricsError::InvalidInput(format!(
            "{} latent rows vs {} factor rows",
            latents.nrows(),
            factors.nrows()
        )));
    }
    if latents.nrows() == 0 || latents.ncols() == 0 || factors.ncols() == 0 {
        return Err(MetricsError::InvalidInput("empty code or factor table".into()));
    }
    if n_bins < 2 {
        return Err(MetricsError::InvalidInput(format!("n_bins = {n_bins}")));
    }
    Ok(())
}

/// `R[j, k] = I(bin(latent j); factor k)`.
pub fn mi_matrix(latents: ArrayView2<'_, f64>, factors: ArrayView2<'_, usize>, n_bins: usize) -> Result<Array2<f64>, MetricsError> {
    check_shapes(&latents, &factors, n_bins)?;
    let binned: Vec<Vec<usize>> = latents
        .columns()
        .into_iter()
        .map(|c| quantile_bin(&c.to_vec(), n_bins))
        .collect();
    let cols: Vec<Vec<usize>> = factors.columns().into_iter().map(|c| c.to_vec()).collect();
    let mut m = Array2::zeros((latents.ncols(), factors.ncols()));
    for (j, b) in binned.iter().enumerate() {
        for (k, f) in cols.iter().enumerate() {
            m[[j, k]] = discrete_mi(b, f)?;
        }
    }
    Ok(m)
}

/// Mutual information gap per factor.
pub fn mig_per_factor(latents: ArrayView2<'_, f64>, factors: ArrayView2<'_, usize>, n_bins: usize) -> Result<Vec<f64>, MetricsError> {
    check_shapes(&latents, &factors, n_bins)?;
    let mut hs = Vec::with_capacity(factors.ncols());
    for (k, col) in factors.columns().into_iter().enumerate() {
        let col = col.to_vec();
        let distinct = compact(&col).1;
        if distinct < 2 {
            return Err(MetricsError::UndefinedEntropy(k));
        }
        hs.push(entropy(&col));
    }
    let mi = mi_matrix(latents, factors, n_bins)?;
    Ok(mi
        .columns()
        .into_iter()
        .zip(hs)
        .map(|(col, h)| {
            let mut v = col.to_vec();
            v.sort_by(|a, b| b.total_cmp(a));
            let second = v.get(1).copied().unwrap_or(0.0);
            ((v[0] - second) / h).clamp(0.0, 1.0)
        })
        .collect())
}

/// Mean over factors of `(I_top - I_second) / H(factor)`.
pub fn mig(latents: ArrayView2<'_, f64>, factors: ArrayView2<'_, usize>, n_bins: usize) -> Result<f64, MetricsError> {
    let per = mig_per_factor(latents, factors, n_bins)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Nonnegative latent x factor importances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMatrix(pub Array2<f64>);

pub fn importance_from_mi(latents: ArrayView2<'_, f64>, factors: ArrayView2<'_, usize>, n_bins: usize) -> Result<ImportanceMatrix, MetricsError> {
    for (k, col) in factors.columns().into_iter().enumerate() {
        if compact(&col.to_vec()).1 < 2 {
            return Err(MetricsError::UndefinedEntropy(k));
        }
    }
    mi_matrix(latents, factors, n_bins).map(ImportanceMatrix)
}

/// Importance-weighted mean of per-latent `1 - H(P_j) / ln(K)`.
pub fn dci_disentanglement(r: &ImportanceMatrix) -> Result<f64, MetricsError> {
    let r = &r.0;
    if r.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(MetricsError::InvalidInput("importances must be finite and nonnegative".into()));
    }
    let total: f64 = r.sum();
    if total <= 0.0 {
        return Err(MetricsError::UndefinedScore);
    }
    let k = r.ncols();
    let log_k = (k as f64).ln();
    let mut score = 0.0;
    for row in r.rows() {
        let s: f64 = row.sum();
        if s <= 0.0 {
            continue;
        }
        let d = if k == 1 {
            1.0
        } else {
            let h: f64 = row
                .iter()
                .filter(|&&v| v > 0.0)
                .map(|&v| {
                    let p = v / s;
                    -p * p.ln()
                })
                .sum();
            1.0 - h / log_k
        };
        score += (s / total) * d;
    }
    Ok(score.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn independent_labels_have_zero_mi() {
        let a = [0, 0, 1, 1];
        let b = [0, 1, 0, 1];
        assert!(discrete_mi(&a, &b).unwrap().abs() < 1e-15);
    }

    #[test]
    fn identical_uniform_labels_have_log_k_mi() {
        let a = [0, 1, 2, 3, 0, 1, 2, 3];
        assert!((discrete_mi(&a, &a).unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn hand_evaluated_two_by_two_joint() {
        // counts [[2,1],[1,2]]
        let a = [0, 0, 0, 1, 1, 1];
        let b = [0, 0, 1, 0, 1, 1];
        let hand = 2.0 * (2.0 / 6.0) * ((2.0 / 6.0) / 0.25f64).ln() + 2.0 * (1.0 / 6.0) * ((1.0 / 6.0) / 0.25f64).ln();
        assert!((discrete_mi(&a, &b).unwrap() - hand).abs() < 1e-14);
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(matches!(discrete_mi(&[0, 1], &[0]), Err(MetricsError::InvalidInput(_))));
    }

    #[test]
    fn quantile_bins_are_equal_count_and_ties_share() {
        let v: Vec<f64> = (0..40).map(|i| ((i * 7) % 40) as f64).collect();
        let b = quantile_bin(&v, 4);
        for bin in 0..4 {
            assert_eq!(b.iter().filter(|&&x| x == bin).count(), 10);
        }
        let constant = quantile_bin(&[1.0; 10], 5);
        assert!(constant.iter().all(|&x| x == 0));
    }

    #[test]
    fn constant_factor_is_undefined() {
        let lat = array![[0.1], [0.2], [0.3]];
        let f = array![[1usize], [1], [1]];
        assert_eq!(mig(lat.view(), f.view(), 2), Err(MetricsError::UndefinedEntropy(0)));
    }

    #[test]
    fn duplicated_latent_has_zero_gap() {
        let n = 100;
        let lat = Array2::from_shape_fn((n, 2), |(i, _)| (i % 5) as f64);
        let f = Array2::from_shape_fn((n, 1), |(i, _)| i % 5);
        assert!(mig(lat.view(), f.view(), 5).unwrap().abs() < 1e-12);
    }

    #[test]
    fn dci_extremes_and_hand_value() {
        let perm = ImportanceMatrix(array![[0.0, 2.0, 0.0], [0.0, 0.0, 1.0], [3.0, 0.0, 0.0]]);
        assert!((dci_disentanglement(&perm).unwrap() - 1.0).abs() < 1e-12);
        let uniform = ImportanceMatrix(Array2::from_elem((4, 3), 0.7));
        assert!(dci_disentanglement(&uniform).unwrap().abs() < 1e-12);
        let r = ImportanceMatrix(array![[0.8, 0.2], [0.2, 0.8]]);
        let h = -(0.8f64 * 0.8f64.ln() + 0.2 * 0.2f64.ln());
        let hand = 1.0 - h / 2f64.ln();
        assert!((dci_disentanglement(&r).unwrap() - hand).abs() < 1e-12);
        assert_eq!(
            dci_disentanglement(&ImportanceMatrix(Array2::zeros((2, 2)))),
            Err(MetricsError::UndefinedScore)
        );
    }

    #[test]
    fn zero_rows_carry_no_weight() {
        let a = ImportanceMatrix(array![[1.0, 0.0], [0.0, 0.0]]);
        assert!((dci_disentanglement(&a).unwrap() - 1.0).abs() < 1e-12);
    }
}
