//! Minibatch-weighted-sampling estimate of the decomposed KL penalty and its
//! analytic gradient.
//!
//! For a batch of `M` samples from a dataset of size `N`, with
//! `l[i][j][k] = log N(z_ik; mu_jk, var_jk)`:
//!
//! ```text
//! log q(z_i|x_i)   = sum_k l[i][i][k]
//! log q(z_i)       ~ logsumexp_j sum_k l[i][j][k] - log(N M)
//! log prod q(z_ik) ~ sum_k (logsumexp_j l[i][j][k] - log(N M))
//! index-code MI    = mean(log q(z|x) - log q(z))
//! total corr.      = mean(log q(z) - log prod q(z_k))
//! dimension-wise   = mean(log prod q(z_k) - log p(z))
//! ```
//!
//! The three terms telescope to `mean(log q(z|x) - log p(z))`.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{
    mlp_backward, mlp_forward, reparameterize_with_noise, sigmoid, softplus, split_head,
    standard_normal, VaeError, VaeParams, LOGVAR_MAX, LOGVAR_MIN, LOG_EPS,
};
use crate::seed::Rng;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlWeighting {
    /// β scales only the total-correlation term.
    #[default]
    TotalCorrelation,
    /// β scales the whole KL penalty (β-VAE).
    WholeKl,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub beta: f64,
    /// Size of the dataset the batch was drawn from.
    pub dataset_size: usize,
    pub weighting: KlWeighting,
}

impl LossSpec {
    pub fn new(beta: f64, dataset_size: usize) -> Self {
        Self {
            beta,
            dataset_size,
            weighting: KlWeighting::TotalCorrelation,
        }
    }

    /// Coefficients on (log q(z|x), log q(z), log prod q(z_k), log p(z)).
    fn coefficients(&self) -> [f64; 4] {
        match self.weighting {
            KlWeighting::TotalCorrelation => [1.0, self.beta - 1.0, 1.0 - self.beta, 1.0],
            KlWeighting::WholeKl => [self.beta, 0.0, 0.0, self.beta],
        }
    }
}

/// Per-sample batch means, in nats.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon_nll: f64,
    pub index_code_mi: f64,
    pub total_correlation: f64,
    pub dim_kl: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.recon_nll, self.index_code_mi, self.total_correlation, self.dim_kl, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn kl_penalty(&self) -> f64 {
        self.index_code_mi + self.total_correlation + self.dim_kl
    }

    pub(crate) fn scaled_add(&mut self, other: &Self, w: f64) {
        self.recon_nll += w * other.recon_nll;
        self.index_code_mi += w * other.index_code_mi;
        self.total_correlation += w * other.total_correlation;
        self.dim_kl += w * other.dim_kl;
        self.total += w * other.total;
    }
}

struct Forward {
    enc_acts: Vec<Array2<f64>>,
    dec_acts: Vec<Array2<f64>>,
    head: Array2<f64>,
    mu: Array2<f64>,
    lv: Array2<f64>,
    z: Array2<f64>,
}

fn forward(params: &VaeParams, x: ArrayView2<'_, f64>, eps: &Array2<f64>) -> Forward {
    let (enc, dec) = params.arch.layers();
    let mut enc_acts = mlp_forward(&params.data, &enc, x);
    let head = enc_acts.pop().unwrap();
    let (mu, lv) = split_head(&head, params.arch.latent_dim);
    let z = reparameterize_with_noise(&mu, &lv, eps);
    let dec_acts = mlp_forward(&params.data, &dec, z.view());
    Forward {
        enc_acts,
        dec_acts,
        head,
        mu,
        lv,
        z,
    }
}

fn logsumexp(vals: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = vals.clone().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + vals.map(|v| (v - m).exp()).sum::<f64>().max(LOG_EPS).ln()
}

/// Pairwise KL-term state shared by the loss and its gradient.
struct KlTerms {
    m: usize,
    l: usize,
    /// softmax_j of sum_k ell, `[i*m + j]`
    w_joint: Vec<f64>,
    /// softmax_j of ell per k, `[(i*m + j)*l + k]`
    w_marg: Vec<f64>,
    lqx: Vec<f64>,
    lqz: Vec<f64>,
    lpz: Vec<f64>,
    lp: Vec<f64>,
}

fn kl_terms(mu: &Array2<f64>, lv: &Array2<f64>, z: &Array2<f64>, n: usize, with_weights: bool) -> KlTerms {
    let (m, l) = mu.dim();
    let log_nm = ((n * m) as f64).ln();
    let inv_var = lv.mapv(|v| (-v).exp());
    let mut ell = vec![0.0; m * m * l];
    for i in 0..m {
        for j in 0..m {
            let base = (i * m + j) * l;
            for k in 0..l {
                let d = z[[i, k]] - mu[[j, k]];
                ell[base + k] = -HALF_LN_2PI - 0.5 * lv[[j, k]] - 0.5 * d * d * inv_var[[j, k]];
            }
        }
    }
    let mut lqx = vec![0.0; m];
    let mut lqz = vec![0.0; m];
    let mut lpz = vec![0.0; m];
    let mut lp = vec![0.0; m];
    let mut w_joint = if with_weights { vec![0.0; m * m] } else { Vec::new() };
    let mut w_marg = if with_weights { vec![0.0; m * m * l] } else { Vec::new() };
    let mut joint = vec![0.0; m];
    for i in 0..m {
        for j in 0..m {
            let base = (i * m + j) * l;
            joint[j] = ell[base..base + l].iter().sum();
        }
        lqx[i] = joint[i];
        let lse = logsumexp(joint.iter().copied());
        lqz[i] = lse - log_nm;
        if with_weights {
            for j in 0..m {
                w_joint[i * m + j] = (joint[j] - lse).exp();
            }
        }
        let mut acc = 0.0;
        for k in 0..l {
            let col = (0..m).map(|j| ell[(i * m + j) * l + k]);
            let lse_k = logsumexp(col);
            acc += lse_k - log_nm;
            if with_weights {
                for j in 0..m {
                    let idx = (i * m + j) * l + k;
                    w_marg[idx] = (ell[idx] - lse_k).exp();
                }
            }
        }
        lpz[i] = acc;
        lp[i] = (0..l).map(|k| -HALF_LN_2PI - 0.5 * z[[i, k]] * z[[i, k]]).sum();
    }
    KlTerms {
        m,
        l,
        w_joint,
        w_marg,
        lqx,
        lqz,
        lpz,
        lp,
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn recon_nll(logits: &Array2<f64>, x: ArrayView2<'_, f64>) -> f64 {
    let m = logits.nrows() as f64;
    let mut s = 0.0;
    ndarray::Zip::from(logits).and(&x).for_each(|&a, &t| {
        s += softplus(a) - t * a;
    });
    s / m
}

fn breakdown(recon: f64, kl: &KlTerms, spec: &LossSpec) -> LossBreakdown {
    let mi = mean(&kl.lqx) - mean(&kl.lqz);
    let tc = mean(&kl.lqz) - mean(&kl.lpz);
    let dim = mean(&kl.lpz) - mean(&kl.lp);
    let total = match spec.weighting {
        KlWeighting::TotalCorrelation => recon + mi + spec.beta * tc + dim,
        KlWeighting::WholeKl => recon + spec.beta * (mi + tc + dim),
    };
    LossBreakdown {
        recon_nll: recon,
        index_code_mi: mi,
        total_correlation: tc,
        dim_kl: dim,
        total,
    }
}

fn check(params: &VaeParams, x: &ArrayView2<'_, f64>, spec: &LossSpec, eps: &Array2<f64>) -> Result<(), VaeError> {
    params.check_batch(x, params.arch.input_dim)?;
    let m = x.nrows();
    if m < 2 {
        return Err(VaeError::EstimatorUndefined(m));
    }
    if spec.dataset_size < m {
        return Err(VaeError::InvalidInput(format!(
            "dataset size {} smaller than batch {m}",
            spec.dataset_size
        )));
    }
    if eps.dim() != (m, params.arch.latent_dim) {
        return Err(VaeError::InvalidInput("noise shape mismatch".into()));
    }
    Ok(())
}

/// Loss on `batch` with reparameterisation noise drawn from `rng`.
pub fn tcvae_loss(params: &VaeParams, batch: ArrayView2<'_, f64>, spec: &LossSpec, rng: &mut Rng) -> Result<LossBreakdown, VaeError> {
    let eps = standard_normal(batch.nrows(), params.arch.latent_dim, rng);
    tcvae_loss_with_noise(params, batch, spec, &eps)
}

pub fn tcvae_loss_with_noise(
    params: &VaeParams,
    batch: ArrayView2<'_, f64>,
    spec: &LossSpec,
    eps: &Array2<f64>,
) -> Result<LossBreakdown, VaeError> {
    check(params, &batch, spec, eps)?;
    let fw = forward(params, batch, eps);
    let logits = fw.dec_acts.last().unwrap();
    let kl = kl_terms(&fw.mu, &fw.lv, &fw.z, spec.dataset_size, false);
    Ok(breakdown(recon_nll(logits, batch), &kl, spec))
}

/// Direct single-sample estimate `mean_i(log q(z_i|x_i) - log p(z_i))` of
/// the KL penalty, evaluated on the same noise.
pub fn direct_kl_estimate(params: &VaeParams, batch: ArrayView2<'_, f64>, eps: &Array2<f64>) -> Result<f64, VaeError> {
    let (mu, lv) = params.encode(batch)?;
    let z = reparameterize_with_noise(&mu, &lv, eps);
    let mut s = 0.0;
    for i in 0..mu.nrows() {
        for k in 0..mu.ncols() {
            let d = z[[i, k]] - mu[[i, k]];
            let lq = -0.5 * lv[[i, k]] - 0.5 * d * d * (-lv[[i, k]]).exp();
            let lp = -0.5 * z[[i, k]] * z[[i, k]];
            s += lq - lp;
        }
    }
    Ok(s / mu.nrows() as f64)
}

pub fn loss_gradient(
    params: &VaeParams,
    batch: ArrayView2<'_, f64>,
    spec: &LossSpec,
    rng: &mut Rng,
) -> Result<(Vec<f64>, LossBreakdown), VaeError> {
    let eps = standard_normal(batch.nrows(), params.arch.latent_dim, rng);
    loss_gradient_with_noise(params, batch, spec, &eps)
}

/// Gradient of `LossBreakdown::total` with respect to the flat parameters.
pub fn loss_gradient_with_noise(
    params: &VaeParams,
    batch: ArrayView2<'_, f64>,
    spec: &LossSpec,
    eps: &Array2<f64>,
) -> Result<(Vec<f64>, LossBreakdown), VaeError> {
    check(params, &batch, spec, eps)?;
    let (enc, dec) = params.arch.layers();
    let fw = forward(params, batch, eps);
    let logits = fw.dec_acts.last().unwrap();
    let kl = kl_terms(&fw.mu, &fw.lv, &fw.z, spec.dataset_size, true);
    let loss = breakdown(recon_nll(logits, batch), &kl, spec);

    let (m, l) = (kl.m, kl.l);
    let g = 1.0 / m as f64;
    let mut grad = vec![0.0; params.data.len()];

    // decoder
    let mut dlogits = logits.mapv(sigmoid);
    dlogits -= &batch;
    dlogits *= g;
    let mut dz = mlp_backward(&params.data, &dec, &fw.dec_acts, dlogits, &mut grad);

    // KL part
    let [ca, cq, cp, cprior] = spec.coefficients();
    let mut dmu = Array2::<f64>::zeros((m, l));
    let mut dlv = Array2::<f64>::zeros((m, l));
    let inv_var = fw.lv.mapv(|v| (-v).exp());
    for i in 0..m {
        for j in 0..m {
            let wj = cq * kl.w_joint[i * m + j];
            for k in 0..l {
                let idx = (i * m + j) * l + k;
                let mut c = wj + cp * kl.w_marg[idx];
                if i == j {
                    c += ca;
                }
                if c == 0.0 {
                    continue;
                }
                let d = fw.z[[i, k]] - fw.mu[[j, k]];
                let s = d * inv_var[[j, k]];
                dz[[i, k]] -= g * c * s;
                dmu[[j, k]] += g * c * s;
                dlv[[j, k]] += g * c * (-0.5 + 0.5 * d * s);
            }
        }
        for k in 0..l {
            dz[[i, k]] += g * cprior * fw.z[[i, k]];
        }
    }

    // through the reparameterisation and the log-variance clamp
    let mut dhead = Array2::<f64>::zeros((m, 2 * l));
    for i in 0..m {
        for k in 0..l {
            dhead[[i, k]] = dmu[[i, k]] + dz[[i, k]];
            let raw = fw.head[[i, l + k]];
            if raw > LOGVAR_MIN && raw < LOGVAR_MAX {
                let dzdlv = 0.5 * (fw.z[[i, k]] - fw.mu[[i, k]]);
                dhead[[i, l + k]] = dlv[[i, k]] + dz[[i, k]] * dzdlv;
            }
        }
    }
    let mut enc_acts = fw.enc_acts;
    enc_acts.push(fw.head);
    mlp_backward(&params.data, &enc, &enc_acts, dhead, &mut grad);
    Ok((grad, loss))
}
