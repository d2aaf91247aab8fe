use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{
    batch_from_view, loss_gradient, sigmoid, Hyper, KlWeighting, LossBreakdown, LossSpec,
    TrainState, VaeError, VaeParams,
};
use crate::dataset::DatasetView;
use crate::seed::Rng;

const ENCODE_CHUNK: usize = 256;

/// Batch boundaries for one epoch. Batches have at least two samples; a
/// trailing singleton is merged into the previous batch.
fn batch_bounds(n: usize, batch_size: usize) -> Vec<(usize, usize)> {
    let b = batch_size.clamp(2, n.max(2));
    let mut out: Vec<(usize, usize)> = (0..n).step_by(b).map(|s| (s, (s + b).min(n))).collect();
    if out.len() > 1 && out.last().is_some_and(|&(s, e)| e - s < 2) {
        let (_, e) = out.pop().unwrap();
        out.last_mut().unwrap().1 = e;
    }
    out
}

/// One shuffled pass of Adam over `view`. Returns the epoch-mean loss terms.
pub fn train_epoch(
    state: &mut TrainState,
    view: &DatasetView,
    hyper: &Hyper,
    weighting: KlWeighting,
    rng: &mut Rng,
) -> Result<LossBreakdown, VaeError> {
    let n = view.len();
    if n < 2 {
        return Err(VaeError::EstimatorUndefined(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let spec = LossSpec {
        beta: hyper.beta,
        dataset_size: n,
        weighting,
    };
    let mut mean = LossBreakdown::default();
    for (bi, (s, e)) in batch_bounds(n, hyper.batch_size).into_iter().enumerate() {
        let x = batch_from_view(view, &order[s..e]);
        let (grad, loss) = loss_gradient(&state.params, x.view(), &spec, rng)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(VaeError::Diverged { batch: bi });
        }
        state.adam.update(state.params.as_mut_slice(), &grad, hyper.learning_rate);
        mean.scaled_add(&loss, (e - s) as f64 / n as f64);
    }
    if !state.params.is_finite() {
        return Err(VaeError::Diverged { batch: 0 });
    }
    Ok(mean)
}

/// Posterior means of the samples at `positions`.
pub fn encode_means(params: &VaeParams, view: &DatasetView, positions: &[usize]) -> Result<Array2<f64>, VaeError> {
    let l = params.latent_dim();
    let mut out = Array2::zeros((positions.len(), l));
    for (c, chunk) in positions.chunks(ENCODE_CHUNK).enumerate() {
        let x = batch_from_view(view, chunk);
        let (mu, _) = params.encode(x.view())?;
        out.slice_mut(ndarray::s![c * ENCODE_CHUNK..c * ENCODE_CHUNK + chunk.len(), ..])
            .assign(&mu);
    }
    Ok(out)
}

/// Per-dimension mean KL of the posterior to the unit Gaussian prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub kl: Vec<f64>,
}

/// Evenly strided positions, all of them when `budget >= len`.
pub fn strided_positions(len: usize, budget: usize) -> Vec<usize> {
    if budget >= len || budget == 0 {
        return (0..len).collect();
    }
    (0..budget).map(|i| i * len / budget).collect()
}

pub fn latent_stats(params: &VaeParams, view: &DatasetView, sample_budget: usize) -> Result<LatentStats, VaeError> {
    let positions = strided_positions(view.len(), sample_budget);
    let l = params.latent_dim();
    let mut kl = vec![0.0; l];
    for chunk in positions.chunks(ENCODE_CHUNK) {
        let x = batch_from_view(view, chunk);
        let (mu, lv) = params.encode(x.view())?;
        for i in 0..mu.nrows() {
            for k in 0..l {
                let (m, v) = (mu[[i, k]], lv[[i, k]]);
                kl[k] += 0.5 * (m * m + v.exp() - v - 1.0);
            }
        }
    }
    let n = positions.len() as f64;
    Ok(LatentStats {
        kl: kl.into_iter().map(|s| (s / n).max(0.0)).collect(),
    })
}

/// Dimensions whose mean KL is strictly above `threshold`, ascending.
pub fn active_latents(stats: &LatentStats, threshold: f64) -> Vec<usize> {
    stats
        .kl
        .iter()
        .enumerate()
        .filter(|&(_, &v)| v > threshold)
        .map(|(k, _)| k)
        .collect()
}

/// Decoded pixel means while sweeping one latent of the base image's
/// posterior mean over `[mu - span, mu + span]`.
pub fn traverse(
    params: &VaeParams,
    base_image: &[f64],
    latent_index: usize,
    span: f64,
    steps: usize,
) -> Result<Vec<Vec<f64>>, VaeError> {
    if steps < 2 {
        return Err(VaeError::InvalidInput(format!("traversal needs at least 2 steps, got {steps}")));
    }
    if latent_index >= params.latent_dim() {
        return Err(VaeError::InvalidInput(format!(
            "latent {latent_index} out of range for {} latents",
            params.latent_dim()
        )));
    }
    let x = Array2::from_shape_vec((1, base_image.len()), base_image.to_vec())
        .map_err(|e| VaeError::InvalidInput(e.to_string()))?;
    let (mu, _) = params.encode(x.view())?;
    let center = mu[[0, latent_index]];
    let mut z = Array2::zeros((steps, params.latent_dim()));
    for s in 0..steps {
        z.row_mut(s).assign(&mu.row(0));
        let t = 2.0 * s as f64 / (steps - 1) as f64 - 1.0;
        z[[s, latent_index]] = center + span * t;
    }
    let logits = params.decode(z.view())?;
    Ok(logits
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|&v| sigmoid(v)).collect())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, FactorSpec};
    use crate::seed::rng_for;
    use crate::vae::Architecture;
    use std::sync::Arc;

    #[test]
    fn batches_merge_trailing_singleton() {
        assert_eq!(batch_bounds(10, 3), vec![(0, 3), (3, 6), (6, 10)]);
        assert_eq!(batch_bounds(10, 4), vec![(0, 4), (4, 8), (8, 10)]);
        assert_eq!(batch_bounds(5, 1), vec![(0, 2), (2, 5)]);
        assert_eq!(batch_bounds(4, 100), vec![(0, 4)]);
    }

    #[test]
    fn kl_stats_match_closed_form() {
        let arch = Architecture {
            input_dim: 64,
            hidden: vec![3],
            latent_dim: 2,
        };
        let ds = Arc::new(generate(&FactorSpec::new(&[("x", 2)], 8, 8)).unwrap());
        let view = DatasetView::full(ds).subset(&[1]).unwrap();
        let p = VaeParams::init(arch, &mut rng_for(2, &[]));
        let x = batch_from_view(&view, &[0]);
        let (mu, lv) = p.encode(x.view()).unwrap();
        let stats = latent_stats(&p, &view, 1).unwrap();
        for k in 0..2 {
            let (m, s2) = (mu[[0, k]], lv[[0, k]].exp());
            let hand = 0.5 * (m * m + s2 - s2.ln() - 1.0);
            assert!((stats.kl[k] - hand).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_network_has_zero_kl() {
        let ds = Arc::new(generate(&FactorSpec::new(&[("x", 4), ("y", 4)], 8, 8)).unwrap());
        let p = VaeParams::zeros(Architecture::desk(64, 4));
        let stats = latent_stats(&p, &DatasetView::full(ds), 100).unwrap();
        assert_eq!(stats.kl, vec![0.0; 4]);
    }

    #[test]
    fn active_latent_threshold() {
        let flat = LatentStats { kl: vec![0.1; 10] };
        assert!(active_latents(&flat, 0.5).is_empty());
        let mut kl = vec![0.0; 10];
        kl[0] = 2.0;
        kl[1] = 0.3;
        kl[2] = 1.1;
        let s = LatentStats { kl };
        assert_eq!(active_latents(&s, 1.0), vec![0, 2]);
        let loose = active_latents(&s, 0.5);
        assert!(active_latents(&s, 1.0).iter().all(|k| loose.contains(k)));
    }

    #[test]
    fn traversal_validation_and_center() {
        let p = VaeParams::init(Architecture::desk(64, 3), &mut rng_for(4, &[]));
        let img = vec![0.0; 64];
        assert!(traverse(&p, &img, 0, 1.0, 1).is_err());
        assert!(traverse(&p, &img, 3, 1.0, 3).is_err());
        let flat = traverse(&p, &img, 1, 0.0, 2).unwrap();
        assert_eq!(flat[0], flat[1]);
        let strip = traverse(&p, &img, 2, 2.0, 5).unwrap();
        let x = Array2::from_shape_vec((1, 64), img).unwrap();
        let rec = p.reconstruct(x.view()).unwrap();
        assert_eq!(strip[2], rec.row(0).to_vec());
    }
}
