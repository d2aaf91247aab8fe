//! β-TCVAE with a diagonal-Gaussian encoder and a Bernoulli decoder.
//!
//! Both networks are fully connected ReLU MLPs; the decoder mirrors the
//! encoder's hidden widths. Parameters live in one flat buffer so gradients,
//! Adam moments and checkpoints share a single layout.

mod adam;
pub mod checkpoint;
mod loss;
mod train;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::DatasetView;
use crate::seed::Rng;

pub use adam::{AdamState, TrainState};
pub use loss::{
    direct_kl_estimate, loss_gradient, loss_gradient_with_noise, tcvae_loss,
    tcvae_loss_with_noise, KlWeighting, LossBreakdown, LossSpec,
};
pub use train::{
    active_latents, encode_means, latent_stats, strided_positions, train_epoch, traverse,
    LatentStats,
};

pub const LOGVAR_MIN: f64 = -20.0;
pub const LOGVAR_MAX: f64 = 20.0;
/// Floor applied inside logarithms.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VaeError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("minibatch estimator needs at least 2 samples, got {0}")]
    EstimatorUndefined(usize),
    #[error("training diverged at batch {batch}")]
    Diverged { batch: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    /// Encoder hidden widths; the decoder uses them in reverse.
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
}

impl Architecture {
    /// `input -> 256 -> 128 -> 2*latent` encoder with a mirrored decoder.
    pub fn desk(input_dim: usize, latent_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: vec![256, 128],
            latent_dim,
        }
    }

    pub(crate) fn layers(&self) -> (Vec<LayerShape>, Vec<LayerShape>) {
        let mut offset = 0;
        let mut build = |dims: Vec<usize>| {
            dims.windows(2)
                .map(|w| {
                    let l = LayerShape {
                        inp: w[0],
                        out: w[1],
                        offset,
                    };
                    offset += w[0] * w[1] + w[1];
                    l
                })
                .collect::<Vec<_>>()
        };
        let mut enc_dims = vec![self.input_dim];
        enc_dims.extend(&self.hidden);
        enc_dims.push(2 * self.latent_dim);
        let mut dec_dims = vec![self.latent_dim];
        dec_dims.extend(self.hidden.iter().rev());
        dec_dims.push(self.input_dim);
        let enc = build(enc_dims);
        let dec = build(dec_dims);
        (enc, dec)
    }

    pub fn num_params(&self) -> usize {
        let (enc, dec) = self.layers();
        enc.iter().chain(&dec).map(|l| l.inp * l.out + l.out).sum()
    }

    pub fn validate(&self) -> Result<(), VaeError> {
        if self.input_dim == 0 || self.latent_dim == 0 || self.hidden.contains(&0) {
            return Err(VaeError::InvalidInput(format!(
                "degenerate architecture {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LayerShape {
    pub inp: usize,
    pub out: usize,
    pub offset: usize,
}

impl LayerShape {
    fn weight<'a>(&self, data: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.inp, self.out), &data[self.offset..self.offset + self.inp * self.out])
            .expect("layer layout")
    }

    fn bias<'a>(&self, data: &'a [f64]) -> &'a [f64] {
        let o = self.offset + self.inp * self.out;
        &data[o..o + self.out]
    }
}

/// Trainable optimisation hyperparameters of one member.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta: f64,
}

impl Hyper {
    pub fn validate(&self, n: usize) -> Result<(), VaeError> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(VaeError::InvalidInput(format!("learning rate {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.batch_size > n.max(1) {
            return Err(VaeError::InvalidInput(format!(
                "batch size {} outside [1, {n}]",
                self.batch_size
            )));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(VaeError::InvalidInput(format!("beta {}", self.beta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeParams {
    arch: Architecture,
    data: Vec<f64>,
}

impl VaeParams {
    pub fn zeros(arch: Architecture) -> Self {
        let n = arch.num_params();
        Self {
            arch,
            data: vec![0.0; n],
        }
    }

    /// Uniform fan-in initialisation: weights in `±1/sqrt(fan_in)`, zero biases.
    pub fn init(arch: Architecture, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(arch);
        let (enc, dec) = p.arch.layers();
        for l in enc.iter().chain(&dec) {
            let bound = 1.0 / (l.inp as f64).sqrt();
            for w in &mut p.data[l.offset..l.offset + l.inp * l.out] {
                *w = rng.random_range(-bound..bound);
            }
        }
        p
    }

    pub fn from_flat(arch: Architecture, data: Vec<f64>) -> Result<Self, VaeError> {
        arch.validate()?;
        if data.len() != arch.num_params() {
            return Err(VaeError::InvalidInput(format!(
                "expected {} parameters, got {}",
                arch.num_params(),
                data.len()
            )));
        }
        Ok(Self { arch, data })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_batch(&self, batch: &ArrayView2<'_, f64>, width: usize) -> Result<(), VaeError> {
        if batch.nrows() == 0 {
            return Err(VaeError::InvalidInput("empty batch".into()));
        }
        if batch.ncols() != width {
            return Err(VaeError::InvalidInput(format!(
                "batch has {} columns, expected {width}",
                batch.ncols()
            )));
        }
        Ok(())
    }

    /// Posterior means and clamped log-variances.
    pub fn encode(&self, batch: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array2<f64>), VaeError> {
        self.check_batch(&batch, self.arch.input_dim)?;
        let (enc, _) = self.arch.layers();
        let acts = mlp_forward(&self.data, &enc, batch);
        Ok(split_head(acts.last().unwrap(), self.arch.latent_dim))
    }

    /// Bernoulli logits for each row of `z`.
    pub fn decode(&self, z: ArrayView2<'_, f64>) -> Result<Array2<f64>, VaeError> {
        self.check_batch(&z, self.arch.latent_dim)?;
        let (_, dec) = self.arch.layers();
        let mut acts = mlp_forward(&self.data, &dec, z);
        Ok(acts.pop().unwrap())
    }

    /// Decoded pixel means (sigmoid of the logits) of the posterior mean.
    pub fn reconstruct(&self, batch: ArrayView2<'_, f64>) -> Result<Array2<f64>, VaeError> {
        let (mu, _) = self.encode(batch)?;
        Ok(self.decode(mu.view())?.mapv(sigmoid))
    }
}

/// `z = mu + exp(log_var / 2) * eps`, with `z = mu` at the lower clamp.
pub fn reparameterize(mu: &Array2<f64>, log_var: &Array2<f64>, rng: &mut Rng) -> Array2<f64> {
    let eps = standard_normal(mu.nrows(), mu.ncols(), rng);
    reparameterize_with_noise(mu, log_var, &eps)
}

pub fn reparameterize_with_noise(mu: &Array2<f64>, log_var: &Array2<f64>, eps: &Array2<f64>) -> Array2<f64> {
    let mut z = mu.clone();
    ndarray::Zip::from(&mut z)
        .and(log_var)
        .and(eps)
        .for_each(|z, &lv, &e| {
            let lv = lv.clamp(LOGVAR_MIN, LOGVAR_MAX);
            if lv > LOGVAR_MIN {
                *z += (0.5 * lv).exp() * e;
            }
        });
    z
}

/// Row-major standard normal draws.
pub fn standard_normal(rows: usize, cols: usize, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// Converts view samples at `positions` into a dense `[0,1]` batch.
pub fn batch_from_view(view: &DatasetView, positions: &[usize]) -> Array2<f64> {
    let p = view.num_pixels();
    let mut out = Array2::zeros((positions.len(), p));
    for (row, &pos) in out.rows_mut().into_iter().zip(positions) {
        for (o, &b) in row.into_iter().zip(view.image(pos)) {
            *o = f64::from(b);
        }
    }
    out
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Activations of every layer, input first. Hidden layers use ReLU; the last
/// layer is linear.
pub(crate) fn mlp_forward(data: &[f64], layers: &[LayerShape], input: ArrayView2<'_, f64>) -> Vec<Array2<f64>> {
    let mut acts = Vec::with_capacity(layers.len() + 1);
    acts.push(input.to_owned());
    for (li, l) in layers.iter().enumerate() {
        let mut h = acts[li].dot(&l.weight(data));
        h += &ndarray::ArrayView1::from(l.bias(data));
        if li + 1 < layers.len() {
            h.mapv_inplace(|v| v.max(0.0));
        }
        acts.push(h);
    }
    acts
}

/// Accumulates parameter gradients into `grad` and returns the gradient with
/// respect to the network input.
pub(crate) fn mlp_backward(
    data: &[f64],
    layers: &[LayerShape],
    acts: &[Array2<f64>],
    dout: Array2<f64>,
    grad: &mut [f64],
) -> Array2<f64> {
    let mut delta = dout;
    for (li, l) in layers.iter().enumerate().rev() {
        if li + 1 < layers.len() {
            ndarray::Zip::from(&mut delta)
                .and(&acts[li + 1])
                .for_each(|d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
        }
        let dw = acts[li].t().dot(&delta);
        let wlen = l.inp * l.out;
        for (g, v) in grad[l.offset..l.offset + wlen].iter_mut().zip(dw.iter()) {
            *g += v;
        }
        let db = delta.sum_axis(Axis(0));
        for (g, v) in grad[l.offset + wlen..l.offset + wlen + l.out].iter_mut().zip(db.iter()) {
            *g += v;
        }
        delta = delta.dot(&l.weight(data).t());
    }
    delta
}

pub(crate) fn split_head(head: &Array2<f64>, latent: usize) -> (Array2<f64>, Array2<f64>) {
    let mu = head.slice(s![.., ..latent]).to_owned();
    let lv = head
        .slice(s![.., latent..])
        .mapv(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX));
    (mu, lv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;
    use ndarray::array;

    fn toy_arch() -> Architecture {
        Architecture {
            input_dim: 4,
            hidden: vec![6],
            latent_dim: 2,
        }
    }

    /// Independent forward pass over nested Vecs.
    fn naive_layer(x: &[f64], w: &[f64], b: &[f64], out: usize, relu: bool) -> Vec<f64> {
        (0..out)
            .map(|o| {
                let mut s = b[o];
                for (i, xi) in x.iter().enumerate() {
                    s += xi * w[i * out + o];
                }
                if relu {
                    s.max(0.0)
                } else {
                    s
                }
            })
            .collect()
    }

    #[test]
    fn zero_network_encodes_to_prior() {
        let p = VaeParams::zeros(toy_arch());
        let (mu, lv) = p.encode(Array2::zeros((1, 4)).view()).unwrap();
        assert!(mu.iter().chain(lv.iter()).all(|&v| v == 0.0));
        let logits = p.decode(Array2::zeros((1, 2)).view()).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_rows_encode_identically() {
        let mut rng = rng_for(3, &[]);
        let p = VaeParams::init(toy_arch(), &mut rng);
        let x = array![[1.0, 0.0, 1.0, 1.0], [1.0, 0.0, 1.0, 1.0]];
        let (mu, lv) = p.encode(x.view()).unwrap();
        assert_eq!(mu.row(0), mu.row(1));
        assert_eq!(lv.row(0), lv.row(1));
        let z = array![[0.3, -1.0], [0.3, -1.0]];
        let d = p.decode(z.view()).unwrap();
        assert_eq!(d.row(0), d.row(1));
    }

    #[test]
    fn forward_matches_naive_reimplementation() {
        let mut rng = rng_for(11, &[]);
        let p = VaeParams::init(toy_arch(), &mut rng);
        let data = p.as_slice();
        let x = [1.0, 0.0, 0.5, 1.0];
        // encoder: 4 -> 6 -> 4
        let (w0, rest) = data.split_at(24);
        let (b0, rest) = rest.split_at(6);
        let (w1, rest) = rest.split_at(24);
        let (b1, rest) = rest.split_at(4);
        let h = naive_layer(&x, w0, b0, 6, true);
        let head = naive_layer(&h, w1, b1, 4, false);
        let (mu, lv) = p.encode(Array2::from_shape_vec((1, 4), x.to_vec()).unwrap().view()).unwrap();
        for k in 0..2 {
            assert!((mu[[0, k]] - head[k]).abs() < 1e-14);
            assert!((lv[[0, k]] - head[2 + k]).abs() < 1e-14);
        }
        // decoder: 2 -> 6 -> 4
        let (w2, rest) = rest.split_at(12);
        let (b2, rest) = rest.split_at(6);
        let (w3, b3) = rest.split_at(24);
        let z = [0.7, -0.2];
        let h = naive_layer(&z, w2, b2, 6, true);
        let out = naive_layer(&h, w3, b3, 4, false);
        let logits = p.decode(Array2::from_shape_vec((1, 2), z.to_vec()).unwrap().view()).unwrap();
        for k in 0..4 {
            assert!((logits[[0, k]] - out[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn shape_mismatch_is_invalid_input() {
        let p = VaeParams::zeros(toy_arch());
        assert!(matches!(p.encode(Array2::zeros((2, 3)).view()), Err(VaeError::InvalidInput(_))));
        assert!(matches!(p.decode(Array2::zeros((0, 2)).view()), Err(VaeError::InvalidInput(_))));
    }

    #[test]
    fn reparameterize_collapses_at_lower_clamp() {
        let mut rng = rng_for(1, &[]);
        let mu = array![[0.5, -2.0]];
        let lv = array![[-25.0, -20.0]];
        assert_eq!(reparameterize(&mu, &lv, &mut rng), mu);
    }

    #[test]
    fn reparameterize_is_seeded() {
        let mu = Array2::zeros((3, 4));
        let lv = Array2::zeros((3, 4));
        let a = reparameterize(&mu, &lv, &mut rng_for(9, &[]));
        let b = reparameterize(&mu, &lv, &mut rng_for(9, &[]));
        assert_eq!(a, b);
    }

    #[test]
    fn reparameterize_sample_mean_within_three_sigma() {
        let n = 100_000;
        let mu = Array2::from_elem((n, 1), 1.5);
        let lv = Array2::from_elem((n, 1), (0.64f64).ln());
        let z = reparameterize(&mu, &lv, &mut rng_for(5, &[]));
        let mean = z.sum() / n as f64;
        assert!((mean - 1.5).abs() < 3.0 * 0.8 / (n as f64).sqrt(), "{mean}");
    }
}
