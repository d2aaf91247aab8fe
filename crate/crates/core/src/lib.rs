//! Population-based training of β-TCVAE models for disentangled representations.
//!
//! The crate is organised bottom-up:
//!
//! - [`dataset`]: procedural factorized sprite datasets and index-set views.
//! - [`vae`]: MLP β-TCVAE with analytic gradients, Adam, traversals and checkpoints.
//! - [`metrics`]: discrete mutual information, MIG and DCI disentanglement.
//! - [`udr`]: unsupervised disentanglement ranking from pairwise Spearman similarity.
//! - [`pbt`]: generic population-based training (exploit / explore).
//! - [`reducer`]: latent encoding values, derivative peaks and dataset reduction.
//! - [`pipeline`]: the recursive unsupervised pipeline plus supervised modes.
//!
//! See `examples/` for one runnable program per capability.

pub mod dataset;
pub mod metrics;
pub mod pbt;
pub mod pipeline;
pub mod reducer;
pub mod seed;
pub mod udr;
pub mod vae;

pub use dataset::{DatasetView, FactorSpec, FactorizedDataset};
pub use pipeline::{RunConfig, RunReport};

pub use vae::{Architecture, Hyper, LossBreakdown, VaeParams};
