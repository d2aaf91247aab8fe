//! Trains one β-TCVAE on mini-dsprites and tracks MIG against ground truth.
//!
//! Usage: `cargo run --release --example train_tcvae -- [epochs] [lr] [batch] [beta] [seed]`

use std::sync::Arc;

use rpuvae::dataset::{generate, DatasetView, FactorSpec};
use rpuvae::pipeline::evaluate_ground_truth;
use rpuvae::seed::rng_for;
use rpuvae::vae::{latent_stats, train_epoch, Architecture, Hyper, KlWeighting, TrainState};

fn arg<T: std::str::FromStr>(args: &[String], i: usize, default: T) -> T {
    args.get(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let epochs: usize = arg(&args, 0, 200);
    let hyper = Hyper {
        learning_rate: arg(&args, 1, 1e-3),
        batch_size: arg(&args, 2, 32),
        beta: arg(&args, 3, 4.0),
    };
    let seed: u64 = arg(&args, 4, 0);

    let view = DatasetView::full(Arc::new(generate(&FactorSpec::mini_dsprites())?));
    let arch = Architecture::desk(view.num_pixels(), 10);
    let mut state = TrainState::new(arch, &mut rng_for(seed, &[0]));
    let mut rng = rng_for(seed, &[1]);
    for epoch in 1..=epochs {
        let loss = train_epoch(&mut state, &view, &hyper, KlWeighting::TotalCorrelation, &mut rng)?;
        if epoch % 10 == 0 || epoch == epochs {
            let m = evaluate_ground_truth(&state.params, &view, 20)?;
            let kl = latent_stats(&state.params, &view, view.len())?.kl;
            let active = kl.iter().filter(|&&k| k > 0.75).count();
            println!(
                "epoch {epoch:>4}  loss {:>8.3}  recon {:>8.3}  tc {:>7.3}  active {active}  MIG {:.3} {:.2?}",
                loss.total, loss.recon_nll, loss.total_correlation, m.mig, m.mig_per_factor
            );
        }
    }
    Ok(())
}
