//! One label-and-reduce step: train a β-TCVAE, take its active latents as
//! surrogate labels and cut the dataset down to the samples on which those
//! latents barely change.
//!
//! Usage: `cargo run --release --example reduce_dataset -- [epochs] [rank] [seed]`

use std::sync::Arc;

use rpuvae::dataset::{generate, DatasetView, FactorSpec};
use rpuvae::reducer::{reduce, Reduction};
use rpuvae::seed::rng_for;
use rpuvae::vae::{active_latents, latent_stats, train_epoch, Architecture, Hyper, KlWeighting, TrainState};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(200);
    let rank: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);

    let spec = FactorSpec::mini_dsprites();
    let view = DatasetView::full(Arc::new(generate(&spec)?));
    let mut state = TrainState::new(Architecture::desk(view.num_pixels(), 10), &mut rng_for(seed, &[0]));
    let hyper = Hyper {
        learning_rate: 1e-3,
        batch_size: 64,
        beta: 4.0,
    };
    let mut rng = rng_for(seed, &[1]);
    for _ in 0..epochs {
        train_epoch(&mut state, &view, &hyper, KlWeighting::TotalCorrelation, &mut rng)?;
    }
    let stats = latent_stats(&state.params, &view, view.len())?;
    let active = active_latents(&stats, 0.75);
    println!("active latents {active:?} (KL {:.2?})", active.iter().map(|&a| stats.kl[a]).collect::<Vec<_>>());
    if active.is_empty() {
        println!("nothing learned; try more epochs");
        return Ok(());
    }

    // a single latent at a time shows the interval structure; all of them
    // together give the actual reduction
    for &a in &active {
        let (_, trace) = reduce(&view, &state.params, &[a], rank, 1)?;
        let col = &trace.columns[0];
        println!(
            "latent {a}: window {}, {} peaks, {} intervals; best sizes {:?}",
            col.window,
            col.peaks.len(),
            col.intervals.len(),
            col.intervals.iter().take(5).map(|i| i.len()).collect::<Vec<_>>()
        );
    }
    let (outcome, trace) = reduce(&view, &state.params, &active, rank, 10)?;
    match outcome {
        Reduction::Reduced(sub) => {
            println!("reduced {} -> {} samples", view.len(), sub.len());
            for (k, name) in spec.factor_names().iter().enumerate() {
                let mut levels: Vec<usize> = (0..sub.len()).map(|p| sub.factors(p)[k]).collect();
                levels.sort_unstable();
                levels.dedup();
                println!("  {name:<6} levels left {levels:?}");
            }
        }
        Reduction::TooSmall { size } => println!("intersection of {} intervals has only {size} samples", trace.chosen.len()),
        Reduction::NoStructure { latent } => println!("latent {latent} shows no plateau"),
    }
    Ok(())
}
