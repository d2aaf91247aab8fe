//! Trains a few β-TCVAEs that differ only in their seed and compares them
//! with the unsupervised disentanglement ranking score.
//!
//! Usage: `cargo run --release --example udr_scoring -- [models] [epochs] [beta]`

use std::sync::Arc;

use rpuvae::dataset::{generate, DatasetView, FactorSpec};
use rpuvae::pipeline::evaluate_ground_truth;
use rpuvae::seed::rng_for;
use rpuvae::udr::{similarity_matrix, udr_member, ModelCodes, DEFAULT_KL_MASK_THRESHOLD};
use rpuvae::vae::{train_epoch, Architecture, Hyper, KlWeighting, TrainState};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let models: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(3);
    let epochs: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(150);
    let beta: f64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(2.0);

    let view = DatasetView::full(Arc::new(generate(&FactorSpec::mini_dsprites())?));
    let all: Vec<usize> = (0..view.len()).collect();
    let hyper = Hyper {
        learning_rate: 1e-3,
        batch_size: 64,
        beta,
    };
    let mut codes = Vec::new();
    for m in 0..models {
        let mut state = TrainState::new(Architecture::desk(view.num_pixels(), 10), &mut rng_for(m, &[0]));
        let mut rng = rng_for(m, &[1]);
        for _ in 0..epochs {
            train_epoch(&mut state, &view, &hyper, KlWeighting::TotalCorrelation, &mut rng)?;
        }
        let gt = evaluate_ground_truth(&state.params, &view, 20)?;
        let c = ModelCodes::from_model(&state.params, &view, &all)?;
        let informative = c.kl.iter().filter(|&&k| k > DEFAULT_KL_MASK_THRESHOLD).count();
        println!("model {m}: {informative} informative latents, ground-truth MIG {:.3}", gt.mig);
        codes.push(c);
    }

    let s = similarity_matrix(&codes[0], &codes[1])?;
    println!("\n|Spearman| between model 0 (rows) and model 1 (columns), informative latents only:");
    let keep = |c: &ModelCodes| -> Vec<usize> {
        (0..c.kl.len()).filter(|&i| c.kl[i] > DEFAULT_KL_MASK_THRESHOLD).collect()
    };
    for i in keep(&codes[0]) {
        let row: Vec<String> = keep(&codes[1]).iter().map(|&j| format!("{:.2}", s[[i, j]])).collect();
        println!("  z{i:<2} {}", row.join(" "));
    }

    let u = udr_member(&codes, DEFAULT_KL_MASK_THRESHOLD)?;
    println!("\nper-model UDR {:.3?}", u.per_model);
    println!("member score {:.3} (model {})", u.score, u.best_model());
    Ok(())
}
