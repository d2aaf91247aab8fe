//! Trains a β-TCVAE, round-trips it through a checkpoint file and writes a
//! latent traversal mosaic (one row per latent).
//!
//! Usage: `cargo run --release --example traversal -- [epochs] [sample] [out.pgm]`

use std::sync::Arc;

use rpuvae::dataset::{generate, write_pgm, DatasetView, FactorSpec};
use rpuvae::seed::rng_for;
use rpuvae::vae::{checkpoint, latent_stats, train_epoch, traverse, Architecture, Hyper, KlWeighting, TrainState};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(200);
    let sample: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(100);
    let out = args.next().unwrap_or_else(|| "traversal.pgm".into());

    let spec = FactorSpec::mini_dsprites();
    let view = DatasetView::full(Arc::new(generate(&spec)?));
    let mut state = TrainState::new(Architecture::desk(view.num_pixels(), 10), &mut rng_for(0, &[0]));
    let hyper = Hyper {
        learning_rate: 1e-3,
        batch_size: 64,
        beta: 2.0,
    };
    let mut rng = rng_for(0, &[1]);
    for _ in 0..epochs {
        train_epoch(&mut state, &view, &hyper, KlWeighting::TotalCorrelation, &mut rng)?;
    }

    let dir = tempfile_dir()?;
    let path = dir.join("model.ckpt");
    checkpoint::save(&path, &state)?;
    let restored = checkpoint::load(&path)?;
    assert_eq!(restored.params, state.params);
    println!("checkpoint {} bytes", std::fs::metadata(&path)?.len());

    let kl = latent_stats(&restored.params, &view, view.len())?.kl;
    let base: Vec<f64> = view.image(sample).iter().map(|&b| f64::from(b)).collect();
    let steps = 9;
    let (w, h) = (spec.image_width, spec.image_height);
    let latents = restored.params.latent_dim();
    let mut pixels = vec![0.0; latents * h * steps * w];
    for l in 0..latents {
        let frames = traverse(&restored.params, &base, l, 2.0, steps)?;
        for (s, frame) in frames.iter().enumerate() {
            for (p, &v) in frame.iter().enumerate() {
                pixels[(l * h + p / w) * steps * w + s * w + p % w] = v;
            }
        }
        println!("row {l}: KL {:.2}", kl[l]);
    }
    write_pgm(std::path::Path::new(&out), steps * w, latents * h, &pixels)?;
    println!("wrote {out} for sample {sample} with factors {:?}", view.factors(sample));
    Ok(())
}

fn tempfile_dir() -> std::io::Result<std::path::PathBuf> {
    let d = std::env::temp_dir().join(format!("rpuvae-traversal-{}", std::process::id()));
    std::fs::create_dir_all(&d)?;
    Ok(d)
}
