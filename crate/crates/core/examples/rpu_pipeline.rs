//! Full recursive pipeline on mini-dsprites.
//!
//! Usage: `cargo run --release --example rpu_pipeline -- [seed] [leaf_runs]`

use std::time::Instant;

use rpuvae::pipeline::{Event, RunConfig, Runner};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let seed = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);
    let leaves = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1);
    let config = RunConfig {
        seed,
        max_leaf_runs: leaves,
        ..RunConfig::desk()
    };
    let start = Instant::now();
    let mut runner = Runner::new(config)?.with_observer(|e| match e {
        Event::Generation { stage, generation, best, view_size } => {
            eprintln!(
                "[{:>6.1}s] {stage:<10} gen {generation:>3}  n={view_size:<4} best {best:.4}",
                start.elapsed().as_secs_f64()
            )
        }
        other => eprintln!("[{:>6.1}s] {other:?}", start.elapsed().as_secs_f64()),
    });
    let params = runner.run_rpu()?;
    let report = runner.report("rpu", Some(&params));
    for s in &report.stages {
        println!(
            "{:<10} n={:<4} {:?} active={:?} factors={:?}",
            s.stage, s.view_size, s.termination, s.active_latents, s.dominant_factors
        );
    }
    if let Some(m) = &report.final_metrics {
        println!("final MIG {:.3} {:?}  DCI {:.3}", m.mig, m.mig_per_factor, m.dci_disentanglement);
    }
    Ok(())
}
