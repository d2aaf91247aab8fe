//! Supervised population-based training scored against ground-truth labels,
//! optionally on a random label subset.
//!
//! Usage: `cargo run --release --example supervised_pbt -- [mig|dci] [label_budget] [seed]`

use rpuvae::pipeline::{evaluate_ground_truth, EvalMetric, Event, RunConfig, Runner};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let metric = match args.next().as_deref() {
        Some("dci") => EvalMetric::Dci,
        _ => EvalMetric::Mig,
    };
    let label_budget: Option<usize> = args.next().map(|s| s.parse()).transpose()?;
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);

    let config = RunConfig {
        seed,
        eval_metric: metric,
        label_budget,
        ..RunConfig::desk()
    };
    let mut runner = Runner::new(config)?.with_observer(|e| {
        if let Event::Generation { generation, best, .. } = e {
            println!("generation {generation:>2}  best {metric:?} on labelled samples {best:.3}");
        }
    });
    let params = runner.run_supervised()?;
    let m = evaluate_ground_truth(&params, runner.root(), runner.config().n_bins)?;
    println!("all samples: MIG {:.3} {:.2?}  DCI {:.3}", m.mig, m.mig_per_factor, m.dci_disentanglement);
    if let Some(s) = &runner.supervised {
        println!("best member {} trained on {} labelled samples", s.summary.best_member, s.summary.labeled_samples);
    }
    Ok(())
}
