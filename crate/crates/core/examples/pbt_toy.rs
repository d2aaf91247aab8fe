//! Population-based training on f(x) = (x - 3)^2 with the learning rate as
//! the only tuned hyperparameter.
//!
//! Usage: `cargo run --release --example pbt_toy -- [seed] [population] [generations]`

use rand::Rng as _;
use rpuvae::pbt::{init_population, SearchSpace, StepFailed};
use rpuvae::seed::Rng;
use rpuvae::Hyper;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);
    let size: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(16);
    let generations: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(30);

    let space = SearchSpace {
        batch_sizes: vec![1],
        betas: vec![1.0],
        ..SearchSpace::default()
    };
    let mut pop = init_population(space, size, seed, |_, rng| rng.random_range(-10.0..10.0))?;
    let step = |x: &mut f64, h: &Hyper, _: &mut Rng| -> Result<(), StepFailed> {
        *x -= h.learning_rate * 2.0 * (*x - 3.0);
        Ok(())
    };
    let eval = |x: &f64| -(x - 3.0).powi(2);
    for g in 0..generations {
        let log = pop.run_generation(step, eval);
        let best = log.iter().max_by(|a, b| a.score.total_cmp(&b.score)).expect("nonempty population");
        println!(
            "gen {g:>3}  best f {:>10.3e}  its lr {:.4}  median lr {:.4}",
            -best.score,
            best.learning_rate,
            {
                let mut lrs: Vec<f64> = log.iter().map(|r| r.learning_rate).collect();
                lrs.sort_by(f64::total_cmp);
                lrs[lrs.len() / 2]
            }
        );
    }
    println!("best x = {:.6}", pop.best().theta);
    Ok(())
}
