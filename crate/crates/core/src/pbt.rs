//! Synchronous population-based training.
//!
//! Every generation each member is stepped and evaluated (in parallel), then
//! at a barrier the bottom 20% copy the trainable state of a random top-20%
//! member and have their hyperparameters perturbed. Each member draws from
//! its own random stream derived from `(seed, member id, generation)`, so the
//! outcome does not depend on thread scheduling.

use rand::seq::IndexedRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::{rng_for, Rng};
use crate::vae::Hyper;

/// Multiplicative perturbation factors used by explore.
pub const PERTURB_FACTORS: [f64; 4] = [0.5, 0.8, 1.2, 2.0];
/// Fraction of the population exploited (bottom) and used as donors (top).
pub const TRUNCATION: f64 = 0.2;

const EXPLOIT_STREAM: u64 = u64::MAX;
const INIT_STREAM: u64 = u64::MAX - 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PbtError {
    #[error("population needs at least 2 members, got {0}")]
    TooSmall(usize),
    #[error("invalid search space: {0}")]
    InvalidSpace(String),
}

/// Log-spaced points `10^lo ..= 10^hi` (or any base).
pub fn logspace(lo: f64, hi: f64, num: usize, base: f64) -> Vec<f64> {
    if num == 1 {
        return vec![base.powf(lo)];
    }
    (0..num)
        .map(|i| base.powf(lo + (hi - lo) * i as f64 / (num - 1) as f64))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub batch_sizes: Vec<usize>,
    pub learning_rates: Vec<f64>,
    pub betas: Vec<f64>,
    pub learning_rate_bounds: (f64, f64),
    pub batch_size_bounds: (usize, usize),
    pub beta_bounds: (f64, f64),
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            batch_sizes: vec![8, 16, 32, 64, 128, 256, 512, 1024],
            learning_rates: logspace(-5.0, 0.0, 30, 10.0),
            betas: logspace(1.0, 15.0, 24, 1.5),
            learning_rate_bounds: (1e-6, 1.0),
            batch_size_bounds: (1, 1024),
            beta_bounds: (1e-2, 1e3),
        }
    }
}

impl SearchSpace {
    /// Restricts batch sizes to the dataset size.
    pub fn for_dataset(mut self, n: usize) -> Self {
        self.batch_size_bounds.1 = self.batch_size_bounds.1.min(n).max(self.batch_size_bounds.0);
        self
    }

    pub fn validate(&self) -> Result<(), PbtError> {
        if self.batch_sizes.is_empty() || self.learning_rates.is_empty() || self.betas.is_empty() {
            return Err(PbtError::InvalidSpace("empty grid".into()));
        }
        let ordered = self.learning_rate_bounds.0 <= self.learning_rate_bounds.1
            && self.batch_size_bounds.0 <= self.batch_size_bounds.1
            && self.beta_bounds.0 <= self.beta_bounds.1
            && self.batch_size_bounds.0 >= 1
            && self.learning_rate_bounds.0 >= 0.0
            && self.beta_bounds.0 > 0.0;
        if !ordered {
            return Err(PbtError::InvalidSpace("bounds out of order".into()));
        }
        Ok(())
    }

    fn clamp(&self, h: Hyper) -> Hyper {
        Hyper {
            learning_rate: h.learning_rate.clamp(self.learning_rate_bounds.0, self.learning_rate_bounds.1),
            batch_size: h.batch_size.clamp(self.batch_size_bounds.0, self.batch_size_bounds.1),
            beta: h.beta.clamp(self.beta_bounds.0, self.beta_bounds.1),
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> Hyper {
        self.clamp(Hyper {
            learning_rate: *self.learning_rates.choose(rng).unwrap(),
            batch_size: *self.batch_sizes.choose(rng).unwrap(),
            beta: *self.betas.choose(rng).unwrap(),
        })
    }
}

/// Applies explicit factors `(lr, batch, beta)`; batch is rounded, then all
/// three are clamped to the space bounds.
pub fn explore_with_factors(h: &Hyper, factors: [f64; 3], space: &SearchSpace) -> Hyper {
    space.clamp(Hyper {
        learning_rate: h.learning_rate * factors[0],
        batch_size: (h.batch_size as f64 * factors[1]).round().max(1.0) as usize,
        beta: h.beta * factors[2],
    })
}

pub fn draw_factor(rng: &mut Rng) -> f64 {
    PERTURB_FACTORS[rng.random_range(0..PERTURB_FACTORS.len())]
}

pub fn explore(h: &Hyper, rng: &mut Rng, space: &SearchSpace) -> Hyper {
    let f = [draw_factor(rng), draw_factor(rng), draw_factor(rng)];
    explore_with_factors(h, f, space)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PbtOptions {
    /// Also copy the donor's hyperparameters on exploit.
    pub copy_hyper: bool,
    /// Perturb every member each generation instead of only exploited ones.
    pub explore_all: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Member<T> {
    pub id: usize,
    pub theta: T,
    pub hyper: Hyper,
    pub score: f64,
    /// Number of completed generations.
    pub t: u64,
}

/// Reported when a step cannot continue (e.g. non-finite loss).
#[derive(Debug, Clone, PartialEq, Error)]
#[error("step failed: {0}")]
pub struct StepFailed(pub String);

/// One line of the per-generation log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: u64,
    pub member_id: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta: f64,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct Population<T> {
    pub members: Vec<Member<T>>,
    pub generation: u64,
    pub seed: u64,
    pub space: SearchSpace,
    pub options: PbtOptions,
}

/// Members sample hyperparameters uniformly from the grids; `init_theta`
/// receives each member's id and private random stream.
pub fn init_population<T>(
    space: SearchSpace,
    size: usize,
    seed: u64,
    mut init_theta: impl FnMut(usize, &mut Rng) -> T,
) -> Result<Population<T>, PbtError> {
    if size < 2 {
        return Err(PbtError::TooSmall(size));
    }
    space.validate()?;
    let members = (0..size)
        .map(|id| {
            let mut rng = rng_for(seed, &[INIT_STREAM, id as u64]);
            let hyper = space.sample(&mut rng);
            let theta = init_theta(id, &mut rng);
            Member {
                id,
                theta,
                hyper,
                score: f64::NEG_INFINITY,
                t: 0,
            }
        })
        .collect();
    Ok(Population {
        members,
        generation: 0,
        seed,
        space,
        options: PbtOptions::default(),
    })
}

/// Member positions ordered best first; ties by ascending id.
pub fn ranking<T>(members: &[Member<T>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..members.len()).collect();
    order.sort_by(|&a, &b| {
        members[b]
            .score
            .total_cmp(&members[a].score)
            .then(members[a].id.cmp(&members[b].id))
    });
    order
}

/// `(recipient position, donor position)` pairs.
pub type Exploits = Vec<(usize, usize)>;

impl<T: Clone + Send + Sync> Population<T> {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn best(&self) -> &Member<T> {
        &self.members[ranking(&self.members)[0]]
    }

    pub fn best_score(&self) -> f64 {
        self.best().score
    }

    /// Steps and evaluates every member, then exploits and explores.
    /// Returns the log records of this generation (scores before exploit).
    pub fn run_generation<S, E>(&mut self, step: S, eval: E) -> Vec<GenerationRecord>
    where
        S: Fn(&mut T, &Hyper, &mut Rng) -> Result<(), StepFailed> + Sync,
        E: Fn(&T) -> f64 + Sync,
    {
        let (seed, generation) = (self.seed, self.generation);
        self.members.par_iter_mut().for_each(|m| {
            let mut rng = rng_for(seed, &[m.id as u64, generation]);
            m.score = match step(&mut m.theta, &m.hyper, &mut rng) {
                Ok(()) => {
                    let s = eval(&m.theta);
                    if s.is_nan() {
                        f64::NEG_INFINITY
                    } else {
                        s
                    }
                }
                Err(_) => f64::NEG_INFINITY,
            };
            m.t += 1;
        });
        let records = self
            .members
            .iter()
            .map(|m| GenerationRecord {
                generation,
                member_id: m.id,
                learning_rate: m.hyper.learning_rate,
                batch_size: m.hyper.batch_size,
                beta: m.hyper.beta,
                score: m.score,
            })
            .collect();
        let mut rng = rng_for(seed, &[EXPLOIT_STREAM, generation]);
        let copies = self.exploit(&mut rng);
        self.explore_members(&copies, &mut rng);
        self.generation += 1;
        records
    }

    /// Bottom `floor(0.2 n)` members copy `theta` from a uniformly chosen
    /// member of the top `floor(0.2 n)`.
    pub fn exploit(&mut self, rng: &mut Rng) -> Exploits {
        let n = self.members.len();
        let cut = (TRUNCATION * n as f64).floor() as usize;
        if cut == 0 {
            return Vec::new();
        }
        let order = ranking(&self.members);
        let top = &order[..cut];
        let mut copies = Vec::with_capacity(cut);
        for &dst in &order[n - cut..] {
            let src = top[rng.random_range(0..cut)];
            let theta = self.members[src].theta.clone();
            self.members[dst].theta = theta;
            if self.options.copy_hyper {
                self.members[dst].hyper = self.members[src].hyper;
            }
            copies.push((dst, src));
        }
        copies
    }

    fn explore_members(&mut self, copies: &Exploits, rng: &mut Rng) {
        let targets: Vec<usize> = if self.options.explore_all {
            (0..self.members.len()).collect()
        } else {
            copies.iter().map(|&(dst, _)| dst).collect()
        };
        for pos in targets {
            let h = explore(&self.members[pos].hyper, rng, &self.space);
            self.members[pos].hyper = h;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn singleton_space() -> SearchSpace {
        SearchSpace {
            batch_sizes: vec![4],
            learning_rates: vec![0.1],
            betas: vec![2.0],
            ..SearchSpace::default()
        }
    }

    #[test]
    fn grids_match_published_tables() {
        let s = SearchSpace::default();
        assert_eq!(s.learning_rates.len(), 30);
        assert!((s.learning_rates[0] - 1e-5).abs() < 1e-18);
        assert!((s.learning_rates[29] - 1.0).abs() < 1e-12);
        assert_eq!(s.betas.len(), 24);
        assert!((s.betas[0] - 1.5).abs() < 1e-12);
        assert!((s.betas[23] - 1.5f64.powi(15)).abs() < 1e-9);
    }

    #[test]
    fn init_samples_from_grids() {
        let space = SearchSpace::default();
        let pop = init_population(space.clone(), 56, 9, |id, _| id).unwrap();
        for m in &pop.members {
            assert!(space.batch_sizes.contains(&m.hyper.batch_size));
            assert!(space.learning_rates.contains(&m.hyper.learning_rate));
            assert!(space.betas.contains(&m.hyper.beta));
            assert_eq!(m.t, 0);
        }
        assert!(init_population(space, 1, 0, |_, _| ()).is_err());
    }

    #[test]
    fn singleton_grids_share_hyper_but_not_theta() {
        let pop = init_population(singleton_space(), 2, 3, |_, rng| rng.random::<u64>()).unwrap();
        assert_eq!(pop.members[0].hyper, pop.members[1].hyper);
        assert_ne!(pop.members[0].theta, pop.members[1].theta);
    }

    #[test]
    fn same_seed_same_population() {
        let a = init_population(SearchSpace::default(), 8, 5, |_, rng| rng.random::<u64>()).unwrap();
        let b = init_population(SearchSpace::default(), 8, 5, |_, rng| rng.random::<u64>()).unwrap();
        assert_eq!(a.members, b.members);
    }

    #[test]
    fn explore_example_and_clamp() {
        let space = SearchSpace::default();
        let h = Hyper {
            learning_rate: 1e-3,
            batch_size: 64,
            beta: 4.0,
        };
        let e = explore_with_factors(&h, [2.0, 0.5, 1.2], &space);
        assert!((e.learning_rate - 2e-3).abs() < 1e-15);
        assert_eq!(e.batch_size, 32);
        assert!((e.beta - 4.8).abs() < 1e-12);
        let one = Hyper { batch_size: 1, ..h };
        assert_eq!(explore_with_factors(&one, [1.0, 0.5, 1.0], &space).batch_size, 1);
        let capped = space.clone().for_dataset(100);
        let big = Hyper { batch_size: 80, ..h };
        assert_eq!(explore_with_factors(&big, [1.0, 2.0, 1.0], &capped).batch_size, 100);
    }

    #[test]
    fn five_members_one_copy() {
        let mut pop = init_population(singleton_space(), 5, 1, |id, _| id).unwrap();
        for (i, m) in pop.members.iter_mut().enumerate() {
            m.score = i as f64;
        }
        let copies = pop.exploit(&mut Rng::seed_from_u64(0));
        assert_eq!(copies, vec![(0, 4)]);
        assert_eq!(pop.members[0].theta, 4);
    }

    #[test]
    fn ties_rank_by_id_and_still_copy() {
        let mut pop = init_population(singleton_space(), 10, 1, |id, _| id).unwrap();
        for m in &mut pop.members {
            m.score = 0.5;
        }
        let copies = pop.exploit(&mut Rng::seed_from_u64(0));
        assert_eq!(copies.len(), 2);
        for (dst, src) in copies {
            assert!(dst >= 8 && src <= 1);
        }
    }

    #[test]
    fn diverged_members_score_negative_infinity() {
        let mut pop = init_population(singleton_space(), 5, 2, |id, _| id as f64).unwrap();
        pop.run_generation(
            |theta, _, _| {
                if *theta == 0.0 {
                    Err(StepFailed("nan".into()))
                } else {
                    Ok(())
                }
            },
            |theta| *theta,
        );
        // member 0 diverged, got ranked last and received the best theta
        assert_eq!(pop.members[0].score, f64::NEG_INFINITY);
        assert_eq!(pop.members[0].theta, 4.0);
        assert!(pop.members.iter().all(|m| m.t == 1));
    }
}
