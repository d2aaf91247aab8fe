use proptest::prelude::*;
use rand::SeedableRng;
use rpuvae::pbt::{draw_factor, explore, init_population, ranking, SearchSpace, PERTURB_FACTORS};
use rpuvae::seed::Rng;
use rpuvae::Hyper;

fn score_strategy() -> impl Strategy<Value = f64> {
    prop_oneof![
        8 => -5.0f64..5.0,
        1 => Just(0.0),
        1 => Just(f64::NEG_INFINITY),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn exploit_keeps_the_best_theta(scores in prop::collection::vec(score_strategy(), 2..24), seed in any::<u64>()) {
        let mut pop = init_population(SearchSpace::default(), scores.len(), seed, |id, _| id).unwrap();
        for (m, &s) in pop.members.iter_mut().zip(&scores) {
            m.score = s;
        }
        let order = ranking(&pop.members);
        let best = order[0];
        let cut = scores.len() / 5;
        let copies = pop.exploit(&mut Rng::seed_from_u64(seed));
        prop_assert_eq!(pop.members[best].theta, best);
        prop_assert_eq!(copies.len(), cut);
        for (dst, src) in copies {
            prop_assert!(order[..cut].contains(&src));
            prop_assert!(order[scores.len() - cut..].contains(&dst));
            prop_assert_eq!(pop.members[dst].theta, src);
        }
    }
}

#[test]
fn explore_draws_each_factor_equally_often() {
    let mut rng = Rng::seed_from_u64(11);
    let n = 40_000;
    let mut counts = [0usize; 4];
    for _ in 0..n {
        let f = draw_factor(&mut rng);
        let k = PERTURB_FACTORS.iter().position(|&p| p == f).expect("factor outside the set");
        counts[k] += 1;
    }
    for c in counts {
        let freq = c as f64 / n as f64;
        assert!((freq - 0.25).abs() < 0.01, "{counts:?}");
    }
}

#[test]
fn explore_scales_by_listed_factors_inside_bounds() {
    let space = SearchSpace::default();
    let h = Hyper {
        learning_rate: 1e-3,
        batch_size: 100,
        beta: 4.0,
    };
    let mut rng = Rng::seed_from_u64(5);
    for _ in 0..2_000 {
        let e = explore(&h, &mut rng, &space);
        let lr = e.learning_rate / h.learning_rate;
        let beta = e.beta / h.beta;
        let batch = e.batch_size as f64 / h.batch_size as f64;
        for r in [lr, beta, batch] {
            assert!(PERTURB_FACTORS.iter().any(|f| (f - r).abs() < 1e-12), "ratio {r}");
        }
    }
}

#[test]
fn explore_clamps_batch_to_dataset() {
    let space = SearchSpace::default().for_dataset(50);
    let h = Hyper {
        learning_rate: 1e-3,
        batch_size: 40,
        beta: 1.0,
    };
    let mut rng = Rng::seed_from_u64(3);
    for _ in 0..500 {
        let e = explore(&h, &mut rng, &space);
        assert!((1..=50).contains(&e.batch_size));
    }
}
