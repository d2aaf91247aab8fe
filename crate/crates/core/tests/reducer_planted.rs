use std::sync::Arc;

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rpuvae::dataset::{generate, DatasetView, FactorSpec};
use rpuvae::reducer::{analyze_column, reduce_with_levs, variance_ratio, LevTable, Reduction};
use rpuvae::seed::Rng;

/// `levels` plateaus of `size` samples each, shuffled into sample order.
fn staircase(levels: usize, size: usize, sigma: f64, seed: u64) -> (Vec<f64>, Vec<usize>) {
    let mut rng = Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma).unwrap();
    let n = levels * size;
    // sample i sits on plateau (i * 7) % levels so plateaus interleave by index
    let plateau: Vec<usize> = (0..n).map(|i| (i * 7) % levels).collect();
    let values = plateau.iter().map(|&p| p as f64 + noise.sample(&mut rng)).collect();
    (values, plateau)
}

#[test]
fn noisy_staircase_top_interval_is_one_plateau() {
    for seed in 0..5 {
        let (values, plateau) = staircase(5, 100, 0.01, seed);
        let idx: Vec<usize> = (0..values.len()).collect();
        let a = analyze_column(&values, &idx).unwrap();
        let top = &a.intervals[0];
        let mut counts = [0usize; 5];
        for &i in &top.member_indices {
            counts[plateau[i]] += 1;
        }
        let purity = *counts.iter().max().unwrap() as f64 / top.len() as f64;
        assert!(purity >= 0.95, "seed {seed}: purity {purity}");
        let ratio = variance_ratio(&a, top);
        assert!(ratio < 0.2, "seed {seed}: variance ratio {ratio}");
        assert_eq!(a.intervals.len(), 5);
    }
}

#[test]
fn two_latent_intersection_matches_expected_size() {
    // 192 samples: 3 scales x 8 x-positions x 8 y-positions
    let data = Arc::new(generate(&FactorSpec::mini_dsprites()).unwrap());
    let view = DatasetView::full(data.clone());
    let mut rng = Rng::seed_from_u64(9);
    let noise = Normal::new(0.0, 0.01).unwrap();
    let col = |k: usize, rng: &mut Rng| -> Vec<f64> {
        (0..view.len()).map(|p| view.factors(p)[k] as f64 + noise.sample(rng)).collect()
    };
    let levs = LevTable {
        sample_indices: view.indices().to_vec(),
        latents: vec![1, 2],
        values: vec![col(1, &mut rng), col(2, &mut rng)],
    };
    let expected = view.len() as f64 / (8.0 * 8.0);
    for rank in 0..4 {
        let (red, trace) = reduce_with_levs(&view, &levs, rank, 2).unwrap();
        let size = trace.result_size as f64;
        assert!((size - expected).abs() <= 0.2 * expected, "rank {rank}: {size} vs {expected}");
        let Reduction::Reduced(sub) = red else {
            panic!("rank {rank} did not reduce");
        };
        let first = sub.factors(0).to_vec();
        for p in 0..sub.len() {
            assert_eq!(&sub.factors(p)[1..], &first[1..]);
        }
    }
}

#[test]
fn intersection_below_minimum_is_too_small() {
    let data = Arc::new(generate(&FactorSpec::mini_dsprites()).unwrap());
    let view = DatasetView::full(data);
    let levs = LevTable {
        sample_indices: view.indices().to_vec(),
        latents: vec![0, 1, 2],
        values: (0..3)
            .map(|k| (0..view.len()).map(|p| view.factors(p)[k] as f64 + 1e-3 * p as f64 / 192.0).collect())
            .collect(),
    };
    let (red, trace) = reduce_with_levs(&view, &levs, 0, 10).unwrap();
    assert!(matches!(red, Reduction::TooSmall { size } if size == trace.result_size));
    assert!(trace.result_size < 10);
}
