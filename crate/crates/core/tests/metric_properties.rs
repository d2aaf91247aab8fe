use ndarray::{Array2, Axis};
use proptest::prelude::*;
use rpuvae::metrics::{dci_disentanglement, discrete_mi, mig, ImportanceMatrix};
use rpuvae::udr::udr_pair;

/// Latents: one noisy copy per factor plus pure-noise columns.
fn codes(n: usize, seed: u64) -> (Array2<f64>, Array2<usize>) {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let mut next = move || {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (s >> 11) as f64 / (1u64 << 53) as f64
    };
    let f = Array2::from_shape_fn((n, 2), |(i, k)| if k == 0 { i % 4 } else { (i / 4) % 5 });
    let mut z = Array2::zeros((n, 4));
    for i in 0..n {
        z[[i, 0]] = f[[i, 0]] as f64 + 0.3 * next();
        z[[i, 1]] = f[[i, 1]] as f64 + 0.3 * next();
        z[[i, 2]] = next();
        z[[i, 3]] = next();
    }
    (z, f)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mig_ignores_latent_order(seed in any::<u64>(), perm in Just([2usize, 0, 3, 1]).prop_shuffle()) {
        let (z, f) = codes(100, seed);
        let permuted = z.select(Axis(1), &perm);
        let a = mig(z.view(), f.view(), 10).unwrap();
        let b = mig(permuted.view(), f.view(), 10).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn mig_ignores_sign_flips(seed in any::<u64>(), flips in prop::collection::vec(any::<bool>(), 4)) {
        // 100 samples in 10 bins: reversing the order mirrors every bin
        let (z, f) = codes(100, seed);
        let mut flipped = z.clone();
        for (k, &flip) in flips.iter().enumerate() {
            if flip {
                flipped.column_mut(k).mapv_inplace(|v| -v);
            }
        }
        let a = mig(z.view(), f.view(), 10).unwrap();
        let b = mig(flipped.view(), f.view(), 10).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn mig_ignores_monotone_maps(seed in any::<u64>()) {
        let (z, f) = codes(120, seed);
        let warped = z.mapv(|v| (2.0 * v).exp() + v.powi(3));
        let a = mig(z.view(), f.view(), 20).unwrap();
        let b = mig(warped.view(), f.view(), 20).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn mi_is_symmetric_and_bounded(a in prop::collection::vec(0usize..5, 1..60), shift in 0usize..7) {
        let b: Vec<usize> = a.iter().enumerate().map(|(i, &v)| (v * 3 + i * shift) % 4).collect();
        let ab = discrete_mi(&a, &b).unwrap();
        let ba = discrete_mi(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ab >= 0.0);
        prop_assert!(ab <= discrete_mi(&a, &a).unwrap() + 1e-12);
    }

    #[test]
    fn dci_is_bounded_and_scale_free(vals in prop::collection::vec(0.0f64..5.0, 12), scale in 0.1f64..100.0) {
        prop_assume!(vals.iter().sum::<f64>() > 1e-6);
        let r = Array2::from_shape_vec((4, 3), vals).unwrap();
        let d = dci_disentanglement(&ImportanceMatrix(r.clone())).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        let scaled = dci_disentanglement(&ImportanceMatrix(r.mapv(|v| v * scale))).unwrap();
        prop_assert!((d - scaled).abs() < 1e-9);
        let rows = r.select(Axis(0), &[3, 1, 0, 2]).select(Axis(1), &[2, 0, 1]);
        let permuted = dci_disentanglement(&ImportanceMatrix(rows)).unwrap();
        prop_assert!((d - permuted).abs() < 1e-9);
    }

    #[test]
    fn udr_pair_is_symmetric_and_bounded(vals in prop::collection::vec(0.0f64..=1.0, 25)) {
        let s = Array2::from_shape_vec((5, 5), vals).unwrap();
        let kl = [1.0; 5];
        let a = udr_pair(&s, &kl, &kl, 0.01);
        let b = udr_pair(&s.t().to_owned(), &kl, &kl, 0.01);
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }
}
