use std::sync::Arc;

use ndarray::Array2;
use rpuvae::dataset::{generate, DatasetView, FactorSpec};
use rpuvae::seed::rng_for;
use rpuvae::vae::{
    loss_gradient_with_noise, standard_normal, tcvae_loss_with_noise, train_epoch, Architecture,
    Hyper, KlWeighting, LossSpec, TrainState, VaeParams,
};

fn toy_batch() -> (VaeParams, Array2<f64>, Array2<f64>) {
    let arch = Architecture {
        input_dim: 8,
        hidden: vec![6],
        latent_dim: 2,
    };
    let mut rng = rng_for(77, &[]);
    let p = VaeParams::init(arch, &mut rng);
    let x = Array2::from_shape_fn((5, 8), |(i, j)| f64::from(((i * 3 + j * 5) % 7) < 3));
    let eps = standard_normal(5, 2, &mut rng);
    (p, x, eps)
}

fn check_against_finite_differences(spec: LossSpec) {
    let (p, x, eps) = toy_batch();
    let (grad, _) = loss_gradient_with_noise(&p, x.view(), &spec, &eps).unwrap();
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for i in 0..p.as_slice().len() {
        let mut plus = p.clone();
        plus.as_mut_slice()[i] += h;
        let mut minus = p.clone();
        minus.as_mut_slice()[i] -= h;
        let fp = tcvae_loss_with_noise(&plus, x.view(), &spec, &eps).unwrap().total;
        let fm = tcvae_loss_with_noise(&minus, x.view(), &spec, &eps).unwrap().total;
        let fd = (fp - fm) / (2.0 * h);
        let denom = fd.abs().max(grad[i].abs()).max(1e-6);
        let rel = (fd - grad[i]).abs() / denom;
        worst = worst.max(rel);
        assert!(rel < 1e-4, "param {i}: analytic {} vs fd {fd} (rel {rel})", grad[i]);
    }
    eprintln!("worst relative error {worst:e}");
}

#[test]
fn gradient_matches_finite_differences_tc_weighting() {
    check_against_finite_differences(LossSpec::new(4.0, 30));
}

#[test]
fn gradient_matches_finite_differences_whole_kl() {
    check_against_finite_differences(LossSpec {
        beta: 2.0,
        dataset_size: 30,
        weighting: KlWeighting::WholeKl,
    });
}

fn planted() -> DatasetView {
    let ds = generate(&FactorSpec::new(&[("x", 8), ("y", 8)], 16, 16)).unwrap();
    DatasetView::full(Arc::new(ds))
}

#[test]
fn zero_learning_rate_leaves_params_unchanged() {
    let view = planted();
    let arch = Architecture::desk(view.num_pixels(), 4);
    let mut state = TrainState::new(arch, &mut rng_for(1, &[]));
    let before = state.params.clone();
    let hyper = Hyper {
        learning_rate: 0.0,
        batch_size: 16,
        beta: 1.0,
    };
    let loss = train_epoch(&mut state, &view, &hyper, KlWeighting::TotalCorrelation, &mut rng_for(2, &[])).unwrap();
    assert!(loss.is_finite());
    assert_eq!(state.params, before);
}

#[test]
fn loss_decreases_on_planted_data() {
    let view = planted();
    let arch = Architecture::desk(view.num_pixels(), 4);
    let mut state = TrainState::new(arch, &mut rng_for(3, &[]));
    let hyper = Hyper {
        learning_rate: 1e-3,
        batch_size: 16,
        beta: 1.0,
    };
    let mut rng = rng_for(4, &[]);
    let mut losses = Vec::new();
    for _ in 0..20 {
        losses.push(train_epoch(&mut state, &view, &hyper, KlWeighting::TotalCorrelation, &mut rng).unwrap().total);
    }
    assert!(losses[19] < 0.8 * losses[0], "{losses:?}");
}

#[test]
fn seeded_training_is_bit_identical() {
    let view = planted();
    let arch = Architecture::desk(view.num_pixels(), 4);
    let hyper = Hyper {
        learning_rate: 1e-3,
        batch_size: 10,
        beta: 3.0,
    };
    let run = || {
        let mut state = TrainState::new(arch.clone(), &mut rng_for(5, &[]));
        let mut rng = rng_for(6, &[]);
        for _ in 0..3 {
            train_epoch(&mut state, &view, &hyper, KlWeighting::TotalCorrelation, &mut rng).unwrap();
        }
        state
    };
    assert_eq!(run(), run());
}
