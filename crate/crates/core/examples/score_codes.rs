//! MIG and DCI on hand-built codes, from perfectly disentangled to fully
//! mixed, next to the binning effect of continuous codes.
//!
//! Usage: `cargo run --release --example score_codes`

use ndarray::{Array2, Axis};
use rpuvae::metrics::{dci_disentanglement, importance_from_mi, mig_per_factor, DEFAULT_BINS};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // two factors with 8 levels each, every combination 3 times
    let n = 8 * 8 * 3;
    let factors = Array2::from_shape_fn((n, 2), |(i, k)| if k == 0 { (i / 3) % 8 } else { i / 24 });
    let f = factors.mapv(|v| v as f64);
    let wobble = |i: usize| ((i * 37) % 101) as f64 / 101.0;

    let codes: Vec<(&str, Array2<f64>)> = vec![
        ("exact copy", f.clone()),
        ("copy plus noise latent", {
            let mut z = Array2::zeros((n, 3));
            z.slice_mut(ndarray::s![.., 0..2]).assign(&f);
            z.column_mut(2).iter_mut().enumerate().for_each(|(i, v)| *v = wobble(i));
            z
        }),
        ("within-level jitter", Array2::from_shape_fn((n, 2), |(i, k)| f[[i, k]] + 0.5 * wobble(i + k))),
        ("duplicated latents", f.select(Axis(1), &[0, 0, 1, 1])),
        ("rotated 45 degrees", Array2::from_shape_fn((n, 2), |(i, k)| {
            if k == 0 {
                f[[i, 0]] + f[[i, 1]]
            } else {
                f[[i, 0]] - f[[i, 1]]
            }
        })),
    ];
    println!("{:<24} {:>16} {:>6}", "code", "MIG per factor", "DCI");
    for (name, z) in codes {
        let per = mig_per_factor(z.view(), factors.view(), DEFAULT_BINS)?;
        let dci = dci_disentanglement(&importance_from_mi(z.view(), factors.view(), DEFAULT_BINS)?)?;
        println!("{name:<24} {:>7.3} {:>7.3} {dci:>7.3}", per[0], per[1]);
    }
    Ok(())
}
