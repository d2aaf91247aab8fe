//! Renders a factorized sprite dataset and writes a mosaic of the first row
//! of every factor combination.
//!
//! Usage: `cargo run --release --example generate_dataset -- [out.pgm] [factor=levels ...]`
//!
//! With no factor arguments the 192-sample mini-dsprites layout is used.
//! Example: `generate_dataset sprites.pgm shape=2 scale=3 x=8 y=8`

use rpuvae::dataset::{generate, write_pgm, FactorSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "mosaic.pgm".into());
    let factors: Vec<(String, usize)> = args
        .map(|a| {
            let (name, n) = a.split_once('=').ok_or("factors are given as name=levels")?;
            Ok::<_, Box<dyn std::error::Error>>((name.to_string(), n.parse()?))
        })
        .collect::<Result<_, _>>()?;
    let spec = if factors.is_empty() {
        FactorSpec::mini_dsprites()
    } else {
        let pairs: Vec<(&str, usize)> = factors.iter().map(|(n, c)| (n.as_str(), *c)).collect();
        FactorSpec::new(&pairs, 16, 16)
    };
    let data = generate(&spec)?;
    println!("{} samples of {}x{} pixels", data.len(), spec.image_width, spec.image_height);
    for (f, c) in spec.factor_names().iter().zip(spec.cardinalities()) {
        println!("  {f:<8} {c} levels");
    }

    // one tile per sample, up to 16 per row and 256 in total
    let shown = data.len().min(256);
    let cols = shown.min(16);
    let rows = shown.div_ceil(cols);
    let (w, h) = (spec.image_width, spec.image_height);
    let mut pixels = vec![0.0; rows * h * cols * w];
    for i in 0..shown {
        let (r, c) = (i / cols, i % cols);
        for (p, &b) in data.image(i).iter().enumerate() {
            let (y, x) = (p / w, p % w);
            pixels[(r * h + y) * cols * w + c * w + x] = f64::from(b);
        }
    }
    write_pgm(std::path::Path::new(&out), cols * w, rows * h, &pixels)?;
    println!("sample 0 factors {:?}, sample {} factors {:?}", data.factors(0), shown - 1, data.factors(shown - 1));
    println!("wrote {out}");
    Ok(())
}
