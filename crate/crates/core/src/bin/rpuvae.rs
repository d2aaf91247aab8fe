use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use rpuvae::dataset::{generate_with_budget, write_pgm, DatasetView};
use rpuvae::pbt::GenerationRecord;
use rpuvae::pipeline::{
    evaluate_ground_truth, PipelineError, Profile, RunConfig, RunReport, Runner,
};
use rpuvae::vae::{checkpoint, strided_positions, traverse, TrainState, VaeParams};

#[derive(Parser)]
#[command(name = "rpuvae", version, about = "Population-based disentangled VAE training")]
struct Cli {
    /// TOML config; missing keys take the profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, value_enum, default_value = "desk")]
    profile: ProfileArg,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Desk,
    Paper,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    /// Recursive label-and-reduce pipeline.
    Rpu,
    /// One unsupervised metaEpoch scored by UDR.
    PbtU,
    /// Supervised PBT against all ground-truth labels.
    PbtS,
    /// Supervised PBT on a label subset (`label_budget`, default 1000).
    PbtSemi,
}

#[derive(Subcommand)]
enum Command {
    /// Render the dataset: factor table and an image mosaic.
    Generate,
    /// Train and write checkpoints, logs and the run report.
    Train {
        #[arg(value_enum)]
        mode: Mode,
    },
    /// Score a checkpoint against ground truth.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated subset of mig, dci, kl.
        #[arg(long, default_value = "mig,dci,kl")]
        metrics: String,
    },
    /// Decode sweeps of every latent around one sample.
    Traverse {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long, default_value_t = 2.0)]
        span: f64,
        #[arg(long, default_value_t = 9)]
        steps: usize,
    },
}

enum Failure {
    Config(String),
    Diverged(String),
    Other(String),
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(m) => Failure::Config(m),
            PipelineError::Diverged { stage } => Failure::Diverged(stage),
            other => Failure::Other(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Other(e.to_string())
    }
}

/// Tracks every file written below the output directory.
struct Output {
    root: PathBuf,
    files: Vec<String>,
}

impl Output {
    fn new(root: &Path) -> Result<Self, Failure> {
        fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn path(&mut self, rel: &str) -> Result<PathBuf, Failure> {
        let p = self.root.join(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        self.files.push(rel.to_string());
        Ok(p)
    }

    fn write(&mut self, rel: &str, text: &str) -> Result<(), Failure> {
        let p = self.path(rel)?;
        fs::write(p, text)?;
        Ok(())
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let profile = match cli.profile {
        ProfileArg::Desk => Profile::Desk,
        ProfileArg::Paper => Profile::Paper,
    };
    let base = RunConfig::profile(profile);
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
            RunConfig::from_toml(&text, &base).map_err(|e| match e {
                PipelineError::Config(m) => Failure::Config(format!("{}: {m}", path.display())),
                other => Failure::from(other),
            })?
        }
        None => base,
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_view(cfg: &RunConfig) -> Result<DatasetView, Failure> {
    let ds = generate_with_budget(&cfg.dataset, cfg.memory_budget_bytes).map_err(|e| Failure::Config(e.to_string()))?;
    Ok(DatasetView::full(Arc::new(ds)))
}

fn load_checkpoint(path: &Path, cfg: &RunConfig) -> Result<VaeParams, Failure> {
    let state = checkpoint::load(path).map_err(|e| Failure::Other(format!("{}: {e}", path.display())))?;
    if state.params.arch().input_dim != cfg.dataset.num_pixels() {
        return Err(Failure::Config(format!(
            "checkpoint expects {} pixels, dataset has {}",
            state.params.arch().input_dim,
            cfg.dataset.num_pixels()
        )));
    }
    Ok(state.params)
}

/// Tiles equally sized images into one grid.
fn mosaic(tiles: &[Vec<f64>], cols: usize, w: usize, h: usize) -> (usize, usize, Vec<f64>) {
    let rows = tiles.len().div_ceil(cols);
    let (gw, gh) = (cols * w, rows * h);
    let mut px = vec![0.0; gw * gh];
    for (t, tile) in tiles.iter().enumerate() {
        let (r, c) = (t / cols, t % cols);
        for y in 0..h {
            for x in 0..w {
                px[(r * h + y) * gw + c * w + x] = tile[y * w + x];
            }
        }
    }
    (gw, gh, px)
}

fn write_log(out: &mut Output, rel: &str, records: &[GenerationRecord]) -> Result<(), Failure> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("plain record"));
        text.push('\n');
    }
    out.write(rel, &text)
}

fn write_checkpoint(out: &mut Output, rel: &str, params: &VaeParams) -> Result<(), Failure> {
    let p = out.path(rel)?;
    checkpoint::save(&p, &TrainState::from_params(params.clone()))?;
    Ok(())
}

fn cmd_generate(cfg: &RunConfig, out: &mut Output) -> Result<(), Failure> {
    let view = load_view(cfg)?;
    let ds = view.parent();
    let spec = ds.spec();
    let mut csv = format!("index,{}\n", spec.factor_names().join(","));
    for i in 0..ds.len() {
        let f: Vec<String> = ds.factors(i).iter().map(ToString::to_string).collect();
        csv.push_str(&format!("{i},{}\n", f.join(",")));
    }
    out.write("dataset/factors.csv", &csv)?;
    let shown = strided_positions(ds.len(), 256);
    let tiles: Vec<Vec<f64>> = shown
        .iter()
        .map(|&i| ds.image(i).iter().map(|&b| f64::from(b)).collect())
        .collect();
    let (w, h, px) = mosaic(&tiles, 16, spec.image_width, spec.image_height);
    let p = out.path("dataset/mosaic.pgm")?;
    write_pgm(&p, w, h, &px)?;
    out.write(
        "dataset/spec.toml",
        &toml::to_string(spec).expect("spec is representable"),
    )?;
    eprintln!("{} samples, {} factors", ds.len(), spec.num_factors());
    Ok(())
}

fn cmd_train(cfg: RunConfig, mode: Mode, out: &mut Output) -> Result<RunReport, Failure> {
    let mut cfg = cfg;
    let name = match mode {
        Mode::Rpu => "rpu",
        Mode::PbtU => "pbt-u",
        Mode::PbtS => "pbt-s",
        Mode::PbtSemi => "pbt-semi",
    };
    let view = load_view(&cfg)?;
    match mode {
        Mode::PbtS => cfg.label_budget = None,
        Mode::PbtSemi => {
            cfg.label_budget = Some(cfg.label_budget.unwrap_or(1000.min(view.len())));
        }
        _ => {}
    }
    let mut runner = Runner::with_view(cfg.clone(), view).with_observer(|e| eprintln!("{e:?}"));
    let result = match mode {
        Mode::Rpu => runner.run_rpu(),
        Mode::PbtU => runner.run_unsupervised(),
        Mode::PbtS | Mode::PbtSemi => runner.run_supervised(),
    };
    // stages that finished are written even when a later one failed
    for stage in &runner.stages {
        if let Some(p) = &stage.best_params {
            write_checkpoint(out, &format!("checkpoints/{}.ckpt", stage.stage), p)?;
        }
        write_log(out, &format!("logs/{}.ndjson", stage.stage), &stage.log)?;
    }
    if let Some(s) = &runner.supervised {
        write_log(out, &format!("logs/{}.ndjson", s.summary.stage), &s.log)?;
    }
    for (k, (_, trace)) in runner.reductions.iter().enumerate() {
        out.write(
            &format!("reductions/{k:02}.json"),
            &serde_json::to_string(trace).expect("plain trace"),
        )?;
    }
    if !runner.store.is_empty() {
        out.write(
            "labels.json",
            &serde_json::to_string(&runner.store).expect("plain store"),
        )?;
    }
    let params = result?;
    write_checkpoint(out, "checkpoints/final.ckpt", &params)?;
    let mut report = runner.report(name, Some(&params));
    if let Some(m) = &report.final_metrics {
        eprintln!("final MIG {:.4}  DCI {:.4}", m.mig, m.dci_disentanglement);
    }
    out.files.push("report.json".into());
    report.manifest = out.files.clone();
    out.files.pop();
    Ok(report)
}

fn cmd_eval(cfg: &RunConfig, ckpt: &Path, which: &str, out: &mut Output) -> Result<(), Failure> {
    let view = load_view(cfg)?;
    let params = load_checkpoint(ckpt, cfg)?;
    let mut doc = serde_json::Map::new();
    let gt = evaluate_ground_truth(&params, &view, cfg.n_bins)?;
    for m in which.split(',').map(str::trim).filter(|m| !m.is_empty()) {
        let v = match m {
            "mig" => serde_json::json!({ "mean": gt.mig, "per_factor": gt.mig_per_factor }),
            "dci" => serde_json::json!(gt.dci_disentanglement),
            "kl" => {
                let s = rpuvae::vae::latent_stats(&params, &view, cfg.udr_eval_samples).map_err(PipelineError::from)?;
                serde_json::json!(s.kl)
            }
            "udr" => {
                return Err(Failure::Config(
                    "udr compares several models; evaluate a training run instead".into(),
                ))
            }
            other => return Err(Failure::Config(format!("unknown metric {other}"))),
        };
        doc.insert(m.to_string(), v);
    }
    let text = serde_json::to_string_pretty(&doc).expect("plain json");
    println!("{text}");
    out.write("eval.json", &text)?;
    Ok(())
}

fn cmd_traverse(cfg: &RunConfig, ckpt: &Path, sample: usize, span: f64, steps: usize, out: &mut Output) -> Result<(), Failure> {
    if steps < 2 {
        return Err(Failure::Config(format!("steps must be at least 2, got {steps}")));
    }
    let view = load_view(cfg)?;
    if sample >= view.len() {
        return Err(Failure::Config(format!("sample {sample} out of range for {} samples", view.len())));
    }
    let params = load_checkpoint(ckpt, cfg)?;
    let base: Vec<f64> = view.image(sample).iter().map(|&b| f64::from(b)).collect();
    let mut tiles = Vec::new();
    for l in 0..params.latent_dim() {
        tiles.extend(traverse(&params, &base, l, span, steps).map_err(PipelineError::from)?);
    }
    let (w, h, px) = mosaic(&tiles, steps, cfg.dataset.image_width, cfg.dataset.image_height);
    let p = out.path(&format!("traversal_{sample}.pgm"))?;
    write_pgm(&p, w, h, &px)?;
    eprintln!("{} latents x {steps} steps -> {}", params.latent_dim(), p.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Failure::Other(e.to_string()))?;
    }
    let cfg = load_config(cli)?;
    eprintln!("# resolved config\n{}", cfg.to_toml());
    let mut out = Output::new(&cli.out)?;
    match &cli.command {
        Command::Generate => cmd_generate(&cfg, &mut out)?,
        Command::Train { mode } => {
            out.write("config.toml", &cfg.to_toml())?;
            let report = cmd_train(cfg, *mode, &mut out);
            let report = match report {
                Ok(r) => r,
                Err(e) => {
                    // keep a manifest of the partial output
                    let mut f = fs::File::create(out.root.join("manifest.txt"))?;
                    writeln!(f, "{}", out.files.join("\n"))?;
                    return Err(e);
                }
            };
            fs::write(out.root.join("report.json"), report.to_json())?;
            eprintln!("report: {}", out.root.join("report.json").display());
        }
        Command::Eval { checkpoint, metrics } => cmd_eval(&cfg, checkpoint, metrics, &mut out)?,
        Command::Traverse { checkpoint, sample, span, steps } => {
            cmd_traverse(&cfg, checkpoint, *sample, *span, *steps, &mut out)?
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Diverged(stage)) => {
            eprintln!("error: training diverged in stage {stage}");
            ExitCode::from(3)
        }
        Err(Failure::Other(m)) => {
            eprintln!("error: {m}");
            ExitCode::FAILURE
        }
    }
}
