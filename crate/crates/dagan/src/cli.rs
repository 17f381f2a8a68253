//! Command-line front end: `synth` makes reproducible synthetic datasets,
//! `train` runs an experiment, `eval` scores a checkpoint (optionally
//! emitting color-coded error maps), `predict` turns one image pair into a
//! change mask, and `ablate` trains every requested variant for comparison.
//!
//! Exit codes: 0 success, 2 configuration errors, 3 data errors, 4 numeric
//! failures.

use crate::config::ExperimentConfig;
use crate::data::{
    self, make_synthetic_dataset, BiTemporalSample, DatasetManifest, Split,
};
use crate::error::{Error, Result};
use crate::generator::Variant;
use crate::metrics::MetricReport;
use crate::trainer::{self, run_experiment, TrainState, DECISION_THRESHOLD};
use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Parser)]
#[command(
    name = "dagan",
    about = "Dual-attentive adversarial change detection on bi-temporal imagery",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config resolution shared by every model-running subcommand: a TOML file
/// or a named profile, then explicit flags, then dotted-path overrides.
#[derive(Args)]
struct ConfigArgs {
    /// Experiment config file (TOML).
    #[arg(long, conflicts_with = "profile")]
    config: Option<PathBuf>,
    /// Built-in profile: `desk` (minutes on a CPU) or `paper` (full scale).
    #[arg(long, default_value = "desk")]
    profile: String,
    /// Ablation variant: R, A, M, MC, or full.
    #[arg(long)]
    variant: Option<String>,
    /// RNG seed (overrides the config's).
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset root (overrides the config's `data.root`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Dotted-path overrides, e.g. `--set optim.base_lr=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::profile(&self.profile)?,
        };
        if let Some(v) = &self.variant {
            cfg.variant = Variant::from_str(v)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = &self.data {
            cfg.data.root = d.display().to_string();
        }
        for assignment in &self.overrides {
            cfg.apply_override(assignment)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic bi-temporal dataset with train/val/test splits.
    Synth {
        /// Output dataset root.
        #[arg(long)]
        out: PathBuf,
        /// Number of sample pairs.
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// Square tile size in pixels (multiple of 16).
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// RNG seed.
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Split ratios as `train,val,test`.
        #[arg(long, default_value = "0.7,0.15,0.15")]
        ratios: String,
    },
    /// Train a model and write checkpoints, loss log, and metric reports.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for checkpoints and logs.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint to load (fingerprint must match the resolved config).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Which split manifest to score.
        #[arg(long, default_value = "val")]
        split: String,
        /// Output directory for the report (and maps with `--maps`).
        #[arg(long)]
        out: PathBuf,
        /// Also write per-sample color-coded error maps.
        #[arg(long)]
        maps: bool,
    },
    /// Predict the change map for one image pair.
    Predict {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint to load.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Earlier image (PNG).
        #[arg(long)]
        t1: PathBuf,
        /// Later image (PNG).
        #[arg(long)]
        t2: PathBuf,
        /// Output directory for `mask.png` and `prob.png`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train several variants under one config and tabulate the results.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated variants to run.
        #[arg(long, default_value = "R,A,M,MC,full")]
        variants: String,
        /// Output directory (one subdirectory per variant).
        #[arg(long)]
        out: PathBuf,
    },
}

/// Entry point used by the binary; errors map to documented exit codes.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Clap prints its own message/help; --help and --version exit 0.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synth { out, count, size, seed, ratios } => {
            cmd_synth(&out, count, size, seed, &ratios)
        }
        Command::Train { config, out } => cmd_train(&config.resolve()?, &out),
        Command::Eval { config, checkpoint, split, out, maps } => {
            cmd_eval(&config.resolve()?, &checkpoint, &split, &out, maps)
        }
        Command::Predict { config, checkpoint, t1, t2, out } => {
            cmd_predict(&config.resolve()?, &checkpoint, &t1, &t2, &out)
        }
        Command::Ablate { config, variants, out } => {
            cmd_ablate(&config, &variants, &out)
        }
    }
}

fn parse_ratios(text: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("ratios '{text}' must be three numbers")))?;
    if parts.len() != 3 {
        return Err(Error::Config(format!(
            "ratios '{text}' must have exactly three components"
        )));
    }
    Ok((parts[0], parts[1], parts[2]))
}

fn cmd_synth(out: &Path, count: usize, size: usize, seed: u64, ratios: &str) -> Result<()> {
    if count == 0 {
        return Err(Error::Config("--count must be at least 1".into()));
    }
    if size < 16 || size % 16 != 0 {
        return Err(Error::Config(format!(
            "--size must be a multiple of 16 and at least 16, got {size}"
        )));
    }
    let ratios = parse_ratios(ratios)?;
    let samples = make_synthetic_dataset(count, size, seed);
    let manifests = data::write_dataset(out, &samples, ratios, seed)?;
    for m in &manifests {
        println!("{}: {} samples", m.split, m.samples.len());
    }
    println!("dataset written to {}", out.display());
    Ok(())
}

fn load_manifest_split(root: &Path, split: &str) -> Result<Vec<BiTemporalSample>> {
    let split: Split = match split {
        "train" => Split::Train,
        "val" => Split::Val,
        "test" => Split::Test,
        other => {
            return Err(Error::Config(format!(
                "unknown split '{other}' (expected train, val, or test)"
            )))
        }
    };
    let path = root.join(format!("{split}.jsonl"));
    if !path.exists() {
        return Err(Error::Data(format!("manifest not found: {}", path.display())));
    }
    let manifest = DatasetManifest::load(&path)?;
    if manifest.samples.is_empty() {
        return Err(Error::Data(format!("manifest {} is empty", path.display())));
    }
    data::load_split(root, &manifest)
}

fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let root = PathBuf::from(&cfg.data.root);
    let train = load_manifest_split(&root, "train")?;
    // A missing or empty validation split falls back to the training set.
    let val = load_manifest_split(&root, "val").unwrap_or_default();

    std::fs::create_dir_all(out)?;
    cfg.save(&out.join("config.toml"))?;
    let outcome = run_experiment(cfg, &train, &val, out)?;
    println!(
        "trained {} iterations x {} phase(s); best F1 {:.4}",
        cfg.optim.max_iter,
        1 + cfg.effective_self_train_rounds(),
        outcome.best_f1
    );
    println!("{}", outcome.final_report.to_text());
    println!("checkpoints: {}", out.display());
    Ok(())
}

fn cmd_eval(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    split: &str,
    out: &Path,
    maps: bool,
) -> Result<()> {
    let state = TrainState::resume(cfg, checkpoint)?;
    let root = PathBuf::from(&cfg.data.root);
    let samples = load_manifest_split(&root, split)?;

    std::fs::create_dir_all(out)?;
    let report = trainer::evaluate(&state.generator, &samples)?;
    std::fs::write(
        out.join(format!("report_{split}.json")),
        serde_json::to_string_pretty(&report).unwrap(),
    )?;
    if maps {
        let map_dir = out.join("maps");
        std::fs::create_dir_all(&map_dir)?;
        for s in &samples {
            let (prob, mask) = state.generator.predict(&s.image_t1, &s.image_t2)?;
            let _ = prob;
            write_error_map(&mask, &s.mask, &map_dir.join(format!("{}.png", s.id)))?;
        }
    }
    println!("{}", report.to_text());
    Ok(())
}

/// Color-coded error map: white = hit, red = false alarm, blue = miss,
/// black = correct rejection.
pub fn write_error_map(pred: &Array2<f64>, target: &Array2<f64>, path: &Path) -> Result<()> {
    if pred.dim() != target.dim() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let (h, w) = pred.dim();
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let p = pred[[y, x]] >= DECISION_THRESHOLD;
            let t = target[[y, x]] >= DECISION_THRESHOLD;
            let color = match (p, t) {
                (true, true) => [255u8, 255, 255],
                (true, false) => [255, 0, 0],
                (false, true) => [0, 0, 255],
                (false, false) => [0, 0, 0],
            };
            img.put_pixel(x as u32, y as u32, image::Rgb(color));
        }
    }
    img.save(path)?;
    Ok(())
}

/// Probability map as 16-bit grayscale PNG (0 -> 0.0, 65535 -> 1.0).
pub fn write_prob_map(prob: &Array2<f64>, path: &Path) -> Result<()> {
    let (h, w) = prob.dim();
    let mut img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = (prob[[y, x]].clamp(0.0, 1.0) * 65535.0).round() as u16;
            img.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    img.save(path)?;
    Ok(())
}

fn cmd_predict(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    t1: &Path,
    t2: &Path,
    out: &Path,
) -> Result<()> {
    let state = TrainState::resume(cfg, checkpoint)?;
    let image_t1 = data::png_to_image(t1)?;
    let image_t2 = data::png_to_image(t2)?;
    if image_t1.dim() != image_t2.dim() {
        return Err(Error::Data(format!(
            "image sizes differ: {:?} vs {:?}",
            image_t1.dim(),
            image_t2.dim()
        )));
    }
    let (prob, mask) = state.generator.predict(&image_t1, &image_t2)?;
    std::fs::create_dir_all(out)?;
    data::mask_to_png(&mask, &out.join("mask.png"))?;
    write_prob_map(&prob, &out.join("prob.png"))?;
    let changed = mask.iter().filter(|&&v| v >= 0.5).count();
    println!(
        "changed pixels: {changed} / {} ({:.2}%)",
        mask.len(),
        100.0 * changed as f64 / mask.len() as f64
    );
    println!("wrote {}/mask.png and {}/prob.png", out.display(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct AblationRow {
    variant: String,
    parameters: usize,
    best_f1: f64,
    #[serde(flatten)]
    report: MetricReport,
}

fn cmd_ablate(config_args: &ConfigArgs, variants: &str, out: &Path) -> Result<()> {
    let variants: Vec<Variant> = variants
        .split(',')
        .map(|v| Variant::from_str(v.trim()))
        .collect::<Result<_>>()?;
    if variants.is_empty() {
        return Err(Error::Config("no variants requested".into()));
    }

    std::fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    for variant in variants {
        let mut cfg = config_args.resolve()?;
        cfg.variant = variant;
        let root = PathBuf::from(&cfg.data.root);
        let train = load_manifest_split(&root, "train")?;
        let val = load_manifest_split(&root, "val").unwrap_or_default();
        let sub = out.join(format!("variant_{variant}"));
        let outcome = run_experiment(&cfg, &train, &val, &sub)?;
        rows.push(AblationRow {
            variant: variant.to_string(),
            parameters: outcome.state.generator.count_parameters(),
            best_f1: outcome.best_f1,
            report: outcome.final_report,
        });
    }

    std::fs::write(
        out.join("ablation.json"),
        serde_json::to_string_pretty(&rows).unwrap(),
    )?;
    println!("{:<8} {:>12} {:>8} {:>8} {:>8}", "variant", "params", "F1", "IoU", "kappa");
    for r in &rows {
        println!(
            "{:<8} {:>12} {:>8.4} {:>8.4} {:>8.4}",
            r.variant, r.parameters, r.report.f1, r.report.iou, r.report.kappa
        );
    }
    Ok(())
}
