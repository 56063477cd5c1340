//! Command-line entry points: synthetic dataset generation, training,
//! evaluation, inference, and the relighting ablation. All model and run
//! behavior lives in the library; this module only parses arguments, wires
//! files to library calls, and reports results.

use crate::config::{ablation_run, parse_override, ExperimentConfig};
use crate::data::{
    image_to_tensor, index_dataset, load_image_rgb, save_label_png, save_rgb_png, synth_generate,
    AugConfig, ClassTaxonomy, DatasetLayout, Sample, Split,
};
use crate::metrics::argmax_predictions;
use crate::netcore::Mode;
use crate::training::{config_digest, fit, Checkpoint, FitInputs, TrainState};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ndarray::s;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

#[derive(Parser)]
#[command(
    name = "nightseg",
    version,
    about = "Relight-then-segment pipeline for night street scenes"
)]
struct Cli {
    /// Worker threads for the data-parallel kernels: 0 uses every core,
    /// 1 forces the sequential path. Results are identical either way.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (train and val splits).
    Synth(SynthArgs),
    /// Train a model from a config file.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a labeled split.
    Eval(EvalArgs),
    /// Segment image files with a trained checkpoint.
    Infer(InferArgs),
    /// Train the same config with relighting on and off, and compare.
    Ablate(TrainArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Dataset root to create; gets images/{train,val} and labels/{train,val}.
    #[arg(long)]
    out: PathBuf,
    /// Image/label pairs per split.
    #[arg(long, default_value_t = 16)]
    pairs: usize,
    /// Square image edge length; must be a multiple of 32.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Number of classes drawn, 2..=19.
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Apply the night transform (gamma, dimming, lamp glow, noise).
    #[arg(long)]
    night: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Config override as a dotted key and TOML value, e.g.
    /// `--override train.base_lr=0.005`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run directory; defaults to a timestamp+config-hash name under
    /// $NIGHTSEG_RUN_ROOT (or ./runs).
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Config file; defaults to the document echoed inside the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Dataset root; defaults to the config's eval (or source) dataset.
    #[arg(long)]
    root: Option<PathBuf>,
    /// Dataset layout: cityscapes|darkzurich|nightcity|synthetic.
    #[arg(long)]
    layout: Option<String>,
    /// Split: train|val|test.
    #[arg(long)]
    split: Option<String>,
    /// Also write the metrics report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; each input gets a train-id map and a colorized map.
    #[arg(long)]
    out: PathBuf,
    /// Also write the relit image next to each segmentation map.
    #[arg(long)]
    relight_preview: bool,
    /// Image files to segment. Each file is processed independently; a
    /// failure on one is reported and does not stop the rest.
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

pub fn run() -> ExitCode {
    let cli = Cli::parse();
    configure_workers(cli.workers);
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Ablate(args) => cmd_ablate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn configure_workers(workers: usize) {
    if workers == 1 {
        crate::par::set_parallel(false);
        return;
    }
    #[cfg(feature = "parallel")]
    {
        // 0 lets rayon size the pool to the machine. A second call (tests
        // in one process) fails harmlessly — the pool is already sized.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global();
    }
}

/// UTC `yyyymmdd-hhmmss` from the system clock, for run directory names.
fn utc_stamp() -> String {
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let (h, min, s) = (secs / 3600 % 24, secs / 60 % 60, secs % 60);
    // Civil date from day number (Gregorian, era-based).
    let z = (secs / 86400) as i64 + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z.rem_euclid(146_097);
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = doy - (153 * mp + 2) / 5 + 1;
    let m = if mp < 10 { mp + 3 } else { mp - 9 };
    let y = yoe + era * 400 + i64::from(m <= 2);
    format!("{y:04}{m:02}{d:02}-{h:02}{min:02}{s:02}")
}

/// Explicit directory if given, otherwise `{root}/{stamp}-{hash12}` where
/// the root comes from $NIGHTSEG_RUN_ROOT (default ./runs) and the hash
/// ties the directory to the exact config document.
fn resolve_run_dir(explicit: Option<PathBuf>, config_echo: &str) -> PathBuf {
    if let Some(dir) = explicit {
        return dir;
    }
    let root = std::env::var_os("NIGHTSEG_RUN_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    let digest = config_digest(config_echo);
    root.join(format!("{}-{}", utc_stamp(), &digest[..12]))
}

fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let base = ExperimentConfig::load(path)
        .with_context(|| format!("loading config {}", path.display()))?;
    apply_overrides(&base, overrides)
}

fn apply_overrides(base: &ExperimentConfig, overrides: &[String]) -> Result<ExperimentConfig> {
    let parsed = overrides
        .iter()
        .map(|o| parse_override(o))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(base.with_overrides(&parsed)?)
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    // The val split draws from a distinct seed stream so the two splits
    // never share scenes.
    const VAL_STREAM: u64 = 0x9E37_79B9_7F4A_7C15;
    for (split, seed) in [(Split::Train, args.seed), (Split::Val, args.seed ^ VAL_STREAM)] {
        let samples = synth_generate(
            &args.out,
            split,
            args.pairs,
            args.size,
            args.classes,
            seed,
            args.night,
        )?;
        println!(
            "wrote {} {} pairs ({}x{}, {} classes{}) under {}",
            samples.len(),
            split.dir_name(),
            args.size,
            args.size,
            args.classes,
            if args.night { ", night" } else { "" },
            args.out.display()
        );
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = load_config(&args.config, &args.overrides)?;
    let echo = cfg.to_toml()?;
    let run_dir = resolve_run_dir(args.run_dir, &echo);
    let inputs = FitInputs {
        train: &cfg.train,
        relight: &cfg.relight,
        seg: &cfg.seg,
        config_echo: &echo,
    };
    println!("training into {}", run_dir.display());
    let report = fit(&inputs, &run_dir)?;
    println!(
        "{} iterations; final mIoU {:.4}, best {:.4}",
        report.iterations, report.final_miou, report.best_miou
    );
    println!("sample order hash {}", report.sample_order_hash);
    println!(
        "checkpoints: {} (final), {} (best)",
        report.final_checkpoint.display(),
        report.best_checkpoint.display()
    );
    Ok(())
}

fn cmd_ablate(args: TrainArgs) -> Result<()> {
    let cfg = load_config(&args.config, &args.overrides)?;
    let echo = cfg.to_toml()?;
    let run_dir = resolve_run_dir(args.run_dir, &echo);
    println!("running relighting ablation into {}", run_dir.display());
    let report = ablation_run(&cfg, &run_dir)?;
    println!(
        "with relighting:    mIoU {:.4} (best {:.4})",
        report.with_relight.miou, report.with_relight.best_miou
    );
    println!(
        "without relighting: mIoU {:.4} (best {:.4})",
        report.without_relight.miou, report.without_relight.best_miou
    );
    println!("delta (with - without): {:+.4}", report.miou_delta);
    println!("report: {}", run_dir.join("ablation.json").display());
    Ok(())
}

/// Loads the checkpoint plus its governing config (from the echo unless a
/// file is given), applies overrides, rebuilds the networks, and restores.
fn restore_state(
    checkpoint: &Path,
    config: Option<&Path>,
    overrides: &[String],
) -> Result<(TrainState, ExperimentConfig, Checkpoint)> {
    let ckpt = Checkpoint::load(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let base = match config {
        Some(path) => ExperimentConfig::load(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => ExperimentConfig::from_toml_str(&ckpt.config_echo)
            .context("parsing the config echoed in the checkpoint")?,
    };
    let cfg = apply_overrides(&base, overrides)?;
    let mut state = TrainState::new(&cfg.train, &cfg.relight, &cfg.seg)?;
    state.restore_checkpoint(&ckpt)?;
    Ok((state, cfg, ckpt))
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let (mut state, cfg, _) = restore_state(&args.checkpoint, args.config.as_deref(), &args.overrides)?;

    let mut spec = cfg.train.eval.clone().unwrap_or_else(|| cfg.train.source.clone());
    if let Some(root) = args.root {
        spec.root = root;
    }
    if let Some(layout) = &args.layout {
        spec.layout = DatasetLayout::from_str(layout).map_err(|e| anyhow::anyhow!(e))?;
    }
    if let Some(split) = &args.split {
        spec.split = Split::from_str(split).map_err(|e| anyhow::anyhow!(e))?;
    }

    let indexed = index_dataset(&spec.root, spec.layout, spec.split)?;
    let samples: Vec<Sample> = indexed
        .samples
        .into_iter()
        .filter(|s| s.label_path.is_some())
        .collect();
    if samples.is_empty() {
        bail!("no labeled samples under {}", spec.root.display());
    }
    let taxonomy = ClassTaxonomy::default();
    let report = state.evaluate(&samples, spec.layout, &taxonomy)?;
    println!("{}", report.text_table());
    if let Some(path) = args.json {
        let rendered = serde_json::to_string_pretty(&report)?;
        std::fs::write(&path, rendered)
            .with_context(|| format!("writing {}", path.display()))?;
        println!("report written to {}", path.display());
    }
    Ok(())
}

fn normalize_channels(x: &mut crate::tensor::TensorImage<f32>, aug: &AugConfig) {
    for ch in 0..3 {
        x.slice_mut(s![.., ch, .., ..])
            .mapv_inplace(|v| aug.normalize_pixel(ch, v));
    }
}

fn infer_one(
    state: &mut TrainState,
    aug: &AugConfig,
    taxonomy: &ClassTaxonomy,
    image_path: &Path,
    out_dir: &Path,
    relight_preview: bool,
) -> Result<()> {
    let raster = load_image_rgb(image_path)?;
    let mut x = image_to_tensor(&raster);
    normalize_channels(&mut x, aug);

    let relit = if state.cfg.relight_enabled {
        state
            .relight
            .forward(&x, Mode::Eval, false)
            .with_context(|| format!("{}: relighting pass", image_path.display()))?
    } else {
        x.clone()
    };
    let logits = state
        .seg
        .forward(&relit, Mode::Eval, false)
        .with_context(|| format!("{}: segmentation pass", image_path.display()))?;
    let prediction = argmax_predictions(&logits)
        .pop()
        .expect("one image in, one prediction out");

    let stem = image_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("image");
    let ids_path = out_dir.join(format!("{stem}_ids.png"));
    save_label_png(&ids_path, prediction.data())?;
    let seg_path = out_dir.join(format!("{stem}_seg.png"));
    save_rgb_png(&seg_path, &prediction.colorize(taxonomy))?;
    println!(
        "{} -> {}, {}",
        image_path.display(),
        ids_path.display(),
        seg_path.display()
    );

    if relight_preview {
        let preview = crate::data::denormalize_to_raster(&relit, aug.mean, aug.std);
        let preview_path = out_dir.join(format!("{stem}_relight.png"));
        save_rgb_png(&preview_path, &preview)?;
        println!("{} -> {}", image_path.display(), preview_path.display());
    }
    Ok(())
}

fn cmd_infer(args: InferArgs) -> Result<()> {
    let (mut state, cfg, _) = restore_state(&args.checkpoint, args.config.as_deref(), &args.overrides)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let taxonomy = ClassTaxonomy::default();

    let mut failures = 0usize;
    for image_path in &args.images {
        if let Err(e) = infer_one(
            &mut state,
            &cfg.train.aug,
            &taxonomy,
            image_path,
            &args.out,
            args.relight_preview,
        ) {
            eprintln!("error: {e:#}");
            failures += 1;
        }
    }
    if failures > 0 {
        bail!("{failures} of {} images failed", args.images.len());
    }
    Ok(())
}
