use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use lesionseg::checkpoint::Checkpoint;
use lesionseg::config::TrainConfig;
use lesionseg::dataset::{export_dataset, load_split, make_synthetic_dataset, read_mask, write_mask_png, LoadResize, Sample, Split};
use lesionseg::evaluator::{predict_masks, report_from_predictions, write_overlays, Aggregation, EvalOptions};
use lesionseg::morphology::compose_contours;
use lesionseg::patching::{partition, DensityClass};
use lesionseg::trainer::{RunDirectory, Trainer};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Lesion segmentation with patch-wise contrastive losses.
#[derive(Parser)]
#[command(name = "lesionseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic fundus-like dataset.
    Synth(SynthArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Write the inner/outer contour masks of one ground-truth mask.
    Contours(ContourArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Training samples.
    #[arg(long, default_value_t = 20)]
    count: usize,
    /// Test samples; when nonzero the output gets train/ and test/ folders.
    #[arg(long, default_value_t = 0)]
    test_count: usize,
    #[arg(long, default_value_t = 256)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Key-value configuration file; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Train with α = β = 0.
    #[arg(long)]
    bce_only: bool,
    #[arg(long)]
    grid_n: Option<usize>,
    /// Continue from a checkpoint instead of starting fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = lesionseg::evaluator::DEFAULT_THRESHOLD)]
    threshold: f64,
    /// `per-image-mean` or `dataset-micro`; both are always in the JSON.
    #[arg(long, default_value = "per-image-mean")]
    aggregation: Aggregation,
    /// Also write GT/prediction overlay PNGs.
    #[arg(long)]
    overlays: bool,
    #[arg(long, default_value = "test")]
    split: Split,
}

#[derive(Args)]
struct ContourArgs {
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    grid_n: usize,
}

/// A failure caused by bad input rather than by the run itself.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

/// Library errors that describe invalid input become usage errors.
fn classify(e: lesionseg::Error) -> anyhow::Error {
    use lesionseg::Error as E;
    match e {
        E::InvalidConfig(_)
        | E::InvalidDescriptor(_)
        | E::NonDivisible { .. }
        | E::VersionMismatch { .. }
        | E::MissingMask { .. } => usage(e.to_string()),
        other => other.into(),
    }
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if !path.is_dir() {
        return Err(usage(format!("{what} '{}' does not exist", path.display())));
    }
    Ok(())
}

#[derive(Serialize)]
struct RunManifest {
    tool_version: String,
    command: String,
    config: String,
    dataset_fingerprint: String,
    dataset_samples: usize,
    /// Hash of the config snapshot and dataset fingerprint together.
    run_hash: String,
    artifacts: BTreeMap<String, String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content hash over ids, shapes, pixel values and masks, in id order.
fn dataset_fingerprint(samples: &[Sample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update((s.id.len() as u64).to_le_bytes());
        h.update(s.id.as_bytes());
        for d in s.image.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in s.image.iter() {
            h.update(v.to_le_bytes());
        }
        h.update(s.mask.iter().copied().collect::<Vec<u8>>());
    }
    hex::encode(h.finalize())
}

fn write_manifest(out: &Path, name: &str, m: &RunManifest) -> Result<()> {
    let path = out.join(name);
    let json = serde_json::to_string_pretty(m)?;
    fs::write(&path, json + "\n").with_context(|| format!("writing {}", path.display()))
}

fn manifest(command: &str, config: &TrainConfig, samples: &[Sample], artifacts: BTreeMap<String, String>) -> RunManifest {
    let config_text = config.to_flat_string();
    let fingerprint = dataset_fingerprint(samples);
    RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.to_string(),
        run_hash: sha256_hex(format!("{config_text}\n{fingerprint}").as_bytes()),
        config: config_text,
        dataset_fingerprint: fingerprint,
        dataset_samples: samples.len(),
        artifacts,
    }
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let all = make_synthetic_dataset(a.count + a.test_count, a.size, a.seed).map_err(classify)?;
    let (train, test) = all.split_at(a.count);
    if a.test_count == 0 {
        export_dataset(train, &a.out)?;
    } else {
        export_dataset(train, &a.out.join("train"))?;
        export_dataset(test, &a.out.join("test"))?;
    }
    println!(
        "wrote {} training and {} test samples ({}x{}) to {}",
        train.len(),
        test.len(),
        a.size,
        a.size,
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    require_dir(&a.data, "data root")?;
    let mut config = match &a.config {
        Some(p) => {
            if !p.is_file() {
                return Err(usage(format!("config file '{}' does not exist", p.display())));
            }
            TrainConfig::from_file(p).map_err(classify)?
        }
        None => TrainConfig::from_str_with_env("", std::env::vars()).map_err(classify)?,
    };
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    if a.bce_only {
        config.contrastive = config.contrastive.bce_only();
    }
    if let Some(n) = a.grid_n {
        config.grid_n = n;
    }
    config.validate().map_err(classify)?;

    // augmentation does its own (random) crop
    let resize = match config.augmentation {
        Some(_) => LoadResize::ShortSide(config.input_size),
        None => LoadResize::Square(config.input_size),
    };
    let samples = load_split(&a.data, Split::Train, resize).map_err(classify)?;
    if samples.is_empty() {
        return Err(usage(format!("no samples under '{}' (expected images/ and masks/)", a.data.display())));
    }
    let mut trainer = match &a.resume {
        Some(p) => {
            if !p.is_file() {
                return Err(usage(format!("checkpoint '{}' does not exist", p.display())));
            }
            let mut t = Trainer::from_checkpoint(Checkpoint::load(p).map_err(classify)?);
            t.config.epochs = config.epochs;
            t
        }
        None => Trainer::new(config.clone()).map_err(classify)?,
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    fs::write(a.out.join("config.toml"), trainer.config.to_flat_string())?;
    log::info!(
        "training on {} samples for {} epochs ({} parameters)",
        samples.len(),
        trainer.config.epochs,
        trainer.model.num_parameters()
    );
    let mut run = RunDirectory::open(&a.out)?;
    let log = trainer.fit(&samples, &mut run)?;
    drop(run);

    let artifacts = BTreeMap::from([
        ("config".to_string(), "config.toml".to_string()),
        ("log_jsonl".to_string(), "train_log.jsonl".to_string()),
        ("log_csv".to_string(), "train_log.csv".to_string()),
        ("checkpoint".to_string(), "checkpoints/final.lsck".to_string()),
    ]);
    write_manifest(&a.out, "manifest.json", &manifest("train", &trainer.config, &samples, artifacts))?;
    if let Some(last) = log.last() {
        println!(
            "{} steps; final loss {:.5} (bce {:.5}, density {:.5}, edge {:.5})",
            log.len(),
            last.total,
            last.l_sup,
            last.l_pd,
            last.l_pe
        );
    }
    println!("artifacts in {}", a.out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    if !a.checkpoint.is_file() {
        return Err(usage(format!("checkpoint '{}' does not exist", a.checkpoint.display())));
    }
    require_dir(&a.data, "data root")?;
    if !(0.0..=1.0).contains(&a.threshold) {
        return Err(usage(format!("threshold {} is outside [0, 1]", a.threshold)));
    }
    let ck = Checkpoint::load(&a.checkpoint).map_err(classify)?;
    let samples = load_split(&a.data, a.split, LoadResize::Square(ck.config.input_size)).map_err(classify)?;
    if samples.is_empty() {
        return Err(usage(format!("no samples under '{}'", a.data.display())));
    }
    let options = EvalOptions {
        threshold: a.threshold,
        aggregation: a.aggregation,
        input_size: Some(ck.config.input_size),
    };
    let preds = predict_masks(&ck.model, &samples, &options)?;
    let report = report_from_predictions(&preds, &options)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    fs::write(a.out.join("metrics.json"), report.to_json() + "\n")?;
    let table = report.to_table();
    fs::write(a.out.join("metrics.txt"), &table)?;
    let mut artifacts = BTreeMap::from([
        ("metrics_json".to_string(), "metrics.json".to_string()),
        ("metrics_table".to_string(), "metrics.txt".to_string()),
    ]);
    if a.overlays {
        write_overlays(&preds, &a.out.join("overlays"))?;
        artifacts.insert("overlays".to_string(), "overlays".to_string());
    }
    let mut m = manifest("eval", &ck.config, &samples, artifacts);
    m.artifacts
        .insert("checkpoint_sha256".to_string(), sha256_hex(&fs::read(&a.checkpoint)?));
    write_manifest(&a.out, "eval_manifest.json", &m)?;
    print!("{table}");
    Ok(())
}

fn cmd_contours(a: ContourArgs) -> Result<()> {
    if !a.mask.is_file() {
        return Err(usage(format!("mask '{}' does not exist", a.mask.display())));
    }
    let (mask, non_binary) = read_mask(&a.mask)?;
    if non_binary {
        log::warn!("{} is not binary; nonzero pixels are treated as foreground", a.mask.display());
    }
    let grid = partition(&mask, a.grid_n).map_err(classify)?;
    let contours = compose_contours(&grid, &mask)?;
    let inner_ok = contours.inner.iter().zip(mask.iter()).all(|(&i, &g)| i == 0 || g != 0);
    let outer_ok = contours.outer.iter().zip(mask.iter()).all(|(&o, &g)| o == 0 || g == 0);
    anyhow::ensure!(inner_ok && outer_ok, "contour invariants violated; nothing written");
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_mask_png(&contours.inner, &a.out.join("inner.png"))?;
    write_mask_png(&contours.outer, &a.out.join("outer.png"))?;
    fs::write(a.out.join("patches.csv"), grid.to_csv())?;
    let count = |m: &lesionseg::Mask| m.iter().filter(|&&v| v != 0).count();
    let occupied = grid.entries.iter().filter(|p| p.foreground > 0).count();
    let dense = grid.count(DensityClass::Dense);
    println!(
        "{dense} dense / {} sparse non-empty patches; inner {} px, outer {} px",
        occupied - dense,
        count(&contours.inner),
        count(&contours.outer)
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Contours(a) => cmd_contours(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
