use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use reraw::converter::{convert_batch, InferenceMode};
use reraw::dataset::{build_patch_dataset, sampling_config, PatchDataset, Split};
use reraw::imaging::SensorProfile;
use reraw::metrics::{display_psnr, evaluate_dataset};
use reraw::objective::LossKind;
use reraw::sampling::SamplingMethod;
use reraw::stats::{full_population, patch_population, DistributionReport};
use reraw::synth::{generate_dataset, SynthConfig};
use reraw::trainer::{TrainConfig, Trainer, FINAL_CHECKPOINT};

const EXIT_INPUT: u8 = 2;
const EXIT_INVARIANT: u8 = 3;

#[derive(Parser)]
#[command(name = "reraw", version, about = "Learned RGB to RAW reconstruction")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "RERAW_WORKERS")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic RGB/RAW pairs and a dataset manifest (test fixture).
    Synth(SynthArgs),
    /// Sample training patches from a dataset manifest.
    Prepare(PrepareArgs),
    /// Train a model on a patch dataset.
    Train(TrainArgs),
    /// Convert RGB PNGs to 16-bit RAW files.
    Convert(ConvertArgs),
    /// Score predicted RAWs against targets (PSNR / SSIM).
    Evaluate(EvaluateArgs),
    /// Per-channel pixel-intensity histograms of patch populations.
    Stats(StatsArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    count: usize,
    #[arg(long, default_value_t = 256)]
    width: usize,
    #[arg(long, default_value_t = 256)]
    height: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct PrepareArgs {
    /// Dataset manifest (dataset.toml).
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "stratified")]
    sampling: SamplingMethod,
    #[arg(long, default_value_t = 6)]
    patches_per_image: usize,
    #[arg(long, default_value_t = 10)]
    bins: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "train")]
    split: SplitArg,
}

#[derive(Args)]
struct TrainArgs {
    /// Patch dataset directory written by `prepare`.
    #[arg(long)]
    data: PathBuf,
    /// Training config (TOML); defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    loss: Option<LossKind>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    no_context: bool,
    #[arg(long)]
    no_scaling: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    restart_period: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Use the reduced desk-scale architecture.
    #[arg(long)]
    desk: bool,
    /// Continue from a training checkpoint.
    #[arg(long, conflicts_with = "config")]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct ConvertArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// PNG files or directories of PNGs.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Run each image in one pass instead of tiles.
    #[arg(long)]
    whole: bool,
    /// Sensor black level, overriding the checkpoint's profile.
    #[arg(long, requires = "white_level")]
    black_level: Option<u16>,
    #[arg(long, requires = "black_level")]
    white_level: Option<u16>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Directory with predicted RAWs and their raws.json.
    #[arg(long)]
    pred: PathBuf,
    /// Directory with target RAWs and their raws.json.
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    /// Dataset manifest for the full-image population.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Patch dataset directories; each becomes one population.
    #[arg(long = "patches")]
    patches: Vec<PathBuf>,
    #[arg(long, default_value_t = 32)]
    bins: usize,
    #[arg(long)]
    out: PathBuf,
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig { width: a.width, height: a.height, ..SynthConfig::default() };
    let m = generate_dataset(&a.out, a.count, &cfg, a.seed, a.test_fraction)?;
    let n_test = m.split_pairs(Split::Test).count();
    println!("wrote {} pairs ({} train, {n_test} test) to {}", m.pairs.len(), m.pairs.len() - n_test, a.out.display());
    Ok(())
}

fn prepare(a: PrepareArgs) -> Result<()> {
    let cfg = sampling_config(a.sampling, a.patches_per_image, a.bins);
    let ds = build_patch_dataset(&a.manifest, a.split.into(), &cfg, a.seed)?;
    ds.save(&a.out)?;
    for s in &ds.index.skipped {
        eprintln!("skipped {}: {}", s.source, s.reason);
    }
    println!("{} patches from {} images -> {}", ds.len(), ds.index.images.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let ds = PatchDataset::load(&a.data)?;
    let sensor = ds.index.sensor.clone();
    let mut trainer = match &a.resume {
        Some(ck) => Trainer::resume(ck, ds.pairs)?,
        None => {
            let mut cfg = match &a.config {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::default(),
            };
            if a.desk {
                let (heads, gammas) = (cfg.model.n_heads, cfg.model.gammas.clone());
                cfg.model = reraw::model::ReRawConfig { n_heads: heads, gammas, ..reraw::model::ReRawConfig::desk() };
            }
            if let Some(k) = a.loss {
                cfg.loss.kind = k;
            }
            if let Some(n) = a.heads {
                cfg.model = cfg.model.with_heads(n);
            }
            if a.no_context {
                cfg.model.use_context_encoder = false;
            }
            if a.no_scaling {
                cfg.model.use_scaling_encoder = false;
            }
            if let Some(e) = a.epochs {
                cfg.epochs = e;
            }
            if let Some(r) = a.restart_period {
                cfg.restart_period_epochs = r;
            }
            if let Some(b) = a.batch_size {
                cfg.batch_size = b;
            }
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            Trainer::new(cfg, ds.pairs, Some(sensor))?
        }
    };
    trainer = trainer.with_output(&a.out)?;
    trainer.config().save(&a.out.join("train.toml"))?;
    let report = trainer.run()?;
    match report.final_val_loss {
        Some(v) => println!("final validation loss: {v:.6}"),
        None => println!("final validation loss: n/a (no held-out patches)"),
    }
    println!("checkpoint: {}", a.out.join(FINAL_CHECKPOINT).display());
    Ok(())
}

fn collect_pngs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .with_context(|| format!("reading {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn convert(a: ConvertArgs) -> Result<()> {
    let images = collect_pngs(&a.inputs)?;
    let sensor = match (a.black_level, a.white_level) {
        (Some(b), Some(w)) => Some(SensorProfile::new("cli", b, w)?),
        _ => None,
    };
    let mode = if a.whole { InferenceMode::Whole } else { InferenceMode::Tiled };
    let report = convert_batch(&a.checkpoint, &images, &a.out, sensor, mode)?;
    for s in &report.skipped {
        eprintln!("skipped {}: {}", s.source, s.reason);
    }
    println!("converted {} images, skipped {} -> {}", report.outputs.len(), report.skipped.len(), a.out.display());
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let report = evaluate_dataset(&a.pred, &a.target)?;
    report.write(&a.out)?;
    println!(
        "{} images: mean PSNR {:.3} dB, mean SSIM {:.5} ({} excluded)",
        report.images.len(),
        display_psnr(report.mean_psnr_db),
        report.mean_ssim,
        report.excluded.len()
    );
    Ok(())
}

fn stats(a: StatsArgs) -> Result<()> {
    if a.manifest.is_none() && a.patches.is_empty() {
        bail!(reraw::Error::Input("stats needs --manifest and/or --patches".into()));
    }
    if a.bins == 0 {
        bail!(reraw::Error::Input("--bins must be positive".into()));
    }
    let mut report = DistributionReport::new(a.bins);
    if let Some(m) = &a.manifest {
        report.push("full", full_population(m, Split::Train, a.bins)?);
    }
    for dir in &a.patches {
        let ds = PatchDataset::load(dir)?;
        let label = ds.index.sampling.to_string();
        report.push(&label, patch_population(&ds, a.bins));
    }
    report.write(&a.out)?;
    for (s, _) in &report.populations {
        println!(
            "{:<12} pixels {:>10}  entropy bits R {:.4} G {:.4} B {:.4}",
            s.label, s.pixels, s.entropy_bits[0], s.entropy_bits[1], s.entropy_bits[2]
        );
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<reraw::Error>() {
        Some(e) if e.is_invariant_violation() => EXIT_INVARIANT,
        Some(_) => EXIT_INPUT,
        None => 1,
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global().context("configuring worker pool")?;
    }
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Prepare(a) => prepare(a),
        Command::Train(a) => train(a),
        Command::Convert(a) => convert(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Stats(a) => stats(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

