use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use tfcse::audio::read_audio;
use tfcse::dataset::{feature_cache_path, load_recordings, read_manifest, FeatureParams};
use tfcse::experiment::{run_experiment, synthesize_dataset, AudioFormat, ExperimentConfig, SeChoice, SynthConfig};
use tfcse::features::{array, extract_features};
use tfcse::gradcheck::{build_suite, CheckSettings, Suite};
use tfcse::model::{checkpoint, count_parameters, SedModel};
use tfcse::se::{Aggregation, ExciteOp, SqueezeOp};
use tfcse::train::evaluate_recordings;

#[derive(Parser)]
#[command(name = "tfcse", version, about = "Multichannel sound event detection with SE attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multichannel dataset with a manifest.
    Synth(SynthArgs),
    /// Precompute feature arrays next to each audio file.
    Features(FeaturesArgs),
    /// Train and test over the manifest folds.
    Train(TrainArgs),
    /// Score a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Print the trainable parameter count for a configuration.
    Params(ModelArgs),
    /// Compare analytic and numerical gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// TOML file with generation parameters.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// wav or raw.
    #[arg(long)]
    format: Option<AudioFormat>,
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    sample_rate: Option<u32>,
    #[arg(long)]
    mics: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    max_overlap: Option<usize>,
    #[arg(long)]
    events: Option<usize>,
    #[arg(long)]
    min_event_seconds: Option<f64>,
    #[arg(long)]
    max_event_seconds: Option<f64>,
    /// Reverb time in seconds; 0 disables it.
    #[arg(long)]
    reverb: Option<f64>,
}

#[derive(Args)]
struct FeaturesArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// STFT window length.
    #[arg(long, default_value_t = 512)]
    window: usize,
}

/// Model flags shared by `train` and `params`. Unset flags keep the value
/// from `--config` or the default.
#[derive(Args)]
struct ModelArgs {
    /// TOML experiment file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// none, c, tf, tfc-concurrent or tfc-sequential.
    #[arg(long)]
    se: Option<SeChoice>,
    /// add, mul, max or concat.
    #[arg(long)]
    agg: Option<Aggregation>,
    /// Channel reduction ratio.
    #[arg(long)]
    r: Option<usize>,
    /// avg or max.
    #[arg(long)]
    squeeze: Option<SqueezeOp>,
    /// relu, sigmoid or tanh.
    #[arg(long)]
    excite: Option<ExciteOp>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    sequence_length: Option<usize>,
    /// Microphones, for `params`.
    #[arg(long, default_value_t = 8)]
    mics: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Test fold; all folds when omitted.
    #[arg(long)]
    split: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Only score recordings of this fold.
    #[arg(long)]
    fold: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, default_value_t = 1.0)]
    segment_seconds: f64,
    /// Also print per-class counts as CSV.
    #[arg(long)]
    per_class: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 2024)]
    seed: u64,
    /// ops, layers, se or model; all when omitted.
    #[arg(long)]
    suite: Option<String>,
}

fn experiment_config(args: &ModelArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(v) = args.se {
        cfg.se = v;
    }
    if let Some(v) = args.agg {
        cfg.agg = Some(v);
    }
    if let Some(v) = args.r {
        cfg.r = v;
    }
    if let Some(v) = args.squeeze {
        cfg.squeeze = v;
    }
    if let Some(v) = args.excite {
        cfg.excite = v;
    }
    if let Some(v) = args.window {
        cfg.window = v;
    }
    if let Some(v) = args.classes {
        cfg.classes = v;
    }
    if let Some(v) = args.sequence_length {
        cfg.sequence_length = v;
    }
    Ok(cfg)
}

fn synth(args: SynthArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => SynthConfig::load(p)?,
        None => SynthConfig::default(),
    };
    macro_rules! set {
        ($($flag:ident => $($field:ident).+),*) => {
            $(if let Some(v) = args.$flag { cfg.$($field).+ = v; })*
        };
    }
    set!(scenes => scenes, folds => folds, seed => seed, format => format,
        duration => scene.duration, sample_rate => scene.sample_rate, mics => scene.mics,
        classes => scene.classes, max_overlap => scene.max_overlap, events => scene.events,
        min_event_seconds => scene.min_event_seconds, max_event_seconds => scene.max_event_seconds,
        reverb => scene.reverb_seconds);
    let manifest = synthesize_dataset(&cfg, &args.out)?;
    println!("wrote {} scenes, manifest {}", cfg.scenes, manifest.display());
    Ok(())
}

fn features(args: FeaturesArgs) -> Result<()> {
    let entries = read_manifest(&args.manifest)?;
    for e in &entries {
        let audio = read_audio(&e.audio)?;
        let feats = extract_features(&audio, args.window)?;
        let path = feature_cache_path(&e.audio, args.window);
        array::save(&path, &feats)?;
        println!("{} {:?}", path.display(), feats.dims());
    }
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = experiment_config(&args.model)?;
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = args.$flag { cfg.$field = v; })*
        };
    }
    set!(epochs => epochs, batch => batch, lr => lr, patience => patience, seed => seed);
    if args.manifest.is_some() {
        cfg.manifest = args.manifest;
    }
    if args.output.is_some() {
        cfg.output = args.output;
    }
    if args.split.is_some() {
        cfg.split = args.split;
    }
    for w in cfg.warnings() {
        eprintln!("warning: {w}");
    }
    let report = run_experiment(&cfg, |fold, rec| println!("fold={fold} {}", rec.line()))?;
    print!("{}", report.table());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let model = checkpoint::load(&args.checkpoint)?;
    let mc = model.config();
    let params = FeatureParams {
        window: 2 * mc.freq_bins,
        sequence_length: mc.frames,
        classes: mc.classes,
    };
    let entries: Vec<_> = read_manifest(&args.manifest)?
        .into_iter()
        .filter(|e| args.fold.is_none_or(|f| e.fold == f))
        .collect();
    if entries.is_empty() {
        bail!("no recordings selected");
    }
    let recs = load_recordings(&entries, &params)?;
    let ev = evaluate_recordings(&model, &recs, args.threshold, args.segment_seconds)?;
    println!("recordings={} {}", recs.len(), ev.scores.record_line());
    println!("sequence_f1={:.4}", ev.sequences.f1());
    if args.per_class {
        print!("{}", ev.counts.class_csv());
    }
    Ok(())
}

fn params(args: ModelArgs) -> Result<()> {
    let cfg = experiment_config(&args)?;
    for w in cfg.warnings() {
        eprintln!("warning: {w}");
    }
    let model = SedModel::new(cfg.model_config(args.mics))?;
    println!("{}", count_parameters(&model));
    Ok(())
}

fn gradcheck(args: GradcheckArgs) -> Result<bool> {
    let suites = match args.suite.as_deref() {
        None => vec![Suite::Ops, Suite::Layers, Suite::Se, Suite::Model],
        Some("ops") => vec![Suite::Ops],
        Some("layers") => vec![Suite::Layers],
        Some("se") => vec![Suite::Se],
        Some("model") => vec![Suite::Model],
        Some(s) => bail!("unknown suite {s:?} (ops, layers, se, model)"),
    };
    let settings = CheckSettings::default();
    let mut ok = true;
    for suite in suites {
        for case in build_suite(suite, args.seed)? {
            let report = case.run(&settings)?;
            println!("{}", report.line());
            ok &= report.passed;
        }
    }
    Ok(ok)
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("TFCSE_THREADS") {
        let n: usize = v.parse().context("TFCSE_THREADS must be a positive integer")?;
        if n == 0 {
            bail!("TFCSE_THREADS must be a positive integer");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run() -> Result<bool> {
    init_threads()?;
    match Cli::parse().command {
        Command::Synth(a) => synth(a)?,
        Command::Features(a) => features(a)?,
        Command::Train(a) => train(a)?,
        Command::Eval(a) => eval(a)?,
        Command::Params(a) => params(a)?,
        Command::Gradcheck(a) => return gradcheck(a),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
