//! `tal`: generate synthetic datasets, train the two-subnet localizer,
//! detect, evaluate, and sweep architecture knobs.
//!
//! Exit codes: 0 on success, 1 on runtime errors, 2 on usage errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use tal_core::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use tal_core::config::{preset, PresetBundle, RunConfig, RunManifest};
use tal_core::detect::{detections_from_jsonl, detections_to_jsonl};
use tal_core::eval::{evaluate, ground_truths, metrics_csv, MatchRule};
use tal_core::model::{Network, TiouHeadMode};
use tal_core::nn::{ParamSet, PoolMethod};
use tal_core::pipeline::{detect_dataset, run_sweep, run_training, sweep_csv};
use tal_core::span_net::CaptureConfig;
use tal_core::synth::{
    dataset_fingerprint, generate, load_dataset, write_dataset, DataMode, Dataset,
    SyntheticConfig,
};
use tal_core::train::TrainPhase;

/// Marker for argument problems that clap itself cannot catch.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

#[derive(Parser)]
#[command(
    name = "tal",
    version,
    about = "Temporal action localization: synthetic data, training, detection, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (train and test splits for presets).
    Generate(GenerateArgs),
    /// Run the three-step training schedule and write checkpoints.
    Train(TrainArgs),
    /// Run the detection pipeline from a checkpoint.
    Detect(DetectArgs),
    /// Score a detections file against dataset annotations.
    Eval(EvalArgs),
    /// Train and evaluate a grid of (alpha, n, pooling) cells.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Preset name (tiny5 or pixel3); omit to describe the dataset by flags.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Class-pattern seed; defaults to the dataset seed. Splits that will
    /// be trained and evaluated together must share it.
    #[arg(long)]
    pattern_seed: Option<u64>,
    /// Output directory (presets write train/ and test/ under it).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    num_videos: usize,
    #[arg(long, default_value_t = 192)]
    frames: u32,
    #[arg(long, default_value_t = 4)]
    unit_length: u32,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 2)]
    instances: usize,
    #[arg(long, default_value_t = 20)]
    min_duration: u32,
    #[arg(long, default_value_t = 48)]
    max_duration: u32,
    /// feature or pixel
    #[arg(long, default_value = "feature")]
    mode: String,
    #[arg(long, default_value_t = 16)]
    feature_dim: usize,
    #[arg(long, default_value_t = 16)]
    height: usize,
    #[arg(long, default_value_t = 16)]
    width: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 24.0)]
    fps: f64,
}

#[derive(Args, Clone)]
struct ConfigOverrides {
    /// Segments per stage.
    #[arg(long)]
    alpha: Option<usize>,
    /// Recoded feature dimension.
    #[arg(long)]
    n: Option<usize>,
    /// average or max
    #[arg(long)]
    pooling: Option<String>,
    /// softmax or sigmoid
    #[arg(long)]
    tiou_head: Option<String>,
    /// Share span-network weights between the two streams.
    #[arg(long)]
    share_streams: bool,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    aux_weight: Option<f64>,
    #[arg(long)]
    keep_fraction: Option<f64>,
    #[arg(long)]
    w1: Option<f64>,
    #[arg(long)]
    w2: Option<f64>,
    #[arg(long)]
    iters1: Option<usize>,
    #[arg(long)]
    iters2: Option<usize>,
    #[arg(long)]
    iters3: Option<usize>,
    #[arg(long)]
    lr1: Option<f64>,
    #[arg(long)]
    lr2: Option<f64>,
    #[arg(long)]
    lr3: Option<f64>,
    #[arg(long)]
    nms: Option<f64>,
    #[arg(long)]
    pos_threshold: Option<f64>,
    #[arg(long)]
    bg_ceiling: Option<f64>,
}

impl ConfigOverrides {
    fn apply(&self, config: &mut RunConfig) -> Result<()> {
        if let Some(alpha) = self.alpha {
            config.model.alpha = alpha;
            config.model.capture = CaptureConfig::compact(alpha, config.model.recode_dim);
        }
        if let Some(n) = self.n {
            config.model.recode_dim = n;
            config.model.capture = CaptureConfig::compact(config.model.alpha, n);
        }
        if let Some(p) = &self.pooling {
            config.model.pooling = parse_pooling(p)?;
        }
        if let Some(t) = &self.tiou_head {
            config.model.tiou_head = match t.as_str() {
                "softmax" => TiouHeadMode::Softmax,
                "sigmoid" => TiouHeadMode::Sigmoid,
                other => return Err(usage(format!("unknown tiou head {other}"))),
            };
        }
        if self.share_streams {
            config.model.share_streams = true;
        }
        if let Some(b) = self.batch_size {
            config.train.batch_size = b;
        }
        if let Some(v) = self.lambda {
            config.train.weights.lambda_tiou = v;
        }
        if let Some(v) = self.mu {
            config.train.weights.mu_reg = v;
        }
        if let Some(v) = self.aux_weight {
            config.train.weights.aux_weight = v;
        }
        if let Some(v) = self.keep_fraction {
            config.train.keep_fraction = v;
        }
        if let Some(v) = self.w1 {
            config.train.step3_weights.0 = v;
        }
        if let Some(v) = self.w2 {
            config.train.step3_weights.1 = v;
        }
        let iters = [self.iters1, self.iters2, self.iters3];
        let lrs = [self.lr1, self.lr2, self.lr3];
        for i in 0..3 {
            if let Some(v) = iters[i] {
                config.train.phases[i].iterations = v;
            }
            if let Some(v) = lrs[i] {
                config.train.phases[i].learning_rate = v;
            }
        }
        if let Some(v) = self.nms {
            config.detect.nms_threshold = v;
        }
        if let Some(v) = self.pos_threshold {
            config.proposals.pos_threshold = v;
        }
        if let Some(v) = self.bg_ceiling {
            config.proposals.bg_ceiling = v;
        }
        Ok(())
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Preset providing the run configuration (and data when --data is absent).
    #[arg(long, default_value = "tiny5")]
    preset: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run output directory.
    #[arg(long)]
    out: PathBuf,
    /// Pre-generated training dataset directory; generated when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest path; defaults to manifest.json beside the checkpoint.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Output detections JSONL.
    #[arg(long)]
    out: PathBuf,
    /// Override the manifest's NMS threshold.
    #[arg(long)]
    nms: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    detections: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output metrics CSV.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated tIoU thresholds.
    #[arg(long)]
    thresholds: Option<String>,
    /// strict (tIoU > theta) or inclusive (tIoU >= theta)
    #[arg(long, default_value = "strict")]
    match_rule: String,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, default_value = "tiny5")]
    preset: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "1,3,9")]
    alphas: String,
    #[arg(long, default_value = "17")]
    ns: String,
    #[arg(long, default_value = "average,max")]
    methods: String,
    /// Pre-generated train dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Pre-generated test dataset directory.
    #[arg(long)]
    test_data: Option<PathBuf>,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

/// Resolve an output path against TAL_OUT_ROOT when it is relative.
fn resolve_out(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os("TAL_OUT_ROOT") {
        Some(root) => PathBuf::from(root).join(path),
        None => path.to_path_buf(),
    }
}

fn parse_pooling(s: &str) -> Result<PoolMethod> {
    match s {
        "average" => Ok(PoolMethod::Average),
        "max" => Ok(PoolMethod::Max),
        other => Err(usage(format!("unknown pooling method {other}"))),
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            p.trim()
                .parse::<T>()
                .map_err(|_| usage(format!("bad {what} entry {p}")))
        })
        .collect()
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let out = resolve_out(&args.out);
    if let Some(name) = &args.preset {
        let bundle = preset(name, args.seed).map_err(|e| usage(e.to_string()))?;
        for (split, cfg) in [("train", &bundle.train_data), ("test", &bundle.test_data)] {
            let dir = out.join(split);
            let dataset = generate(cfg)?;
            write_dataset(&dataset, cfg, &dir)?;
            println!(
                "wrote {} videos to {} (fingerprint {:#018x})",
                dataset.videos.len(),
                dir.display(),
                dataset_fingerprint(&dir)?
            );
        }
        return Ok(());
    }
    let mode = match args.mode.as_str() {
        "feature" => DataMode::Feature {
            dim: args.feature_dim,
        },
        "pixel" => DataMode::Pixel {
            height: args.height,
            width: args.width,
        },
        other => return Err(usage(format!("unknown mode {other}"))),
    };
    if args.min_duration > args.max_duration {
        return Err(usage("min duration exceeds max duration"));
    }
    let cfg = SyntheticConfig {
        seed: args.seed,
        pattern_seed: args.pattern_seed.unwrap_or(args.seed),
        num_videos: args.num_videos,
        frames_per_video: args.frames,
        unit_length: args.unit_length,
        num_classes: args.classes,
        instances_per_video: args.instances,
        duration_range: (args.min_duration, args.max_duration),
        mode,
        noise: args.noise,
        fps: args.fps,
    };
    let dataset = generate(&cfg)?;
    write_dataset(&dataset, &cfg, &out)?;
    println!(
        "wrote {} videos to {} (fingerprint {:#018x})",
        dataset.videos.len(),
        out.display(),
        dataset_fingerprint(&out)?
    );
    Ok(())
}

fn load_or_generate(
    data: &Option<PathBuf>,
    bundle: &PresetBundle,
    out: &Path,
) -> Result<(Dataset, u64)> {
    match data {
        Some(dir) => {
            let (dataset, _) = load_dataset(dir)?;
            Ok((dataset, dataset_fingerprint(dir)?))
        }
        None => {
            let dataset = generate(&bundle.train_data)?;
            let dir = out.join("train-data");
            write_dataset(&dataset, &bundle.train_data, &dir)?;
            Ok((dataset, dataset_fingerprint(&dir)?))
        }
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let out = resolve_out(&args.out);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut bundle = preset(&args.preset, args.seed).map_err(|e| usage(e.to_string()))?;
    bundle.run.seed = args.seed;
    bundle.run.train.seed = args.seed;
    args.overrides.apply(&mut bundle.run)?;

    let (dataset, fingerprint) = load_or_generate(&args.data, &bundle, &out)?;
    let manifest = RunManifest::new(bundle.run.clone(), fingerprint);
    manifest.write(&out.join("manifest.json"))?;

    let trace = bundle
        .run
        .model
        .capture
        .shape_trace(bundle.run.model.alpha, bundle.run.model.recode_dim)?;
    let trace_json: Vec<serde_json::Value> = trace
        .iter()
        .map(|(name, (c, h, w))| serde_json::json!({"layer": name, "shape": [c, h, w]}))
        .collect();
    fs::write(
        out.join("shape_trace.json"),
        serde_json::to_string_pretty(&trace_json)?,
    )?;

    let mut history = fs::File::create(out.join("history.jsonl"))?;
    let config_hash = manifest.config_hash;
    let out_dir = out.clone();
    let trained = run_training(
        &dataset,
        &bundle.run,
        Some(&mut history),
        |phase, params| {
            let name = match phase {
                TrainPhase::Step1 => "checkpoint_step1.talc",
                TrainPhase::Step2 => "checkpoint_step2.talc",
                TrainPhase::Step3 => "checkpoint_step3.talc",
            };
            let meta = CheckpointMeta {
                config_hash,
                phase,
                iteration: 0,
            };
            save_checkpoint(&out_dir.join(name), params, &meta)
                .expect("checkpoint write succeeds");
        },
    )?;
    let last = trained
        .outcome
        .history
        .last()
        .map(|r| r.principal + r.auxiliary)
        .unwrap_or(0.0);
    println!(
        "trained on {} pooled proposals ({} skipped short); final loss {last:.6}",
        trained.pool_size, trained.skipped_short
    );
    println!("run artifacts in {}", out.display());
    Ok(())
}

fn cmd_detect(args: DetectArgs) -> Result<()> {
    let manifest_path = args
        .manifest
        .clone()
        .unwrap_or_else(|| args.checkpoint.parent().unwrap_or(Path::new(".")).join("manifest.json"));
    let manifest = RunManifest::load(&manifest_path)?;
    let mut config = manifest.config.clone();
    if let Some(nms) = args.nms {
        config.detect.nms_threshold = nms;
    }
    let mut params = ParamSet::new();
    let network = Network::new(config.model.clone(), &mut params, config.seed)?;
    load_checkpoint(&args.checkpoint, &mut params, manifest.config_hash)?;
    let (dataset, _) = load_dataset(&args.data)?;
    let (detections, stats) = detect_dataset(&network, &params, &dataset, &config)?;
    let out = resolve_out(&args.out);
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&out, detections_to_jsonl(&detections))?;
    println!(
        "{} detections ({} proposals scored, {} suppressed, {} refinements dropped) -> {}",
        detections.len(),
        stats.proposals_scored,
        stats.suppressed,
        stats.refinement_dropped,
        out.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let text = fs::read_to_string(&args.detections)
        .with_context(|| format!("reading {}", args.detections.display()))?;
    let detections = detections_from_jsonl(&text)?;
    let (dataset, _) = load_dataset(&args.data)?;
    let ann = tal_core::synth::annotations(&dataset);
    let gts = ground_truths(&ann);
    let thresholds = match &args.thresholds {
        Some(s) => parse_list::<f64>(s, "threshold")?,
        None => vec![0.1, 0.3, 0.5, 0.7],
    };
    let rule = match args.match_rule.as_str() {
        "strict" => MatchRule::Strict,
        "inclusive" => MatchRule::Inclusive,
        other => return Err(usage(format!("unknown match rule {other}"))),
    };
    let result = evaluate(&detections, &gts, &thresholds, rule);
    let csv = metrics_csv(&result);
    let out = resolve_out(&args.out);
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&out, &csv)?;
    for (t, m) in result.thresholds.iter().zip(&result.map_per_threshold) {
        println!("mAP@{t:.2} = {m:.4}");
    }
    println!("average mAP[0.50:0.05:0.95] = {:.4}", result.average_map);
    if !result.skipped_classes.is_empty() {
        println!(
            "skipped classes without ground truth: {:?}",
            result.skipped_classes
        );
    }
    println!("metrics CSV -> {}", out.display());
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let mut bundle = preset(&args.preset, args.seed).map_err(|e| usage(e.to_string()))?;
    bundle.run.seed = args.seed;
    bundle.run.train.seed = args.seed;
    args.overrides.apply(&mut bundle.run)?;
    let alphas: Vec<usize> = parse_list(&args.alphas, "alpha")?;
    let ns: Vec<usize> = parse_list(&args.ns, "n")?;
    let methods = args
        .methods
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| parse_pooling(p.trim()))
        .collect::<Result<Vec<_>>>()?;
    if alphas.is_empty() || ns.is_empty() || methods.is_empty() {
        return Err(usage("sweep grid must include at least one alpha, n, and method"));
    }
    let train_data = match &args.data {
        Some(dir) => load_dataset(dir)?.0,
        None => generate(&bundle.train_data)?,
    };
    let test_data = match &args.test_data {
        Some(dir) => load_dataset(dir)?.0,
        None => generate(&bundle.test_data)?,
    };
    let mut stdout = std::io::stdout();
    let rows = run_sweep(
        &train_data,
        &test_data,
        &bundle.run,
        &alphas,
        &ns,
        &methods,
        Some(&mut stdout),
    )?;
    let csv = sweep_csv(&rows);
    let out = resolve_out(&args.out);
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&out, &csv)?;
    print!("{csv}");
    println!("sweep CSV -> {}", out.display());
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Train(args) => cmd_train(args),
        Command::Detect(args) => cmd_detect(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Sweep(args) => cmd_sweep(args),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if err.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
