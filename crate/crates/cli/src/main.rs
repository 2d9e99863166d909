//! `mtf`: synthesize capture data, train and evaluate lifting models, check
//! gradients and run ablations.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mtf_core::ablation::{ablation_suite, frame_counts, AblationConfig, Variant};
use mtf_core::data::split_sequences;
use mtf_core::eval::{evaluate, evaluate_grid_with, EvalGrid, EvalSpec, ModelPredictor};
use mtf_core::gradcheck::{model_check, primitive_suite, GradCheckReport};
use mtf_core::pose::{read_dataset, synthesize, write_dataset, CaptureDataset};
use mtf_core::train::{load_trained, save_outcome, train, TrainConfig};
use serde::Serialize;

use config::{absolute, apply_widths, RunConfig};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Missing(String),
    Numeric(String),
}

impl CliError {
    fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Missing(format!("{}: {e}", path.display()))
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Missing(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    fn to_json(&self) -> String {
        let (kind, message) = match self {
            CliError::Config(m) => ("config", m),
            CliError::Missing(m) => ("missing", m),
            CliError::Numeric(m) => ("numeric", m),
        };
        serde_json::json!({ "error": kind, "exit": self.code(), "message": message }).to_string()
    }
}

impl From<mtf_core::Error> for CliError {
    fn from(e: mtf_core::Error) -> Self {
        use mtf_core::Error as E;
        let message = e.to_string();
        match e {
            E::Io(_) | E::Corruption(_) | E::Format(_) => CliError::Missing(message),
            E::NonFinite { .. } | E::Divergence { .. } | E::DegenerateBatch(_) | E::BehindCamera { .. } | E::MotionGeneration { .. } => {
                CliError::Numeric(message)
            }
            E::Shape { .. } | E::InvalidMask(_) | E::Contract(_) | E::Json(_) => CliError::Config(message),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "mtf", version, about = "Multi-view temporal pose lifting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multi-view capture dataset.
    Synth(SynthArgs),
    /// Train a model and write its checkpoint and metrics log.
    Train(TrainArgs),
    /// Evaluate a checkpoint over view subsets and clip lengths.
    Eval(EvalArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Train and score model variants under identical seeds.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single-threaded, bit-reproducible execution.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args, Debug)]
struct ModelOverrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "mask-rate")]
    mask_rate: Option<f64>,
    #[arg(long = "t-full")]
    t_full: Option<usize>,
    /// Feature channels.
    #[arg(long)]
    c: Option<usize>,
    /// Fusion groups.
    #[arg(long)]
    d: Option<usize>,
    /// Channels per fusion group.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    seqs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Detector noise, pixels.
    #[arg(long = "noise-px")]
    noise_px: Option<f64>,
    #[arg(long)]
    occlusion: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelOverrides,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Training output directory or checkpoint directory.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Zero-based view indices; omit for the full view-count grid.
    #[arg(long, value_delimiter = ',')]
    views: Option<Vec<usize>>,
    /// Clip lengths; omit for every odd length up to the training length.
    #[arg(long, value_delimiter = ',')]
    t: Option<Vec<usize>>,
    /// Only score the sequences held out during training.
    #[arg(long = "held-out")]
    held_out: bool,
    /// Drop off-diagonal view pairs at this rate instead of fusing every view.
    #[arg(long = "mask-rate")]
    mask_rate: Option<f64>,
    /// Seed for evaluation-time view masks.
    #[arg(long)]
    seed: Option<u64>,
    /// CSV destination; the grid is always printed.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    c: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelOverrides,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.to_string().lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ").to_string();
            eprintln!("{}", CliError::Config(message).to_json());
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => run_synth(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Ablate(a) => run_ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.code())
        }
    }
}

fn load(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load_or_default(common.config.as_deref())?;
    cfg.deterministic |= common.deterministic;
    Ok(cfg)
}

fn required(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> CliResult<PathBuf> {
    let path = flag.or_else(|| fallback.clone()).ok_or_else(|| CliError::Config(format!("--{name} is required")))?;
    absolute(&path)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> CliResult<String> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Config(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

fn load_data(path: &Path) -> CliResult<CaptureDataset> {
    if !path.join("manifest.json").is_file() {
        return Err(CliError::Missing(format!("no dataset manifest in {}", path.display())));
    }
    Ok(read_dataset(path)?)
}

fn run_synth(a: SynthArgs) -> CliResult {
    let mut cfg = load(&a.common)?;
    let s = &mut cfg.synth;
    if let Some(seed) = a.seed.or(cfg.seed) {
        s.seed = seed;
    }
    s.num_sequences = a.seqs.unwrap_or(s.num_sequences);
    s.frames = a.frames.unwrap_or(s.frames);
    s.rig.num_views = a.views.unwrap_or(s.rig.num_views);
    s.rig.noise_sigma_px = a.noise_px.unwrap_or(s.rig.noise_sigma_px);
    s.rig.occlusion_rate = a.occlusion.unwrap_or(s.rig.occlusion_rate);
    if s.num_sequences == 0 || s.rig.num_views == 0 {
        return Err(CliError::Config("--seqs and --views must be positive".into()));
    }
    let out = required(a.out, &cfg.out, "out")?;
    cfg.out = Some(out.clone());
    let dataset = synthesize(&cfg.synth)?;
    write_dataset(&dataset, &out)?;
    write(&out.join("resolved_config.json"), to_json(&cfg)?)?;
    println!(
        "{}",
        serde_json::json!({ "dataset": out, "sequences": dataset.sequences.len(), "views": dataset.num_views, "frames": dataset.frames_per_sequence })
    );
    Ok(())
}

fn apply_overrides(train: &mut TrainConfig, root_seed: Option<u64>, o: &ModelOverrides) -> CliResult {
    if let Some(seed) = o.seed.or(root_seed) {
        train.seed = seed;
    }
    train.mask_rate = o.mask_rate.unwrap_or(train.mask_rate);
    train.t_full = o.t_full.unwrap_or(train.t_full);
    train.epochs = o.epochs.unwrap_or(train.epochs);
    apply_widths(&mut train.model, o.c, o.d, o.k)?;
    train.validate().map_err(|e| CliError::Config(e.to_string()))
}

fn run_train(a: TrainArgs) -> CliResult {
    let mut cfg = load(&a.common)?;
    apply_overrides(&mut cfg.train, cfg.seed, &a.model)?;
    let data = required(a.data, &cfg.data, "data")?;
    let out = required(a.out, &cfg.out, "out")?;
    (cfg.data, cfg.out) = (Some(data.clone()), Some(out.clone()));
    let dataset = load_data(&data)?;
    let outcome = train(&cfg.train, &dataset, |r| {
        eprintln!(
            "epoch {} lr {:.3e} train {:.2} mm eval {}",
            r.epoch,
            r.lr,
            r.train_mpjpe,
            r.eval_mpjpe.map_or("-".into(), |v| format!("{v:.2} mm"))
        );
    })?;
    save_outcome(&out, &cfg.train, &outcome)?;
    write(&out.join("resolved_config.json"), to_json(&cfg)?)?;
    let last = outcome.log.last().and_then(|r| r.eval_mpjpe);
    println!("{}", serde_json::json!({ "checkpoint": out.join("checkpoint"), "epochs": outcome.log.len(), "eval_mpjpe": last }));
    Ok(())
}

fn checkpoint_dir(path: &Path) -> CliResult<PathBuf> {
    let nested = path.join("checkpoint");
    let dir = if nested.join(mtf_core::checkpoint::MANIFEST).is_file() { nested } else { path.to_path_buf() };
    if !dir.join(mtf_core::checkpoint::MANIFEST).is_file() {
        return Err(CliError::Missing(format!("no checkpoint in {}", path.display())));
    }
    Ok(dir)
}

fn run_eval(a: EvalArgs) -> CliResult {
    let mut cfg = load(&a.common)?;
    let data = required(a.data, &cfg.data, "data")?;
    cfg.data = Some(data.clone());
    cfg.eval.held_out |= a.held_out;
    if let Some(m) = a.mask_rate {
        cfg.eval.mask_rate = m;
    }
    cfg.seed = a.seed.or(cfg.seed);
    if !(0.0..=1.0).contains(&cfg.eval.mask_rate) {
        return Err(CliError::Config(format!("mask rate {} outside [0, 1]", cfg.eval.mask_rate)));
    }
    let seed_value = cfg.seed.unwrap_or(0);
    let ckpt = checkpoint_dir(&absolute(&a.ckpt)?)?;
    let (trained, model, store) = load_trained(&ckpt)?;
    let dataset = load_data(&data)?;
    let sequences: Vec<usize> = if cfg.eval.held_out {
        split_sequences(dataset.sequences.len(), trained.val_fraction).1
    } else {
        (0..dataset.sequences.len()).collect()
    };
    if sequences.is_empty() {
        return Err(CliError::Config("no sequences selected for evaluation".into()));
    }
    let frames = a.t.unwrap_or_else(|| frame_counts(trained.t_full));
    if let Some(&t) = frames.iter().find(|&&t| t % 2 == 0 || t > model.config.max_frames) {
        return Err(CliError::Config(format!("clip length {t} must be odd and at most {}", model.config.max_frames)));
    }
    let predictor = ModelPredictor { model: &model, store: &store };
    let base = EvalSpec {
        mask_rate: cfg.eval.mask_rate,
        mask_seed: seed_value,
        ..EvalSpec::new(Vec::new(), 1, 0, cfg.eval.stride, cfg.eval.batch_size)
    };
    let grid = match &a.views {
        None => evaluate_grid_with(&predictor, &dataset, &sequences, &(1..=dataset.num_views).collect::<Vec<_>>(), &frames, &base)?,
        Some(views) => {
            let mut sorted = views.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if views.is_empty() || sorted.len() != views.len() || sorted.iter().any(|&v| v >= dataset.num_views) {
                return Err(CliError::Config(format!("--views {views:?} must be distinct indices below {}", dataset.num_views)));
            }
            let margin = frames.iter().copied().max().unwrap_or(1).max(trained.t_full) / 2;
            let row = frames
                .iter()
                .map(|&t| {
                    let spec = EvalSpec { views: views.clone(), frames: t, margin, ..base.clone() };
                    Ok(evaluate(&predictor, &dataset, &sequences, &spec)?.mpjpe)
                })
                .collect::<CliResult<Vec<f64>>>()?;
            EvalGrid { views: vec![views.len()], frames: frames.clone(), mpjpe: vec![row] }
        }
    };
    let csv = grid.to_csv();
    print!("{csv}");
    if let Some(out) = a.out {
        let out = absolute(&out)?;
        write(&out, &csv)?;
        write(&out.with_extension("config.json"), to_json(&cfg)?)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct GradcheckSummary<'a> {
    worst: f64,
    tolerance: f64,
    passed: bool,
    reports: &'a [GradCheckReport],
}

fn run_gradcheck(a: GradcheckArgs) -> CliResult {
    let mut cfg = load(&a.common)?;
    apply_widths(&mut cfg.gradcheck.model, a.c, a.d, a.k)?;
    let check = &cfg.gradcheck.check;
    let mut reports = primitive_suite(check)?;
    reports.push(model_check(&cfg.gradcheck.model, check)?);
    let mut worst: f64 = 0.0;
    for r in &reports {
        worst = worst.max(r.worst());
        println!("{} worst {:.3e} {}", r.label, r.worst(), if r.passed(check.tolerance) { "ok" } else { "FAIL" });
    }
    let passed = reports.iter().all(|r| r.passed(check.tolerance));
    println!("{}", serde_json::json!({ "worst_rel_err": worst, "tolerance": check.tolerance, "passed": passed }));
    if let Some(out) = a.out {
        let out = absolute(&out)?;
        cfg.out = Some(out.clone());
        let summary = GradcheckSummary { worst, tolerance: check.tolerance, passed, reports: &reports };
        write(&out.join("gradcheck.json"), to_json(&summary)?)?;
        write(&out.join("resolved_config.json"), to_json(&cfg)?)?;
    }
    if passed {
        Ok(())
    } else {
        Err(CliError::Numeric(format!("worst relative error {worst:.3e} exceeds {:.1e}", check.tolerance)))
    }
}

fn parse_variant(name: &str) -> CliResult<Variant> {
    Variant::ALL
        .into_iter()
        .find(|v| v.name() == name)
        .ok_or_else(|| CliError::Config(format!("unknown variant {name:?}")))
}

fn run_ablate(a: AblateArgs) -> CliResult {
    let mut cfg = load(&a.common)?;
    apply_overrides(&mut cfg.train, cfg.seed, &a.model)?;
    if let Some(names) = &a.variants {
        cfg.ablation.variants = names.iter().map(|n| parse_variant(n)).collect::<CliResult<_>>()?;
    }
    if let Some(seeds) = a.seeds {
        cfg.ablation.seeds = seeds;
    }
    let data = required(a.data, &cfg.data, "data")?;
    let out = required(a.out, &cfg.out, "out")?;
    (cfg.data, cfg.out) = (Some(data.clone()), Some(out.clone()));
    let dataset = load_data(&data)?;
    let suite = AblationConfig {
        train: cfg.train.clone(),
        variants: cfg.ablation.variants.clone(),
        seeds: cfg.ablation.seeds.clone(),
        eval_stride: cfg.ablation.eval_stride,
        eval_batch: cfg.ablation.eval_batch,
    };
    let report = ablation_suite(&suite, &dataset, |variant, seed, outcome| {
        eprintln!("{} seed {seed}: final train {:.2} mm", variant.name(), outcome.log.last().map_or(0.0, |r| r.train_mpjpe));
        let train = TrainConfig { model: variant.configure(&suite.train.model), seed, ..suite.train.clone() };
        save_outcome(&out.join(variant.name()).join(format!("seed{seed}")), &train, outcome)
    })?;
    let text = report.to_text();
    print!("{text}");
    write(&out.join("report.txt"), &text)?;
    write(&out.join("report.json"), to_json(&report)?)?;
    write(&out.join("resolved_config.json"), to_json(&cfg)?)?;
    Ok(())
}
