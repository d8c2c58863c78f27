//! `mmrinet`: parameter accounting, inference, gradient checks, toy
//! training, metric evaluation and scan benchmarks.
//!
//! Exit codes: 0 success, 1 other failure, 2 invalid input or configuration,
//! 3 numerical failure (a failed gradient check or a non-finite loss).

mod config;

use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mmrinet::bench::{bench_scan, BenchConfig};
use mmrinet::data::{load_volume, save_volume, synthetic_case, Volume};
use mmrinet::gradcheck::suite::{self, Scope, SuiteOptions};
use mmrinet::metrics::{region_extract, MetricsReport};
use mmrinet::model::{load_checkpoint, save_checkpoint, MmriNet, ModelConfig, ParamBreakdown};
use mmrinet::nn::{Ctx, ForwardOptions};
use mmrinet::ops::sigmoid;
use mmrinet::train::{evaluate, train, Sample};
use mmrinet::Tape;
use serde::Serialize;

use config::RunConfig;

/// Bad input, flags or configuration (exit code 2).
#[derive(Debug)]
pub struct Validation(pub String);

/// A check that ran to completion and failed numerically (exit code 3).
#[derive(Debug)]
pub struct Numerical(pub String);

impl fmt::Display for Validation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for Numerical {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Validation {}
impl std::error::Error for Numerical {}

#[derive(Parser)]
#[command(name = "mmrinet", version, about = "Brain tumor segmentation network toolkit")]
struct Cli {
    /// Worker threads for operator parallelism (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Print JSON instead of human-readable text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Count trainable parameters per submodule.
    Paramcount(RunArgs),
    /// Overfit a single volume and write a checkpoint and loss log.
    TrainToy(TrainArgs),
    /// Segment an image volume with a trained checkpoint.
    Infer(InferArgs),
    /// Dice and HD95 of a prediction against a label volume.
    Eval(EvalArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Time the selective scan against naive attention over sequence lengths.
    BenchScan(BenchArgs),
    /// Write a synthetic image/label pair.
    Synth(SynthArgs),
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_dpfr: bool,
    #[arg(long)]
    no_pfa: bool,
    #[arg(long)]
    no_deep_supervision: bool,
    /// Output directory for machine-readable results.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Crop extents, one value for a cube or `D,H,W`.
    #[arg(long, value_parser = parse_dims)]
    crop: Option<[usize; 3]>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    label: Option<PathBuf>,
    /// Extents of the synthetic volume when no image is given (default: the crop).
    #[arg(long, value_parser = parse_dims)]
    volume: Option<[usize; 3]>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Output MVOL with three probability channels (WT, TC, ET).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    label: PathBuf,
    /// Prediction values at or above this count as foreground.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// HD95 when exactly one mask is empty (default: the volume diagonal).
    #[arg(long)]
    empty_penalty: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Op,
    Module,
    Model,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "op")]
    scope: ScopeArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Replace the backward rule of the named operator check by a wrong one.
    #[arg(long, hide = true)]
    corrupt: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated sequence lengths.
    #[arg(long, value_delimiter = ',', default_value = "1024,2048,4096,8192")]
    lengths: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Skip the quadratic attention baseline.
    #[arg(long)]
    no_attention: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_parser = parse_dims, default_value = "32")]
    dims: [usize; 3],
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Directory receiving `image.mvol` and `label.mvol`.
    #[arg(long)]
    out: PathBuf,
}

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [n] => Ok([n; 3]),
        [d, h, w] => Ok([d, h, w]),
        _ => Err("expected one extent or three comma-separated extents".into()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Validation>().is_some() {
        return 2;
    }
    if e.downcast_ref::<Numerical>().is_some() {
        return 3;
    }
    match e.downcast_ref::<mmrinet::Error>() {
        Some(mmrinet::Error::Io { .. } | mmrinet::Error::State { .. } | mmrinet::Error::Backward(_)) | None => 1,
        Some(_) => 2,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let json = cli.json;
    let mut threads = cli.threads;
    let cmd = cli.command;
    if let Command::Paramcount(a) | Command::TrainToy(TrainArgs { run: a, .. }) = &cmd {
        if threads.is_none() {
            if let Some(p) = &a.config {
                threads = RunConfig::load(p)?.threads;
            }
        }
    }
    if let Some(n) = threads {
        if n == 0 {
            bail!(Validation("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cmd {
        Command::Paramcount(a) => paramcount(&a, json),
        Command::TrainToy(a) => train_toy(&a, json),
        Command::Infer(a) => infer(&a),
        Command::Eval(a) => eval(&a, json),
        Command::Gradcheck(a) => gradcheck(&a, json),
        Command::BenchScan(a) => bench(&a, json),
        Command::Synth(a) => synth(&a),
    }
}

fn resolve(a: &RunArgs) -> anyhow::Result<RunConfig> {
    let mut c = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = a.seed {
        c.seed = s;
    }
    c.model.dpfr &= !a.no_dpfr;
    c.model.pfa &= !a.no_pfa;
    c.model.deep_supervision &= !a.no_deep_supervision;
    if a.out.is_some() {
        c.paths.out = a.out.clone();
    }
    c.model.validate().map_err(|e| Validation(e.to_string()))?;
    Ok(c)
}

fn write_out(dir: &Path, name: &str, contents: &str) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn emit<S: Serialize>(json: bool, value: &S, text: impl FnOnce() -> String) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    if json {
        writeln!(out, "{}", serde_json::to_string_pretty(value)?)?;
    } else {
        write!(out, "{}", text())?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ParamcountReport {
    config: ModelConfig,
    breakdown: ParamBreakdown,
}

fn paramcount(a: &RunArgs, json: bool) -> anyhow::Result<()> {
    let c = resolve(a)?;
    c.validate_paths()?;
    let (_, store) = MmriNet::new::<f32>(c.model.clone(), c.seed)?;
    let breakdown = ParamBreakdown::of(&store);
    let kv: String = breakdown.rows().iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    if let Some(dir) = &c.paths.out {
        write_out(dir, "params.txt", &kv)?;
        write_out(
            dir,
            "params.json",
            &serde_json::to_string_pretty(&ParamcountReport {
                config: c.model.clone(),
                breakdown,
            })?,
        )?;
    }
    emit(json, &breakdown, || {
        let mut s = String::new();
        for (k, v) in breakdown.rows() {
            s += &format!("{k:<12} {v:>10}  ({:.3}M)\n", v as f64 / 1e6);
        }
        s
    })
}

#[derive(Serialize)]
struct TrainSummary {
    steps: usize,
    seed: u64,
    crop: [usize; 3],
    volume: [usize; 3],
    first_loss: Option<f64>,
    last_loss: Option<f64>,
    final_eval_loss: f64,
    reload_eval_loss: f64,
    metrics: MetricsReport,
    seconds: f64,
}

fn train_toy(a: &TrainArgs, json: bool) -> anyhow::Result<()> {
    let mut c = resolve(&a.run)?;
    if let Some(v) = a.crop {
        c.crop = v;
    }
    if let Some(v) = a.steps {
        c.steps = v;
    }
    if a.image.is_some() {
        c.paths.image = a.image.clone();
    }
    if a.label.is_some() {
        c.paths.label = a.label.clone();
    }
    c.validate_paths()?;
    let Some(out) = c.paths.out.clone() else {
        bail!(Validation("train-toy needs an output directory (--out or paths.out)".into()));
    };
    c.model
        .check_input(&[c.model.in_channels, c.crop[0], c.crop[1], c.crop[2]])
        .map_err(|e| Validation(format!("crop: {e}")))?;
    let (image, label) = match (&c.paths.image, &c.paths.label) {
        (Some(i), Some(l)) => (load_volume(i)?, load_volume(l)?),
        _ => synthetic_case(a.volume.unwrap_or(c.crop), c.seed)?,
    };
    let sample = Sample::new(&image, &label)?;
    let (net, mut store) = MmriNet::new::<f32>(c.model.clone(), c.seed)?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let started = std::time::Instant::now();
    let mut log = String::from("step\tloss\n");
    let report = train(&net, &mut store, &sample, &c.train_config(), |step, loss| {
        log += &format!("{step}\t{loss:.17e}\n");
        if !json && (step % 10 == 0 || step + 1 == c.steps) {
            eprintln!("step {step:>5}  loss {loss:.5}");
        }
    })?;
    let seconds = started.elapsed().as_secs_f64();
    write_out(&out, "losses.tsv", &log)?;
    let ckpt = out.join("checkpoint.mmri");
    save_checkpoint(&ckpt, &c.model, &store)?;
    let reloaded = load_checkpoint(&ckpt)?;
    let (reload_eval_loss, _) = evaluate(&reloaded.net, &reloaded.store, &sample)?;
    let summary = TrainSummary {
        steps: c.steps,
        seed: c.seed,
        crop: c.crop,
        volume: sample.image.dims(),
        first_loss: report.losses.first().copied(),
        last_loss: report.losses.last().copied(),
        final_eval_loss: report.final_eval_loss,
        reload_eval_loss,
        metrics: report.metrics,
        seconds,
    };
    write_out(&out, "report.json", &serde_json::to_string_pretty(&summary)?)?;
    write_out(&out, "metrics.txt", &report.metrics.to_key_value())?;
    write_out(&out, "config.toml", &toml::to_string(&c)?)?;
    emit(json, &summary, || {
        format!(
            "steps={}\nfinal_eval_loss={}\nreload_eval_loss={}\n{}seconds={seconds:.1}\ncheckpoint={}\n",
            c.steps,
            report.final_eval_loss,
            reload_eval_loss,
            report.metrics.to_key_value(),
            ckpt.display()
        )
    })?;
    if report.losses.iter().any(|l| !l.is_finite()) || !report.final_eval_loss.is_finite() {
        bail!(Numerical("training produced a non-finite loss".into()));
    }
    if reload_eval_loss != report.final_eval_loss {
        bail!(Numerical(format!(
            "reloaded checkpoint gives eval loss {reload_eval_loss}, expected {}",
            report.final_eval_loss
        )));
    }
    Ok(())
}

fn infer(a: &InferArgs) -> anyhow::Result<()> {
    if !a.checkpoint.is_file() || !a.input.is_file() {
        bail!(Validation("checkpoint and input must be existing files".into()));
    }
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let image = load_volume(&a.input)?;
    image.expect_channels(ckpt.config.in_channels, "input image")?;
    ckpt.config.check_input(image.data.shape())?;
    let image = mmrinet::data::normalize_nonzero(&image);
    let tape = Tape::no_grad();
    let cx = Ctx::new(&tape, &ckpt.store, ForwardOptions::eval());
    let logits = ckpt.net.forward(&cx, &tape.constant(image.data))?.logits;
    let probs = logits.value().map(sigmoid);
    if probs.data().iter().any(|v| !v.is_finite()) {
        bail!(Numerical("non-finite output".into()));
    }
    save_volume(&Volume::new(probs, image.spacing)?, &a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn eval(a: &EvalArgs, json: bool) -> anyhow::Result<()> {
    for p in [&a.pred, &a.label] {
        if !p.is_file() {
            bail!(Validation(format!("input file {} does not exist", p.display())));
        }
    }
    let pred = load_volume(&a.pred)?;
    let label = load_volume(&a.label)?;
    pred.expect_channels(3, "prediction")?;
    label.expect_channels(3, "label")?;
    if pred.dims() != label.dims() {
        bail!(Validation(format!(
            "prediction extents {:?} differ from label extents {:?}",
            pred.dims(),
            label.dims()
        )));
    }
    let report = MetricsReport::evaluate(
        &region_extract(&pred.data, a.threshold)?,
        &region_extract(&label.data, 0.5)?,
        label.spacing_f64(),
        a.empty_penalty,
    )?;
    if let Some(dir) = &a.out {
        write_out(dir, "metrics.txt", &report.to_key_value())?;
        write_out(dir, "metrics.json", &serde_json::to_string_pretty(&report)?)?;
    }
    emit(json, &report, || report.to_key_value())
}

fn gradcheck(a: &GradcheckArgs, json: bool) -> anyhow::Result<()> {
    let scope = match a.scope {
        ScopeArg::Op => Scope::Op,
        ScopeArg::Module => Scope::Module,
        ScopeArg::Model => Scope::Model,
    };
    if let Some(name) = &a.corrupt {
        if scope != Scope::Op || !suite::op_names().contains(&name.as_str()) {
            bail!(Validation(format!("cannot corrupt {name:?} in this scope")));
        }
    }
    let report = suite::run(
        scope,
        &SuiteOptions {
            seed: a.seed,
            corrupt: a.corrupt.clone(),
        },
    )?;
    if let Some(dir) = &a.out {
        write_out(dir, "gradcheck.json", &serde_json::to_string_pretty(&report)?)?;
    }
    emit(json, &report, || {
        let mut s = String::new();
        for c in &report.checks {
            let worst = c
                .worst
                .as_ref()
                .map(|w| format!("  worst {}[{}] analytic {:.6e} numeric {:.6e}", w.input, w.index, w.analytic, w.numeric))
                .unwrap_or_default();
            s += &format!(
                "{} {:<40} max_rel_error={:.3e} checked={} skipped={}{worst}\n",
                if c.passed() { "PASS" } else { "FAIL" },
                c.name,
                c.max_rel_error,
                c.checked,
                c.skipped
            );
        }
        s += &format!("passed={} seconds={:.1}\n", report.passed, report.seconds);
        s
    })?;
    if !report.passed {
        let names: Vec<&str> = report.failures().map(|c| c.name.as_str()).collect();
        bail!(Numerical(format!("gradient check failed: {}", names.join(", "))));
    }
    Ok(())
}

fn bench(a: &BenchArgs, json: bool) -> anyhow::Result<()> {
    if a.lengths.is_empty() || a.lengths.contains(&0) || a.runs == 0 {
        bail!(Validation("lengths and runs must be positive".into()));
    }
    let cfg = BenchConfig {
        runs: a.runs,
        seed: a.seed,
        attention: !a.no_attention,
        ..BenchConfig::default()
    };
    let report = bench_scan(&a.lengths, &cfg)?;
    if let Some(dir) = &a.out {
        write_out(dir, "bench.json", &serde_json::to_string_pretty(&report)?)?;
    }
    emit(json, &report, || {
        let mut s = format!("{:>8} {:>14} {:>14}\n", "L", "scan_s", "attention_s");
        for r in &report.rows {
            let att = r.attention_seconds.map(|t| format!("{t:.6}")).unwrap_or_else(|| "-".into());
            s += &format!("{:>8} {:>14.6} {:>14}\n", r.length, r.scan_seconds, att);
        }
        s += &format!("scan_ratios={:?}\nscan_r2={:.4}\n", report.scan_ratios(), report.scan_r2);
        if let Some(r2) = report.attention_r2 {
            s += &format!("attention_ratios={:?}\nattention_r2_linear={r2:.4}\n", report.attention_ratios());
        }
        s
    })
}

fn synth(a: &SynthArgs) -> anyhow::Result<()> {
    let (image, label) = synthetic_case(a.dims, a.seed).map_err(|e| Validation(e.to_string()))?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    save_volume(&image, a.out.join("image.mvol"))?;
    save_volume(&label, a.out.join("label.mvol"))?;
    println!("wrote {} and {}", a.out.join("image.mvol").display(), a.out.join("label.mvol").display());
    Ok(())
}

