//! Command-line surface for the splatting pipeline.
//!
//! Exit codes are a stable contract for scripts:
//! 0 success, 2 usage or validation error, 3 I/O failure, 4 numerical
//! divergence (non-finite loss), 5 gradient-verification failure.

mod config;
mod gradcheck;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use splatcast_core::data::{self, DataError, GsfFile, SyntheticConfig};
use splatcast_core::grid::LatLonGrid;
use splatcast_core::metrics::{evaluate, EvalReport, ReportMeta};
use splatcast_core::model::{HeadMode, Model, ModelConfig};
use splatcast_core::train::{
    self, Checkpoint, Dataset, TrainConfig, TrainError, TrainMode,
};
use splatcast_core::RenderConfig;

pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;
pub const EXIT_VERIFICATION: u8 = 5;

/// Error with the exit code it maps to.
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn validation(msg: impl Into<String>) -> Self {
        Self { code: EXIT_VALIDATION, message: msg.into() }
    }

    pub fn io(msg: impl Into<String>) -> Self {
        Self { code: EXIT_IO, message: msg.into() }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        let code = match e {
            DataError::Io(_) => EXIT_IO,
            _ => EXIT_VALIDATION,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let code = match e {
            TrainError::Io(_) => EXIT_IO,
            TrainError::NanLoss { .. } => EXIT_NUMERIC,
            TrainError::Data(DataError::Io(_)) => EXIT_IO,
            _ => EXIT_VALIDATION,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<splatcast_core::grid::GridError> for CliError {
    fn from(e: splatcast_core::grid::GridError) -> Self {
        Self::validation(e.to_string())
    }
}

impl From<splatcast_core::metrics::MetricsError> for CliError {
    fn from(e: splatcast_core::metrics::MetricsError) -> Self {
        Self::validation(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "splatcast",
    version,
    about = "Gaussian-splat downscaling and forecasting of gridded fields"
)]
struct Cli {
    /// Optional `key = value` config file; command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (1 = fully serial; results are bit-identical for any
    /// value).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a deterministic synthetic field stack.
    Synth(SynthArgs),
    /// Train a model on a GSF stack.
    Train(Box<TrainArgs>),
    /// Render a checkpointed model at an arbitrary ratio.
    Render(RenderArgs),
    /// Compare a prediction file against a reference file.
    Eval(EvalArgs),
    /// Interpolation baselines.
    Baseline(BaselineArgs),
    /// Finite-difference verification of every gradient path.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Grid as HxW (latitudes x longitudes).
    #[arg(long)]
    grid: Option<String>,
    /// Number of variables.
    #[arg(long)]
    vars: Option<usize>,
    /// Number of time steps.
    #[arg(long)]
    times: Option<usize>,
    /// Output path (.gsf).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of spectral modes.
    #[arg(long)]
    modes: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training data (.gsf).
    #[arg(long)]
    data: Option<PathBuf>,
    /// downscale or forecast.
    #[arg(long)]
    mode: Option<ModeArg>,
    /// Anchor grid as HxW.
    #[arg(long)]
    anchor: Option<String>,
    /// Comma-separated training ratios.
    #[arg(long)]
    ratios: Option<String>,
    /// Optimization steps.
    #[arg(long)]
    iters: Option<usize>,
    /// RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output checkpoint path (.gsck); the loss log lands beside it.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// After pretraining, fine-tune with an unrolled autoregressive loss of
    /// this many steps (forecast mode only).
    #[arg(long)]
    finetune_rollout: Option<usize>,
    /// Fine-tuning iterations (defaults to iters / 5).
    #[arg(long)]
    finetune_iters: Option<usize>,
    /// Embedding dimension.
    #[arg(long)]
    embed_dim: Option<usize>,
    /// Transformer layers.
    #[arg(long)]
    layers: Option<usize>,
    /// Attention heads.
    #[arg(long)]
    heads: Option<usize>,
    /// Attention window as HxW (defaults to the largest divisors <= 4).
    #[arg(long)]
    window: Option<String>,
    /// one or two decoder heads.
    #[arg(long)]
    head_mode: Option<HeadModeArg>,
    /// Freeze rotation/scale/opacity at initialization (ablation).
    #[arg(long)]
    frozen_gaussians: bool,
    /// Learn per-primitive position offsets (ablation).
    #[arg(long)]
    learnable_positions: bool,
    /// Token patch size (reduces the primitive count).
    #[arg(long)]
    patch: Option<usize>,
    /// Decode 2x more primitives per axis (increases the primitive count).
    #[arg(long)]
    upsample: bool,
    /// Initial learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Final learning rate of the cosine schedule.
    #[arg(long)]
    lr_final: Option<f64>,
    /// Decoupled weight decay.
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Batch size per step.
    #[arg(long)]
    batch: Option<usize>,
    /// Global-norm gradient clip (0 disables).
    #[arg(long)]
    clip_norm: Option<f64>,
    /// single or double.
    #[arg(long)]
    precision: Option<PrecisionArg>,
    /// Mahalanobis culling cutoff for rendering.
    #[arg(long)]
    cutoff: Option<f64>,
    /// Write the checkpoint every N steps (0 = only at the end).
    #[arg(long)]
    ckpt_interval: Option<usize>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    /// Time index of the input frame.
    #[arg(long)]
    time: Option<usize>,
    /// Target ratio (any positive real; the realized grid is printed).
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    cutoff: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long, name = "ref")]
    reference: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    method: Option<MethodArg>,
    #[arg(long)]
    input: Option<PathBuf>,
    /// Target grid as HxW.
    #[arg(long)]
    target_grid: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Also run the renderer-in-graph, end-to-end, and unrolled-rollout
    /// suites.
    #[arg(long)]
    full: bool,
    /// Inject a deliberately wrong adjoint to verify the harness detects it.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Downscale,
    Forecast,
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadModeArg {
    One,
    Two,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    Single,
    Double,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Bilinear,
    Bicubic,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(EXIT_VALIDATION);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: failed to build the thread pool: {e}");
            return ExitCode::from(EXIT_IO);
        }
    }
    let cfg = match cli.config.as_deref().map(config::load).transpose() {
        Ok(map) => map.unwrap_or_default(),
        Err(e) => {
            eprintln!("error: {}", e.message);
            return ExitCode::from(e.code);
        }
    };
    let result = match cli.cmd {
        Cmd::Synth(a) => cmd_synth(a, cfg),
        Cmd::Train(a) => cmd_train(*a, cfg),
        Cmd::Render(a) => cmd_render(a, cfg),
        Cmd::Eval(a) => cmd_eval(a, cfg),
        Cmd::Baseline(a) => cmd_baseline(a, cfg),
        Cmd::Gradcheck(a) => gradcheck::run(a.full, a.inject_fault, cfg),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn parse_dims(s: &str, what: &str) -> Result<(usize, usize), CliError> {
    let parts: Vec<&str> = s.split('x').collect();
    if parts.len() == 2 {
        if let (Ok(h), Ok(w)) = (parts[0].parse(), parts[1].parse()) {
            return Ok((h, w));
        }
    }
    Err(CliError::validation(format!("{what} must look like HxW, got {s:?}")))
}

fn parse_ratios(s: &str) -> Result<Vec<f64>, CliError> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| CliError::validation(format!("bad ratio {p:?}")))
        })
        .collect()
}

/// Largest divisor of `n` that is at most `cap`.
fn divisor_leq(n: usize, cap: usize) -> usize {
    (1..=cap.min(n)).rev().find(|d| n % d == 0).unwrap_or(1)
}

fn require<T>(v: Option<T>, flag: &str) -> Result<T, CliError> {
    v.ok_or_else(|| CliError::validation(format!("missing required option --{flag}")))
}

fn cmd_synth(mut a: SynthArgs, mut cfg: config::ConfigMap) -> Result<(), CliError> {
    config::fill(&mut a.seed, &mut cfg, "seed")?;
    config::fill_parse(&mut a.grid, &mut cfg, "grid")?;
    config::fill(&mut a.vars, &mut cfg, "vars")?;
    config::fill(&mut a.times, &mut cfg, "times")?;
    config::fill_path(&mut a.out, &mut cfg, "out")?;
    config::fill(&mut a.modes, &mut cfg, "modes")?;
    cfg.finish()?;

    let (h, w) = parse_dims(&require(a.grid, "grid")?, "--grid")?;
    let out = require(a.out, "out")?;
    let grid = LatLonGrid::build(h, w)?;
    let synth_cfg = SyntheticConfig {
        seed: a.seed.unwrap_or(0),
        n_modes: a.modes.unwrap_or(6),
        ..Default::default()
    };
    let stack = data::synth_fields(&synth_cfg, &grid, a.vars.unwrap_or(3), a.times.unwrap_or(10))?;
    stack.write_path(&out)?;
    println!(
        "wrote {} ({} vars x {} times on {h}x{w})",
        out.display(),
        stack.n_vars(),
        stack.n_time
    );
    Ok(())
}

fn build_model_config(a: &TrainArgs, n_vars: usize, anchor: (usize, usize)) -> ModelConfig {
    let mut mc = ModelConfig::new(n_vars, anchor);
    if let Some(d) = a.embed_dim {
        mc.embed_dim = d;
    }
    if let Some(l) = a.layers {
        mc.layers = l;
    }
    if let Some(h) = a.heads {
        mc.heads = h;
    }
    mc.token_patch = a.patch.unwrap_or(1);
    mc.upsample = a.upsample;
    mc.frozen_gaussians = a.frozen_gaussians;
    mc.learnable_positions = a.learnable_positions;
    mc.head_mode = match a.head_mode {
        Some(HeadModeArg::One) => HeadMode::OneHead,
        _ => HeadMode::TwoHeads,
    };
    let th = (anchor.0 - 1) / mc.token_patch + 1;
    let tw = anchor.1 / mc.token_patch.max(1);
    mc.window = match &a.window {
        Some(s) => parse_dims(s, "--window").unwrap_or((divisor_leq(th, 4), divisor_leq(tw, 4))),
        None => (divisor_leq(th, 4), divisor_leq(tw, 4)),
    };
    mc
}

fn cmd_train(mut a: TrainArgs, mut cfg: config::ConfigMap) -> Result<(), CliError> {
    config::fill_path(&mut a.data, &mut cfg, "data")?;
    config::fill_parse(&mut a.anchor, &mut cfg, "anchor")?;
    config::fill_parse(&mut a.ratios, &mut cfg, "ratios")?;
    config::fill(&mut a.iters, &mut cfg, "iters")?;
    config::fill(&mut a.seed, &mut cfg, "seed")?;
    config::fill_path(&mut a.ckpt, &mut cfg, "ckpt")?;
    config::fill(&mut a.embed_dim, &mut cfg, "embed-dim")?;
    config::fill(&mut a.layers, &mut cfg, "layers")?;
    config::fill(&mut a.heads, &mut cfg, "heads")?;
    config::fill_parse(&mut a.window, &mut cfg, "window")?;
    config::fill(&mut a.lr, &mut cfg, "lr")?;
    config::fill(&mut a.lr_final, &mut cfg, "lr-final")?;
    config::fill(&mut a.weight_decay, &mut cfg, "weight-decay")?;
    config::fill(&mut a.batch, &mut cfg, "batch")?;
    config::fill(&mut a.clip_norm, &mut cfg, "clip-norm")?;
    config::fill(&mut a.cutoff, &mut cfg, "cutoff")?;
    config::fill(&mut a.ckpt_interval, &mut cfg, "ckpt-interval")?;
    config::fill(&mut a.finetune_rollout, &mut cfg, "finetune-rollout")?;
    config::fill(&mut a.finetune_iters, &mut cfg, "finetune-iters")?;
    config::fill(&mut a.patch, &mut cfg, "patch")?;
    let mode_key = cfg.take("mode")?;
    cfg.finish()?;

    let mode = match (&a.mode, mode_key.as_deref()) {
        (Some(ModeArg::Downscale), _) | (None, Some("downscale")) => TrainMode::Downscale,
        (Some(ModeArg::Forecast), _) | (None, Some("forecast")) => TrainMode::Forecast,
        (None, Some(other)) => {
            return Err(CliError::validation(format!("unknown mode {other:?}")))
        }
        (None, None) => return Err(CliError::validation("missing required option --mode")),
    };
    let data_path = require(a.data.clone(), "data")?;
    let anchor = parse_dims(&require(a.anchor.clone(), "anchor")?, "--anchor")?;
    let ckpt_path = require(a.ckpt.clone(), "ckpt")?;
    let iters = a.iters.unwrap_or(2000);
    let seed = a.seed.unwrap_or(0);

    let stack = data::read_gsf(&data_path)?;
    if mode == TrainMode::Forecast && stack.n_time < 2 {
        return Err(CliError::validation(format!(
            "dataset too short: forecast mode needs at least 2 time steps, file has {}",
            stack.n_time
        )));
    }
    let n_vars = stack.n_vars();
    let dataset = Dataset::new(stack, anchor).map_err(CliError::from)?;

    let model_config = build_model_config(&a, n_vars, anchor);
    Model::new(model_config.clone()).map_err(|e| CliError::validation(e.to_string()))?;

    let mut tc = TrainConfig::new(mode, iters, seed);
    if let Some(lr) = a.lr {
        tc.lr_init = lr;
    }
    if let Some(lr) = a.lr_final {
        tc.lr_final = lr;
    }
    if let Some(wd) = a.weight_decay {
        tc.weight_decay = wd;
    }
    if let Some(b) = a.batch {
        tc.batch = b;
    }
    if let Some(c) = a.clip_norm {
        tc.clip_norm = if c > 0.0 { Some(c) } else { None };
    }
    if let Some(p) = a.precision {
        tc.precision = match p {
            PrecisionArg::Single => splatcast_core::autodiff::Precision::Single,
            PrecisionArg::Double => splatcast_core::autodiff::Precision::Double,
        };
    }
    if let Some(r) = &a.ratios {
        tc.ratio_set = parse_ratios(r)?;
    }
    tc.validate().map_err(CliError::from)?;
    let rcfg = RenderConfig {
        mahalanobis_cutoff: a.cutoff.unwrap_or(3.0),
        max_contributors: None,
    };

    let log_path = ckpt_path.with_extension("log");
    let mut log_file = std::fs::File::create(&log_path)
        .map_err(|e| CliError::io(format!("cannot create {}: {e}", log_path.display())))?;
    let interval = a.ckpt_interval.unwrap_or(0);
    let mut write_log = |entry: &train::StepLog, ck: &Checkpoint, offset: usize| {
        use std::io::Write;
        let _ = writeln!(log_file, "{}\t{}\t{}", offset + entry.step, entry.lr, entry.loss);
        if interval > 0 && (entry.step + 1) % interval == 0 {
            let _ = ck.write_path(&ckpt_path);
        }
    };

    println!(
        "training: mode {:?}, anchor {}x{}, {} iters, seed {seed}, ratios {:?}",
        mode, anchor.0, anchor.1, iters, tc.ratio_set
    );
    let (ckpt, log) = train::train(model_config, &dataset, &tc, &rcfg, None, |e, c| {
        write_log(e, c, 0)
    })
    .map_err(CliError::from)?;
    println!("pretraining done: final loss {}", log.last().map(|l| l.loss).unwrap_or(f64::NAN));

    let final_ckpt = if let Some(rollout_steps) = a.finetune_rollout {
        if mode != TrainMode::Forecast {
            return Err(CliError::validation(
                "--finetune-rollout requires --mode forecast",
            ));
        }
        let mut ft = tc.clone();
        ft.rollout_steps = rollout_steps;
        ft.iters = a.finetune_iters.unwrap_or((iters / 5).max(1));
        let (ck2, log2) =
            train::finetune_rollout(ckpt, &dataset, &ft, &rcfg, |e, c| write_log(e, c, iters))
                .map_err(CliError::from)?;
        println!(
            "rollout fine-tuning done ({} steps of {}): final loss {}",
            ft.iters,
            rollout_steps,
            log2.last().map(|l| l.loss).unwrap_or(f64::NAN)
        );
        ck2
    } else {
        ckpt
    };
    final_ckpt.write_path(&ckpt_path).map_err(CliError::from)?;
    println!("wrote {} and {}", ckpt_path.display(), log_path.display());
    Ok(())
}

fn cmd_render(mut a: RenderArgs, mut cfg: config::ConfigMap) -> Result<(), CliError> {
    config::fill_path(&mut a.ckpt, &mut cfg, "ckpt")?;
    config::fill_path(&mut a.input, &mut cfg, "input")?;
    config::fill(&mut a.time, &mut cfg, "time")?;
    config::fill(&mut a.ratio, &mut cfg, "ratio")?;
    config::fill_path(&mut a.out, &mut cfg, "out")?;
    config::fill(&mut a.cutoff, &mut cfg, "cutoff")?;
    cfg.finish()?;

    let ckpt = Checkpoint::read_path(require(a.ckpt, "ckpt")?).map_err(CliError::from)?;
    let stack = data::read_gsf(require(a.input, "input")?)?;
    let ratio = require(a.ratio, "ratio")?;
    let out_path = require(a.out, "out")?;
    if !(ratio > 0.0) || !ratio.is_finite() {
        return Err(CliError::validation(format!("ratio must be positive, got {ratio}")));
    }

    let model = Model::new(ckpt.model_config.clone())
        .map_err(|e| CliError::validation(e.to_string()))?;
    let anchor = LatLonGrid::build(ckpt.model_config.anchor.0, ckpt.model_config.anchor.1)?;
    if stack.grid != anchor {
        return Err(CliError::validation(format!(
            "input grid {}x{} does not match the checkpoint anchor {}x{}",
            stack.grid.n_lat(),
            stack.grid.n_lon(),
            anchor.n_lat(),
            anchor.n_lon()
        )));
    }
    if stack.n_vars() != ckpt.model_config.n_vars {
        return Err(CliError::validation(format!(
            "input has {} variables, checkpoint expects {}",
            stack.n_vars(),
            ckpt.model_config.n_vars
        )));
    }
    let t = a.time.unwrap_or(0);
    let input = stack.field_at(t)?;
    let input_norm = data::normalize(&input, &ckpt.norm);

    let target = anchor.refine(ratio)?;
    println!(
        "realized target grid: {}x{} (lat spacing {:.6}, lon spacing {:.6})",
        target.n_lat(),
        target.n_lon(),
        target.lat_spacing(),
        target.lon_spacing()
    );
    let rcfg = RenderConfig {
        mahalanobis_cutoff: a.cutoff.unwrap_or(3.0),
        max_contributors: None,
    };
    let rendered = train::infer_render(
        &model,
        &ckpt.params,
        &ckpt.norm,
        &input_norm,
        ratio,
        &target,
        &rcfg,
    )
    .map_err(CliError::from)?;
    let out = GsfFile::from_fields(&[rendered], ckpt.var_names.clone())?;
    out.write_path(&out_path)?;
    println!("wrote {}", out_path.display());
    Ok(())
}

fn cmd_eval(mut a: EvalArgs, mut cfg: config::ConfigMap) -> Result<(), CliError> {
    config::fill_path(&mut a.pred, &mut cfg, "pred")?;
    config::fill_path(&mut a.reference, &mut cfg, "ref")?;
    config::fill_path(&mut a.out, &mut cfg, "out")?;
    cfg.finish()?;

    let pred = data::read_gsf(require(a.pred, "pred")?)?;
    let reference = data::read_gsf(require(a.reference, "ref")?)?;
    let out_path = require(a.out, "out")?;
    if pred.grid != reference.grid || pred.n_vars() != reference.n_vars()
        || pred.n_time != reference.n_time
    {
        return Err(CliError::validation(format!(
            "prediction ({}x{}x{} over {} times) does not align with reference ({}x{}x{} over {})",
            pred.n_vars(),
            pred.grid.n_lat(),
            pred.grid.n_lon(),
            pred.n_time,
            reference.n_vars(),
            reference.grid.n_lat(),
            reference.grid.n_lon(),
            reference.n_time,
        )));
    }
    let mut p_fields = Vec::with_capacity(pred.n_time);
    let mut r_fields = Vec::with_capacity(pred.n_time);
    for t in 0..pred.n_time {
        p_fields.push(pred.field_at(t)?);
        r_fields.push(reference.field_at(t)?);
    }
    let report = evaluate(&p_fields, &r_fields, &pred.var_names, ReportMeta::default())?;
    let text = report.render_text();
    std::fs::write(&out_path, &text)
        .map_err(|e| CliError::io(format!("cannot write {}: {e}", out_path.display())))?;
    print!("{text}");
    Ok(())
}

fn cmd_baseline(mut a: BaselineArgs, mut cfg: config::ConfigMap) -> Result<(), CliError> {
    config::fill_path(&mut a.input, &mut cfg, "input")?;
    config::fill_parse(&mut a.target_grid, &mut cfg, "target-grid")?;
    config::fill_path(&mut a.out, &mut cfg, "out")?;
    let method_key = cfg.take("method")?;
    cfg.finish()?;

    let method = match (&a.method, method_key.as_deref()) {
        (Some(MethodArg::Bilinear), _) | (None, Some("bilinear")) => MethodArg::Bilinear,
        (Some(MethodArg::Bicubic), _) | (None, Some("bicubic")) => MethodArg::Bicubic,
        (None, Some(other)) => {
            return Err(CliError::validation(format!("unknown method {other:?}")))
        }
        (None, None) => return Err(CliError::validation("missing required option --method")),
    };
    let stack = data::read_gsf(require(a.input, "input")?)?;
    let (h, w) = parse_dims(&require(a.target_grid, "target-grid")?, "--target-grid")?;
    let out_path = require(a.out, "out")?;
    let target = LatLonGrid::build(h, w)?;
    let mut fields = Vec::with_capacity(stack.n_time);
    for t in 0..stack.n_time {
        let f = stack.field_at(t)?;
        let interp = match method {
            MethodArg::Bilinear => splatcast_core::grid::bilinear_interp(&f, &target),
            MethodArg::Bicubic => splatcast_core::grid::bicubic_interp(&f, &target)?,
        };
        fields.push(interp);
    }
    let out = GsfFile::from_fields(&fields, stack.var_names.clone())?;
    out.write_path(&out_path)?;
    println!("wrote {}", out_path.display());
    Ok(())
}

/// Write a GSF next to nothing if the parent directory is missing; shared
/// error text helper.
pub fn path_str(p: &Path) -> String {
    p.display().to_string()
}
