//! End-to-end optimization: AdamW with cosine learning-rate decay,
//! multi-ratio supervision, downscale/forecast target selection,
//! autoregressive rollout fine-tuning, and the GSCK checkpoint format.
//!
//! Determinism contract: given the same seed, config, and dataset, training
//! produces bit-identical checkpoints. All randomness flows through one
//! seeded generator, every reduction is fixed-order, and graphs are rebuilt
//! each step.

use std::io::{self, Read, Write};
use std::path::Path;
use std::rc::Rc;

use crate::autodiff::{Graph, Precision, Tensor, TensorError};
use crate::codec;
use crate::data::{
    compute_norm_stats, denormalize, make_lowres_input, normalize, DataError, GsfFile, NormStats,
    TimeSplit,
};
use crate::grid::{FieldTensor, GridError, LatLonGrid};
use crate::model::{
    BoundParams, HeadMode, Model, ModelConfig, ModelError, ModelOutput, ModelParams, Param,
};
use crate::render::{RenderConfig, SplatRenderOp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const GSCK_MAGIC: &[u8; 4] = b"GSCK";
pub const GSCK_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("non-finite loss at step {step}")]
    NanLoss { step: usize },
    #[error("step {step} outside the schedule range 0..={iters}")]
    StepOutOfRange { step: usize, iters: usize },
    #[error("dataset too short: {0}")]
    DatasetTooShort(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("gradient shape mismatch for parameter {0}")]
    GradShape(String),
    #[error("checkpoint corrupt: {0}")]
    CheckpointCorrupt(String),
    #[error("unsupported checkpoint version {0}")]
    CheckpointVersion(u32),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Downscale,
    Forecast,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub iters: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub batch: usize,
    pub ratio_set: Vec<f64>,
    pub rollout_steps: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Global-norm gradient clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl TrainConfig {
    pub fn new(mode: TrainMode, iters: usize, seed: u64) -> Self {
        Self {
            mode,
            iters,
            lr_init: 1e-4,
            lr_final: 1e-6,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            eps: 1e-8,
            batch: 1,
            ratio_set: vec![2.0, 4.0],
            rollout_steps: 1,
            seed,
            precision: Precision::Double,
            clip_norm: Some(1.0),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.ratio_set.is_empty() {
            return Err(TrainError::Config("ratio set must be nonempty".into()));
        }
        if self.ratio_set.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
            return Err(TrainError::Config("ratios must be positive finite".into()));
        }
        if !(self.lr_final <= self.lr_init) {
            return Err(TrainError::Config(format!(
                "lr_final {} must not exceed lr_init {}",
                self.lr_final, self.lr_init
            )));
        }
        if self.iters == 0 || self.batch == 0 || self.rollout_steps == 0 {
            return Err(TrainError::Config("iters, batch, rollout_steps must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(TrainError::Config("weight decay must be nonnegative".into()));
        }
        Ok(())
    }
}

/// First/second AdamW moments aligned with the parameter registry order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn zeros(params: &ModelParams) -> Self {
        Self {
            step: 0,
            m: params.params().iter().map(|p| vec![0.0; p.values.len()]).collect(),
            v: params.params().iter().map(|p| vec![0.0; p.values.len()]).collect(),
        }
    }
}

/// Mean over all (variable, node) of the squared difference. Both fields
/// must share a grid and variable count and live in normalized units.
pub fn mse_loss(rendered: &FieldTensor, target: &FieldTensor) -> Result<f64, TrainError> {
    rendered.same_layout(target)?;
    let n = rendered.values().len() as f64;
    let mut acc = 0.0;
    for (a, b) in rendered.values().iter().zip(target.values()) {
        let d = a - b;
        acc += d * d;
    }
    Ok(acc / n)
}

/// Cosine-decayed learning rate:
/// `lr(step) = lr_final + (lr_init - lr_final) (1 + cos(pi step / iters)) / 2`.
pub fn cosine_lr(step: usize, cfg: &TrainConfig) -> Result<f64, TrainError> {
    if step > cfg.iters {
        return Err(TrainError::StepOutOfRange { step, iters: cfg.iters });
    }
    let t = step as f64 / cfg.iters as f64;
    Ok(cfg.lr_final
        + 0.5 * (cfg.lr_init - cfg.lr_final) * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// One decoupled-weight-decay Adam update over the whole registry.
/// Decay applies only to parameters flagged for it (weights; never biases,
/// layer norms, or the positional table).
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &[Vec<f64>],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    if grads.len() != params.params().len() {
        return Err(TrainError::GradShape(format!(
            "{} gradient buffers for {} parameters",
            grads.len(),
            params.params().len()
        )));
    }
    let (b1, b2) = cfg.betas;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for (i, p) in params.params_mut().iter_mut().enumerate() {
        if grads[i].len() != p.values.len() {
            return Err(TrainError::GradShape(p.name.clone()));
        }
        let decay = if p.weight_decay { cfg.weight_decay } else { 0.0 };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, theta) in p.values.iter_mut().enumerate() {
            let g = grads[i][j];
            if decay > 0.0 {
                *theta -= lr * decay * *theta;
            }
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *theta -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Scale all gradients so their global L2 norm is at most `clip`.
pub fn clip_global_norm(grads: &mut [Vec<f64>], clip: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.iter() {
        for &x in g {
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > clip && norm > 0.0 {
        let scale = clip / norm;
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= scale;
            }
        }
    }
    norm
}

/// Aligned multi-time dataset: the raw high-resolution stack, per-time
/// normalized anchor inputs, normalization statistics from the training
/// split, and exact-subsample target construction.
pub struct Dataset {
    stack: GsfFile,
    anchor: LatLonGrid,
    pub split: TimeSplit,
    pub norm: NormStats,
    inputs: Vec<FieldTensor>,
}

impl Dataset {
    /// Build from a stack whose grid is at least as fine as the anchor.
    /// Normalization statistics come from the training split only.
    pub fn new(stack: GsfFile, anchor_dims: (usize, usize)) -> Result<Self, TrainError> {
        let anchor = LatLonGrid::build(anchor_dims.0, anchor_dims.1)?;
        let split = TimeSplit::standard(stack.n_time);
        if split.train.is_empty() {
            return Err(TrainError::DatasetTooShort(format!(
                "{} time steps leave an empty training split",
                stack.n_time
            )));
        }
        let norm = compute_norm_stats(&stack, split.train.clone())?;
        let mut inputs = Vec::with_capacity(stack.n_time);
        for t in 0..stack.n_time {
            let hr = stack.field_at(t)?;
            inputs.push(normalize(&make_lowres_input(&hr, &anchor), &norm));
        }
        Ok(Self { stack, anchor, split, norm, inputs })
    }

    pub fn anchor(&self) -> &LatLonGrid {
        &self.anchor
    }

    pub fn n_time(&self) -> usize {
        self.stack.n_time
    }

    pub fn n_vars(&self) -> usize {
        self.stack.n_vars()
    }

    pub fn var_names(&self) -> &[String] {
        &self.stack.var_names
    }

    /// Normalized coarse input at time `t`.
    pub fn input(&self, t: usize) -> &FieldTensor {
        &self.inputs[t]
    }

    /// Normalized target at time `t` on the ratio-`r` refinement of the
    /// anchor. Uses exact node subsampling when the target grid is embedded
    /// in the data grid, bilinear resampling otherwise.
    pub fn target(&self, t: usize, ratio: f64) -> Result<FieldTensor, TrainError> {
        Ok(normalize(&self.reference(t, ratio)?, &self.norm))
    }

    /// Physical-unit reference field at time `t` on the ratio-`r` grid.
    pub fn reference(&self, t: usize, ratio: f64) -> Result<FieldTensor, TrainError> {
        let grid = self.anchor.refine(ratio)?;
        let hr = self.stack.field_at(t)?;
        if grid == self.stack.grid {
            return Ok(hr);
        }
        if let Some((lk, lm)) = grid.node_map_into(&self.stack.grid) {
            let mut out = FieldTensor::zeros(grid.clone(), hr.n_vars());
            for v in 0..hr.n_vars() {
                for (k, &sk) in lk.iter().enumerate() {
                    for (m, &sm) in lm.iter().enumerate() {
                        out.set(v, k, m, hr.get(v, sk, sm));
                    }
                }
            }
            Ok(out)
        } else {
            Ok(crate::grid::bilinear_interp(&hr, &grid))
        }
    }
}

/// One supervised pair: a normalized anchor input, a normalized target on
/// the ratio-refined grid, the ratio, and the source time index.
pub struct TrainingPair {
    pub input: FieldTensor,
    pub target: FieldTensor,
    pub ratio: f64,
    pub time: usize,
}

/// Draw a pair for one step: ratio uniform over the ratio set; downscale mode
/// pairs input(T) with target(T), forecast mode with target(T+1), T from the
/// training split.
pub fn make_training_pair(
    dataset: &Dataset,
    rng: &mut ChaCha8Rng,
    cfg: &TrainConfig,
) -> Result<TrainingPair, TrainError> {
    let ratio = cfg.ratio_set[rng.gen_range(0..cfg.ratio_set.len())];
    let train = dataset.split.train.clone();
    let (t_input, t_target) = match cfg.mode {
        TrainMode::Downscale => {
            let t = rng.gen_range(train.start..train.end);
            (t, t)
        }
        TrainMode::Forecast => {
            if train.end - train.start < 2 {
                return Err(TrainError::DatasetTooShort(
                    "forecast mode needs at least two training time steps".into(),
                ));
            }
            let t = rng.gen_range(train.start..train.end - 1);
            (t, t + 1)
        }
    };
    Ok(TrainingPair {
        input: dataset.input(t_input).clone(),
        target: dataset.target(t_target, ratio)?,
        ratio,
        time: t_input,
    })
}

/// Everything needed to resume or run the model later.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub params: ModelParams,
    pub opt: OptimizerState,
    pub train_config: TrainConfig,
    pub step: u64,
    pub norm: NormStats,
    pub var_names: Vec<String>,
}

/// One line of the training log.
#[derive(Debug, Clone, Copy)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Append `rendered = splat(model output)` on the graph.
pub fn render_model_output(
    graph: &Graph,
    model: &Model,
    out: &ModelOutput,
    target: &LatLonGrid,
    rcfg: &RenderConfig,
) -> Result<Tensor, TrainError> {
    let op = Rc::new(SplatRenderOp {
        anchor: model.gaussian_grid(),
        target: target.clone(),
        cfg: *rcfg,
        n_vars: model.config().n_vars,
    });
    let mut inputs: Vec<&Tensor> = vec![&out.feature_logits, &out.gauss_raw];
    if let Some(off) = &out.mu_offset {
        inputs.push(off);
    }
    Ok(graph.custom(op, &inputs)?)
}

fn field_to_tensor(graph: &Graph, f: &FieldTensor) -> Result<Tensor, TensorError> {
    graph.constant(
        f.values().to_vec(),
        &[f.n_vars(), f.grid().n_lat(), f.grid().n_lon()],
    )
}

/// Forward + render + MSE for a batch of pairs on one fresh graph; returns
/// the loss tensor (mean over batch elements).
fn batch_loss(
    graph: &Graph,
    model: &Model,
    bound: &BoundParams,
    pairs: &[TrainingPair],
    rcfg: &RenderConfig,
) -> Result<Tensor, TrainError> {
    let mut total: Option<Tensor> = None;
    for pair in pairs {
        let field = field_to_tensor(graph, &pair.input)?;
        let out = model.forward(graph, bound, &field, pair.ratio)?;
        let rendered = render_model_output(graph, model, &out, pair.target.grid(), rcfg)?;
        let target = field_to_tensor(graph, &pair.target)?;
        let loss = rendered.mse(&target)?;
        total = Some(match total {
            None => loss,
            Some(acc) => acc.add(&loss)?,
        });
    }
    Ok(total.expect("batch is nonempty").mul_scalar(1.0 / pairs.len() as f64)?)
}

fn one_step(
    model: &Model,
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    pairs: &[TrainingPair],
    lr: f64,
    cfg: &TrainConfig,
    rcfg: &RenderConfig,
    step: usize,
) -> Result<f64, TrainError> {
    let graph = Graph::with_precision(cfg.precision);
    let bound = params.bind(&graph)?;
    let loss = batch_loss(&graph, model, &bound, pairs, rcfg).map_err(|e| match e {
        TrainError::Tensor(TensorError::NonFinite { .. }) => TrainError::NanLoss { step },
        other => other,
    })?;
    let loss_value = loss.scalar_value();
    if !loss_value.is_finite() {
        return Err(TrainError::NanLoss { step });
    }
    graph.backward(&loss)?;
    let mut grads = bound.grads(params);
    if let Some(clip) = cfg.clip_norm {
        clip_global_norm(&mut grads, clip);
    }
    adamw_step(params, &grads, opt, lr, cfg)?;
    Ok(loss_value)
}

/// Train from scratch (or from `resume`), sampling one batch per step,
/// with the cosine schedule. `on_step` observes every step (for logging and
/// interval checkpointing).
pub fn train(
    model_config: ModelConfig,
    dataset: &Dataset,
    cfg: &TrainConfig,
    rcfg: &RenderConfig,
    resume: Option<Checkpoint>,
    mut on_step: impl FnMut(&StepLog, &Checkpoint),
) -> Result<(Checkpoint, Vec<StepLog>), TrainError> {
    cfg.validate()?;
    let model = Model::new(model_config.clone())?;
    let (mut params, mut opt) = match resume {
        Some(ck) => (ck.params, ck.opt),
        None => {
            let p = model.init_params(cfg.seed);
            let o = OptimizerState::zeros(&p);
            (p, o)
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut log = Vec::with_capacity(cfg.iters);
    for step in 0..cfg.iters {
        let pairs: Vec<TrainingPair> = (0..cfg.batch)
            .map(|_| make_training_pair(dataset, &mut rng, cfg))
            .collect::<Result<_, _>>()?;
        let lr = cosine_lr(step, cfg)?;
        let loss = one_step(&model, &mut params, &mut opt, &pairs, lr, cfg, rcfg, step)?;
        let entry = StepLog { step, lr, loss };
        log.push(entry);
        let ck = Checkpoint {
            model_config: model_config.clone(),
            params: params.clone(),
            opt: opt.clone(),
            train_config: cfg.clone(),
            step: (step + 1) as u64,
            norm: dataset.norm.clone(),
            var_names: dataset.var_names().to_vec(),
        };
        on_step(&entry, &ck);
        if step + 1 == cfg.iters {
            return Ok((ck, log));
        }
    }
    unreachable!("loop returns at the final step")
}

/// Inference: forward at `ratio`, render on an explicit grid, denormalize.
pub fn infer_render(
    model: &Model,
    params: &ModelParams,
    norm: &NormStats,
    input_norm: &FieldTensor,
    ratio: f64,
    target: &LatLonGrid,
    rcfg: &RenderConfig,
) -> Result<FieldTensor, TrainError> {
    let graph = Graph::new();
    let bound = params.bind(&graph)?;
    let field = field_to_tensor(&graph, input_norm)?;
    let out = model.forward(&graph, &bound, &field, ratio)?;
    let set = model.to_gaussian_set(&out)?;
    let rendered = crate::render::render_grid(&set, target, rcfg);
    Ok(denormalize(&rendered, norm))
}

/// Autoregressive rollout: each step conditions on the running state, renders
/// the anchor grid for feedback (clamped into [0, 1]) and the ratio-`r` grid
/// for output. Returned fields are normalized; denormalize for physical units.
pub fn rollout(
    model: &Model,
    params: &ModelParams,
    initial_norm: &FieldTensor,
    steps: usize,
    ratio: f64,
    rcfg: &RenderConfig,
) -> Result<Vec<FieldTensor>, TrainError> {
    let anchor = model.gaussian_grid();
    let out_grid = anchor.refine(ratio)?;
    let mut state = initial_norm.clone();
    let mut outputs = Vec::with_capacity(steps);
    for _ in 0..steps {
        let graph = Graph::new();
        let bound = params.bind(&graph)?;
        let field = field_to_tensor(&graph, &state)?;
        let out = model.forward(&graph, &bound, &field, ratio)?;
        let set = model.to_gaussian_set(&out)?;
        let feedback = crate::render::render_grid(&set, &anchor, rcfg);
        outputs.push(if ratio == 1.0 {
            feedback.clone()
        } else {
            crate::render::render_grid(&set, &out_grid, rcfg)
        });
        // Re-normalize: compositing keeps values in [0, 1), clamp guards
        // rounding at the boundary.
        let mut next = feedback;
        for v in next.values_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        state = next;
    }
    Ok(outputs)
}

/// Continue training a forecast checkpoint with the loss summed over an
/// unrolled autoregressive chain at fixed `lr_final`; gradients flow through
/// the in-graph feedback renders.
pub fn finetune_rollout(
    checkpoint: Checkpoint,
    dataset: &Dataset,
    cfg: &TrainConfig,
    rcfg: &RenderConfig,
    mut on_step: impl FnMut(&StepLog, &Checkpoint),
) -> Result<(Checkpoint, Vec<StepLog>), TrainError> {
    cfg.validate()?;
    if cfg.mode != TrainMode::Forecast {
        return Err(TrainError::Config("rollout fine-tuning requires forecast mode".into()));
    }
    let model = Model::new(checkpoint.model_config.clone())?;
    let mut params = checkpoint.params;
    let mut opt = checkpoint.opt;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let steps = cfg.rollout_steps;
    let train = dataset.split.train.clone();
    if train.end - train.start < steps + 1 {
        return Err(TrainError::DatasetTooShort(format!(
            "rollout over {steps} steps needs {} training times, have {}",
            steps + 1,
            train.end - train.start
        )));
    }
    let anchor = model.gaussian_grid();
    let mut log = Vec::with_capacity(cfg.iters);
    for step in 0..cfg.iters {
        let ratio = cfg.ratio_set[rng.gen_range(0..cfg.ratio_set.len())];
        let t0 = rng.gen_range(train.start..train.end - steps);
        let target_grid = dataset.anchor().refine(ratio)?;

        let graph = Graph::with_precision(cfg.precision);
        let bound = params.bind(&graph)?;
        let run = || -> Result<Tensor, TrainError> {
            let mut state = field_to_tensor(&graph, dataset.input(t0))?;
            let mut total: Option<Tensor> = None;
            for s in 0..steps {
                let out = model.forward(&graph, &bound, &state, ratio)?;
                let rendered = render_model_output(&graph, &model, &out, &target_grid, rcfg)?;
                let target = field_to_tensor(&graph, &dataset.target(t0 + s + 1, ratio)?)?;
                let loss = rendered.mse(&target)?;
                total = Some(match total {
                    None => loss,
                    Some(acc) => acc.add(&loss)?,
                });
                if s + 1 < steps {
                    state = render_model_output(&graph, &model, &out, &anchor, rcfg)?;
                }
            }
            Ok(total.expect("at least one rollout step"))
        };
        let loss = run().map_err(|e| match e {
            TrainError::Tensor(TensorError::NonFinite { .. }) => TrainError::NanLoss { step },
            other => other,
        })?;
        let loss_value = loss.scalar_value();
        if !loss_value.is_finite() {
            return Err(TrainError::NanLoss { step });
        }
        graph.backward(&loss)?;
        let mut grads = bound.grads(&params);
        if let Some(clip) = cfg.clip_norm {
            clip_global_norm(&mut grads, clip);
        }
        adamw_step(&mut params, &grads, &mut opt, cfg.lr_final, cfg)?;
        let entry = StepLog { step, lr: cfg.lr_final, loss: loss_value };
        log.push(entry);
        let ck = Checkpoint {
            model_config: checkpoint.model_config.clone(),
            params: params.clone(),
            opt: opt.clone(),
            train_config: cfg.clone(),
            step: checkpoint.step + (step + 1) as u64,
            norm: checkpoint.norm.clone(),
            var_names: checkpoint.var_names.clone(),
        };
        on_step(&entry, &ck);
        if step + 1 == cfg.iters {
            return Ok((ck, log));
        }
    }
    unreachable!("loop returns at the final step")
}

// ---------------------------------------------------------------------------
// GSCK checkpoint codec
// ---------------------------------------------------------------------------

fn write_model_config<W: Write>(w: &mut W, c: &ModelConfig) -> io::Result<()> {
    codec::write_u32(w, c.embed_dim as u32)?;
    codec::write_u32(w, c.layers as u32)?;
    codec::write_u32(w, c.heads as u32)?;
    codec::write_u32(w, c.window.0 as u32)?;
    codec::write_u32(w, c.window.1 as u32)?;
    codec::write_u32(w, c.n_vars as u32)?;
    codec::write_u32(w, c.anchor.0 as u32)?;
    codec::write_u32(w, c.anchor.1 as u32)?;
    codec::write_u32(w, match c.head_mode {
        HeadMode::OneHead => 0,
        HeadMode::TwoHeads => 1,
    })?;
    let flags = (c.learnable_positions as u32)
        | ((c.frozen_gaussians as u32) << 1)
        | ((c.upsample as u32) << 2);
    codec::write_u32(w, flags)?;
    codec::write_u32(w, c.token_patch as u32)
}

fn read_model_config<R: Read>(r: &mut R) -> io::Result<ModelConfig> {
    let embed_dim = codec::read_u32(r)? as usize;
    let layers = codec::read_u32(r)? as usize;
    let heads = codec::read_u32(r)? as usize;
    let win = (codec::read_u32(r)? as usize, codec::read_u32(r)? as usize);
    let n_vars = codec::read_u32(r)? as usize;
    let anchor = (codec::read_u32(r)? as usize, codec::read_u32(r)? as usize);
    let head_mode = if codec::read_u32(r)? == 0 { HeadMode::OneHead } else { HeadMode::TwoHeads };
    let flags = codec::read_u32(r)?;
    let token_patch = codec::read_u32(r)? as usize;
    let mut c = ModelConfig::new(n_vars, anchor);
    c.embed_dim = embed_dim;
    c.layers = layers;
    c.heads = heads;
    c.window = win;
    c.head_mode = head_mode;
    c.learnable_positions = flags & 1 != 0;
    c.frozen_gaussians = flags & 2 != 0;
    c.upsample = flags & 4 != 0;
    c.token_patch = token_patch;
    Ok(c)
}

fn write_train_config<W: Write>(w: &mut W, c: &TrainConfig) -> io::Result<()> {
    codec::write_u32(w, match c.mode {
        TrainMode::Downscale => 0,
        TrainMode::Forecast => 1,
    })?;
    codec::write_u64(w, c.iters as u64)?;
    codec::write_f64(w, c.lr_init)?;
    codec::write_f64(w, c.lr_final)?;
    codec::write_f64(w, c.weight_decay)?;
    codec::write_f64(w, c.betas.0)?;
    codec::write_f64(w, c.betas.1)?;
    codec::write_f64(w, c.eps)?;
    codec::write_u64(w, c.batch as u64)?;
    codec::write_f64_slice(w, &c.ratio_set)?;
    codec::write_u64(w, c.rollout_steps as u64)?;
    codec::write_u64(w, c.seed)?;
    codec::write_u32(w, match c.precision {
        Precision::Single => 0,
        Precision::Double => 1,
    })?;
    match c.clip_norm {
        Some(v) => {
            codec::write_u32(w, 1)?;
            codec::write_f64(w, v)
        }
        None => codec::write_u32(w, 0),
    }
}

fn read_train_config<R: Read>(r: &mut R) -> io::Result<TrainConfig> {
    let mode = if codec::read_u32(r)? == 0 { TrainMode::Downscale } else { TrainMode::Forecast };
    let iters = codec::read_u64(r)? as usize;
    let lr_init = codec::read_f64(r)?;
    let lr_final = codec::read_f64(r)?;
    let weight_decay = codec::read_f64(r)?;
    let betas = (codec::read_f64(r)?, codec::read_f64(r)?);
    let eps = codec::read_f64(r)?;
    let batch = codec::read_u64(r)? as usize;
    let ratio_set = codec::read_f64_slice(r)?;
    let rollout_steps = codec::read_u64(r)? as usize;
    let seed = codec::read_u64(r)?;
    let precision = if codec::read_u32(r)? == 0 { Precision::Single } else { Precision::Double };
    let clip_norm = if codec::read_u32(r)? == 1 { Some(codec::read_f64(r)?) } else { None };
    Ok(TrainConfig {
        mode,
        iters,
        lr_init,
        lr_final,
        weight_decay,
        betas,
        eps,
        batch,
        ratio_set,
        rollout_steps,
        seed,
        precision,
        clip_norm,
    })
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), TrainError> {
        let mut rec: Vec<u8> = Vec::new();
        write_model_config(&mut rec, &self.model_config)?;
        write_train_config(&mut rec, &self.train_config)?;
        codec::write_u64(&mut rec, self.step)?;
        codec::write_u64(&mut rec, self.norm.n_vars() as u64)?;
        for v in 0..self.norm.n_vars() {
            codec::write_f64(&mut rec, self.norm.mins[v])?;
            codec::write_f64(&mut rec, self.norm.maxs[v])?;
        }
        codec::write_u64(&mut rec, self.var_names.len() as u64)?;
        for name in &self.var_names {
            codec::write_str(&mut rec, name)?;
        }
        codec::write_u64(&mut rec, self.params.params().len() as u64)?;
        for p in self.params.params() {
            codec::write_str(&mut rec, &p.name)?;
            codec::write_u32(&mut rec, p.weight_decay as u32)?;
            codec::write_u64(&mut rec, p.shape.len() as u64)?;
            for &d in &p.shape {
                codec::write_u64(&mut rec, d as u64)?;
            }
            codec::write_f64_slice(&mut rec, &p.values)?;
        }
        codec::write_u64(&mut rec, self.opt.step)?;
        for i in 0..self.params.params().len() {
            codec::write_f64_slice(&mut rec, &self.opt.m[i])?;
            codec::write_f64_slice(&mut rec, &self.opt.v[i])?;
        }

        w.write_all(GSCK_MAGIC)?;
        codec::write_u32(w, GSCK_VERSION)?;
        codec::write_u64(w, rec.len() as u64)?;
        w.write_all(&rec)?;
        Ok(())
    }

    pub fn read_from(bytes: &[u8]) -> Result<Self, TrainError> {
        let mut cur = io::Cursor::new(bytes);
        let mut magic = [0u8; 4];
        cur.read_exact(&mut magic)
            .map_err(|_| TrainError::CheckpointCorrupt("missing magic".into()))?;
        if &magic != GSCK_MAGIC {
            return Err(TrainError::CheckpointCorrupt("bad magic".into()));
        }
        let version = codec::read_u32(&mut cur)?;
        if version != GSCK_VERSION {
            return Err(TrainError::CheckpointVersion(version));
        }
        let rec_len = codec::read_u64(&mut cur)? as usize;
        let actual = bytes.len().saturating_sub(cur.position() as usize);
        if actual != rec_len {
            return Err(TrainError::CheckpointCorrupt(format!(
                "record length {rec_len} declared, {actual} bytes present"
            )));
        }
        let model_config = read_model_config(&mut cur)?;
        let train_config = read_train_config(&mut cur)?;
        let step = codec::read_u64(&mut cur)?;
        let n_norm = codec::read_u64(&mut cur)? as usize;
        let mut norm = NormStats { mins: Vec::with_capacity(n_norm), maxs: Vec::with_capacity(n_norm) };
        for _ in 0..n_norm {
            norm.mins.push(codec::read_f64(&mut cur)?);
            norm.maxs.push(codec::read_f64(&mut cur)?);
        }
        let n_names = codec::read_u64(&mut cur)? as usize;
        let mut var_names = Vec::with_capacity(n_names);
        for _ in 0..n_names {
            var_names.push(codec::read_str(&mut cur)?);
        }
        let n_params = codec::read_u64(&mut cur)? as usize;
        let mut plist = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let name = codec::read_str(&mut cur)?;
            let weight_decay = codec::read_u32(&mut cur)? != 0;
            let rank = codec::read_u64(&mut cur)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(codec::read_u64(&mut cur)? as usize);
            }
            let values = codec::read_f64_slice(&mut cur)?;
            if values.len() != shape.iter().product::<usize>() {
                return Err(TrainError::CheckpointCorrupt(format!(
                    "parameter {name} has {} values for shape {shape:?}",
                    values.len()
                )));
            }
            plist.push(Param { name, shape, values, weight_decay });
        }
        let opt_step = codec::read_u64(&mut cur)?;
        let mut m = Vec::with_capacity(n_params);
        let mut v = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            m.push(codec::read_f64_slice(&mut cur)?);
            v.push(codec::read_f64_slice(&mut cur)?);
        }
        if cur.position() as usize != bytes.len() {
            return Err(TrainError::CheckpointCorrupt("trailing bytes".into()));
        }
        Ok(Checkpoint {
            model_config,
            params: ModelParams::from_params(plist),
            opt: OptimizerState { step: opt_step, m, v },
            train_config,
            step,
            norm,
            var_names,
        })
    }

    pub fn write_path<P: AsRef<Path>>(&self, path: P) -> Result<(), TrainError> {
        let mut f = io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn read_path<P: AsRef<Path>>(path: P) -> Result<Self, TrainError> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&bytes)
    }
}
