//! The scale-aware transformer that generates Gaussian parameters from a
//! coarse field and a target resolution ratio.
//!
//! One token per anchor node (patch size 1 by default). Each layer applies a
//! single-key cross-attention against the ratio embedding, then window
//! self-attention, a feed-forward block, global self-attention, and a second
//! feed-forward block; every sublayer is pre-norm residual
//! (`x <- x + Sublayer(LN(x))`). Two linear heads decode per-token variable
//! logits and the raw Gaussian parameters `(quaternion, scales, opacity)`;
//! activation of those raw outputs lives in [`crate::gaussian::activate_raw`].
//!
//! The cross-attention key/value is a single token, so its attention weight
//! is exactly 1 and the residual is what keeps token identity; without it the
//! block would overwrite every token with a broadcast of the ratio embedding.

use std::collections::HashMap;

use crate::autodiff::{Graph, Tensor, TensorError};
use crate::gaussian::{activate_raw, GaussianSet, RawGaussianOutput, SCALE_EPS};
use crate::grid::LatLonGrid;
use crate::math::{inv_softplus, logit};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("window {win:?} does not divide the token grid {grid:?}")]
    WindowDivisibility { win: (usize, usize), grid: (usize, usize) },
    #[error("field does not match the anchor grid: {0}")]
    GridMismatch(String),
    #[error("ratio must be positive, got {0}")]
    NonPositiveRatio(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadMode {
    OneHead,
    TwoHeads,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub window: (usize, usize),
    pub n_vars: usize,
    /// (n_lat, n_lon) of the input anchor grid.
    pub anchor: (usize, usize),
    pub head_mode: HeadMode,
    pub learnable_positions: bool,
    /// Freeze rotation/scale/opacity at their initialization (ablation);
    /// only the feature head stays learnable.
    pub frozen_gaussians: bool,
    /// Token patch size; > 1 coarsens the primitive lattice. Requires
    /// `patch | (n_lat - 1)` and `patch | n_lon` so the lattice stays a
    /// valid pole-to-pole grid.
    pub token_patch: usize,
    /// Decode 2x more primitives per axis via a learned pixel-shuffle
    /// expansion (the row past the pole is dropped).
    pub upsample: bool,
}

impl ModelConfig {
    pub fn new(n_vars: usize, anchor: (usize, usize)) -> Self {
        Self {
            embed_dim: 64,
            layers: 4,
            heads: 4,
            window: (4, 4),
            n_vars,
            anchor,
            head_mode: HeadMode::TwoHeads,
            learnable_positions: false,
            frozen_gaussians: false,
            token_patch: 1,
            upsample: false,
        }
    }
}

/// One named parameter tensor with its optimizer metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    /// Whether AdamW applies decoupled weight decay to this parameter
    /// (biases, layer norms, and the positional table are excluded).
    pub weight_decay: bool,
}

/// Ordered parameter registry; iteration order is fixed at construction and
/// defines the checkpoint layout.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    pub fn push(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>, weight_decay: bool) {
        debug_assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param { name: name.to_string(), shape, values, weight_decay });
    }

    pub fn get(&self, name: &str) -> &Param {
        &self.params[self.index[name]]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param {
        let i = self.index[name];
        &mut self.params[i]
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn n_scalars(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    pub fn from_params(params: Vec<Param>) -> Self {
        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        Self { params, index }
    }

    /// Create leaf tensors for every parameter on a fresh graph.
    pub fn bind(&self, graph: &Graph) -> Result<BoundParams, TensorError> {
        let mut tensors = Vec::with_capacity(self.params.len());
        for p in &self.params {
            tensors.push(graph.leaf(p.values.clone(), &p.shape, true)?);
        }
        Ok(BoundParams { tensors, index: self.index.clone() })
    }

    /// View existing graph tensors (in registry order) as bound parameters;
    /// used where the leaves are created externally, e.g. gradient checking.
    pub fn bind_tensors(&self, tensors: Vec<Tensor>) -> BoundParams {
        debug_assert_eq!(tensors.len(), self.params.len());
        BoundParams { tensors, index: self.index.clone() }
    }
}

/// Graph-bound snapshot of the parameters for one forward/backward pass.
pub struct BoundParams {
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> &Tensor {
        &self.tensors[*self.index.get(name).unwrap_or_else(|| panic!("no parameter {name}"))]
    }

    /// Gradients in registry order (zeros where a parameter was unused).
    pub fn grads(&self, reference: &ModelParams) -> Vec<Vec<f64>> {
        reference
            .params()
            .iter()
            .map(|p| {
                self.tensors[self.index[&p.name]]
                    .grad()
                    .unwrap_or_else(|| vec![0.0; p.values.len()])
            })
            .collect()
    }
}

/// Raw per-token decoder outputs, still inside the graph.
pub struct ModelOutput {
    /// `[K, n_vars]` pre-sigmoid feature logits.
    pub feature_logits: Tensor,
    /// `[K, 8]` raw `(quat, scales, opacity)` parameters.
    pub gauss_raw: Tensor,
    /// `[K, 2]` position offsets, present only with learnable positions.
    pub mu_offset: Option<Tensor>,
}

pub struct Model {
    cfg: ModelConfig,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self, ModelError> {
        if cfg.embed_dim == 0 || cfg.heads == 0 || cfg.layers == 0 {
            return Err(ModelError::Config("zero-sized dimension".into()));
        }
        if cfg.embed_dim % cfg.heads != 0 {
            return Err(ModelError::Config(format!(
                "embed dim {} not divisible by {} heads",
                cfg.embed_dim, cfg.heads
            )));
        }
        if cfg.token_patch == 0 {
            return Err(ModelError::Config("token patch must be at least 1".into()));
        }
        let (h, w) = cfg.anchor;
        if h < 2 || w < 2 {
            return Err(ModelError::Config(format!("anchor grid {h}x{w} too small")));
        }
        if (h - 1) % cfg.token_patch != 0 || w % cfg.token_patch != 0 {
            return Err(ModelError::Config(format!(
                "token patch {} must divide both n_lat-1 = {} and n_lon = {}",
                cfg.token_patch,
                h - 1,
                w
            )));
        }
        let model = Self { cfg };
        let tg = model.token_grid_dims();
        let win = model.cfg.window;
        if tg.0 % win.0 != 0 || tg.1 % win.1 != 0 {
            return Err(ModelError::WindowDivisibility { win, grid: tg });
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Token lattice dimensions after patching.
    pub fn token_grid_dims(&self) -> (usize, usize) {
        let (h, w) = self.cfg.anchor;
        let p = self.cfg.token_patch;
        ((h - 1) / p + 1, w / p)
    }

    pub fn n_tokens(&self) -> usize {
        let (th, tw) = self.token_grid_dims();
        th * tw
    }

    /// The lattice the decoded primitives live on.
    pub fn gaussian_grid(&self) -> LatLonGrid {
        let (th, tw) = self.token_grid_dims();
        if self.cfg.upsample {
            LatLonGrid::build(2 * (th - 1) + 1, 2 * tw).expect("valid by construction")
        } else {
            LatLonGrid::build(th, tw).expect("valid by construction")
        }
    }

    pub fn n_primitives(&self) -> usize {
        self.gaussian_grid().len()
    }

    /// Initialization value of the raw gauss head bias: identity quaternion,
    /// scales at half the primitive-lattice spacing, opacity logit for 0.9.
    /// An untrained model therefore renders a smooth field instead of a dead
    /// (all-transparent) one.
    pub fn gauss_bias_init(&self) -> [f64; 8] {
        let g = self.gaussian_grid();
        let spacing = 0.5 * (g.lat_spacing() + g.lon_spacing());
        let raw_scale = inv_softplus((0.5 * spacing - SCALE_EPS).max(1e-3));
        [1.0, 0.0, 0.0, 0.0, raw_scale, raw_scale, raw_scale, logit(0.9)]
    }

    /// Fresh parameters: truncated-normal weights (sigma 0.02, clipped at 2
    /// sigma), zero biases, zero positional table, unit layer-norm gains.
    pub fn init_params(&self, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut trunc_normal = move |n: usize| -> Vec<f64> {
            let mut out = Vec::with_capacity(n);
            while out.len() < n {
                let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                if z.abs() <= 2.0 {
                    out.push(0.02 * z);
                }
            }
            out
        };
        let d = self.cfg.embed_dim;
        let n = self.cfg.n_vars;
        let p2n = self.cfg.token_patch * self.cfg.token_patch * n;
        let k0 = self.n_tokens();
        let mut params = ModelParams::default();
        let mut linear = |params: &mut ModelParams, name: &str, din: usize, dout: usize| {
            params.push(&format!("{name}.w"), vec![din, dout], trunc_normal(din * dout), true);
            params.push(&format!("{name}.b"), vec![dout], vec![0.0; dout], false);
        };
        let ln = |params: &mut ModelParams, name: &str| {
            params.push(&format!("{name}.g"), vec![d], vec![1.0; d], false);
            params.push(&format!("{name}.b"), vec![d], vec![0.0; d], false);
        };

        params.push("pos", vec![k0, d], vec![0.0; k0 * d], false);
        linear(&mut params, "embed", p2n, d);
        linear(&mut params, "scale", 1, d);
        for l in 0..self.cfg.layers {
            ln(&mut params, &format!("layer{l}.ln_cross"));
            for proj in ["q", "k", "v", "o"] {
                linear(&mut params, &format!("layer{l}.cross.{proj}"), d, d);
            }
            ln(&mut params, &format!("layer{l}.ln_win"));
            for proj in ["q", "k", "v", "o"] {
                linear(&mut params, &format!("layer{l}.win.{proj}"), d, d);
            }
            ln(&mut params, &format!("layer{l}.ln_ffn1"));
            linear(&mut params, &format!("layer{l}.ffn1.fc1"), d, 4 * d);
            linear(&mut params, &format!("layer{l}.ffn1.fc2"), 4 * d, d);
            ln(&mut params, &format!("layer{l}.ln_glob"));
            for proj in ["q", "k", "v", "o"] {
                linear(&mut params, &format!("layer{l}.glob.{proj}"), d, d);
            }
            ln(&mut params, &format!("layer{l}.ln_ffn2"));
            linear(&mut params, &format!("layer{l}.ffn2.fc1"), d, 4 * d);
            linear(&mut params, &format!("layer{l}.ffn2.fc2"), 4 * d, d);
        }
        ln(&mut params, "ln_final");
        if self.cfg.upsample {
            linear(&mut params, "upsample", d, 4 * d);
        }
        let gauss_bias = self.gauss_bias_init();
        match self.cfg.head_mode {
            HeadMode::TwoHeads => {
                params.push("head_var.w", vec![d, n], trunc_normal(d * n), true);
                params.push("head_var.b", vec![n], vec![0.0; n], false);
                params.push("head_gauss.w", vec![d, 8], trunc_normal(d * 8), true);
                params.push("head_gauss.b", vec![8], gauss_bias.to_vec(), false);
            }
            HeadMode::OneHead => {
                params.push("head_joint.w", vec![d, n + 8], trunc_normal(d * (n + 8)), true);
                let mut bias = vec![0.0; n];
                bias.extend_from_slice(&gauss_bias);
                params.push("head_joint.b", vec![n + 8], bias, false);
            }
        }
        if self.cfg.learnable_positions {
            let k = self.n_primitives();
            params.push("mu_offset", vec![k, 2], vec![0.0; k * 2], false);
        }
        params
    }

    fn linear(&self, x: &Tensor, p: &BoundParams, name: &str) -> Result<Tensor, ModelError> {
        Ok(x.matmul(p.get(&format!("{name}.w")))?.add(p.get(&format!("{name}.b")))?)
    }

    fn ln(&self, x: &Tensor, p: &BoundParams, name: &str) -> Result<Tensor, ModelError> {
        Ok(x.layer_norm(LAYER_NORM_EPS)?
            .mul(p.get(&format!("{name}.g")))?
            .add(p.get(&format!("{name}.b")))?)
    }

    /// Multi-head attention of `q_in` `[Tq, D]` against `kv_in` `[Tk, D]`
    /// using the projections under `prefix`.
    fn mha(
        &self,
        q_in: &Tensor,
        kv_in: &Tensor,
        p: &BoundParams,
        prefix: &str,
    ) -> Result<Tensor, ModelError> {
        let d = self.cfg.embed_dim;
        let heads = self.cfg.heads;
        let dh = d / heads;
        let tq = q_in.shape()[0];
        let tk = kv_in.shape()[0];
        let split = |t: &Tensor, tlen: usize| -> Result<Tensor, ModelError> {
            Ok(t.reshape(&[tlen, heads, dh])?.permute(&[1, 0, 2])?)
        };
        let q = split(&self.linear(q_in, p, &format!("{prefix}.q"))?, tq)?;
        let k = split(&self.linear(kv_in, p, &format!("{prefix}.k"))?, tk)?;
        let v = split(&self.linear(kv_in, p, &format!("{prefix}.v"))?, tk)?;
        let scores = q.matmul(&k.transpose()?)?.mul_scalar(1.0 / (dh as f64).sqrt())?;
        let attn = scores.softmax(2)?;
        let out = attn.matmul(&v)?.permute(&[1, 0, 2])?.reshape(&[tq, d])?;
        self.linear(&out, p, &format!("{prefix}.o"))
    }

    /// Self-attention within non-overlapping windows of the token lattice.
    fn window_attention(
        &self,
        x: &Tensor,
        p: &BoundParams,
        prefix: &str,
    ) -> Result<Tensor, ModelError> {
        let (th, tw) = self.token_grid_dims();
        let (wh, ww) = self.cfg.window;
        let (nh, nw) = (th / wh, tw / ww);
        let d = self.cfg.embed_dim;
        let heads = self.cfg.heads;
        let dh = d / heads;
        let nwin = nh * nw;
        let wlen = wh * ww;
        // [K, D] -> [nwin * wlen, D] with window-major token order.
        let windows = x
            .reshape(&[nh, wh, nw, ww, d])?
            .permute(&[0, 2, 1, 3, 4])?
            .reshape(&[nwin * wlen, d])?;
        let split = |t: &Tensor| -> Result<Tensor, ModelError> {
            Ok(t.reshape(&[nwin, wlen, heads, dh])?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[nwin * heads, wlen, dh])?)
        };
        let q = split(&self.linear(&windows, p, &format!("{prefix}.q"))?)?;
        let k = split(&self.linear(&windows, p, &format!("{prefix}.k"))?)?;
        let v = split(&self.linear(&windows, p, &format!("{prefix}.v"))?)?;
        let scores = q.matmul(&k.transpose()?)?.mul_scalar(1.0 / (dh as f64).sqrt())?;
        let attn = scores.softmax(2)?;
        let out = attn
            .matmul(&v)?
            .reshape(&[nwin, heads, wlen, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[nwin * wlen, d])?;
        let out = self.linear(&out, p, &format!("{prefix}.o"))?;
        // Back to lattice token order.
        Ok(out
            .reshape(&[nh, nw, wh, ww, d])?
            .permute(&[0, 2, 1, 3, 4])?
            .reshape(&[th * tw, d])?)
    }

    fn ffn(&self, x: &Tensor, p: &BoundParams, prefix: &str) -> Result<Tensor, ModelError> {
        let h = self.linear(x, p, &format!("{prefix}.fc1"))?.gelu()?;
        self.linear(&h, p, &format!("{prefix}.fc2"))
    }

    /// Patch-embed the `[N, H, W]` field into `[K, D]` tokens and add the
    /// positional table.
    pub fn embed(
        &self,
        p: &BoundParams,
        field: &Tensor,
    ) -> Result<Tensor, ModelError> {
        let (h, w) = self.cfg.anchor;
        let n = self.cfg.n_vars;
        let shape = field.shape();
        if shape != [n, h, w] {
            return Err(ModelError::GridMismatch(format!(
                "expected field shape [{n}, {h}, {w}], got {shape:?}"
            )));
        }
        let patch = self.cfg.token_patch;
        let (th, tw) = self.token_grid_dims();
        // [N, H, W] -> [H, W, N]
        let mut x = field.permute(&[1, 2, 0])?;
        if patch > 1 {
            // Pad below the pole by repeating the last row so H-1+patch is
            // divisible by patch, then gather patch blocks.
            let last = x.slice(0, h - 1, 1)?;
            let mut rows = vec![x.clone()];
            for _ in 0..patch - 1 {
                rows.push(last.clone());
            }
            let refs: Vec<&Tensor> = rows.iter().collect();
            x = Tensor::concat(&refs, 0)?;
        }
        let tokens = x
            .reshape(&[th, patch, tw, patch, n])?
            .permute(&[0, 2, 1, 3, 4])?
            .reshape(&[th * tw, patch * patch * n])?;
        let embedded = self.linear(&tokens, p, "embed")?;
        Ok(embedded.add(p.get("pos"))?)
    }

    /// Project the scalar ratio into the embedding space: a 1 -> D affine
    /// map, returned as a single `[1, D]` token.
    pub fn scale_embed(
        &self,
        graph: &Graph,
        p: &BoundParams,
        ratio: f64,
    ) -> Result<Tensor, ModelError> {
        if !(ratio > 0.0) || !ratio.is_finite() {
            return Err(ModelError::NonPositiveRatio(ratio));
        }
        let r = graph.constant(vec![ratio], &[1, 1])?;
        self.linear(&r, p, "scale")
    }

    /// `x + MHA(LN(x), r', r')`: the ratio token is the single key/value, so
    /// every head's attention weight is exactly one.
    pub fn scale_cross_attention(
        &self,
        x: &Tensor,
        ratio_token: &Tensor,
        p: &BoundParams,
        layer: usize,
    ) -> Result<Tensor, ModelError> {
        let q = self.ln(x, p, &format!("layer{layer}.ln_cross"))?;
        let attn = self.mha(&q, ratio_token, p, &format!("layer{layer}.cross"))?;
        Ok(x.add(&attn)?)
    }

    /// Window attention, feed-forward, global attention, feed-forward, each
    /// in pre-norm residual form.
    pub fn attention_block(
        &self,
        x: &Tensor,
        p: &BoundParams,
        layer: usize,
    ) -> Result<Tensor, ModelError> {
        let mut x = x.clone();
        let win = self.window_attention(
            &self.ln(&x, p, &format!("layer{layer}.ln_win"))?,
            p,
            &format!("layer{layer}.win"),
        )?;
        x = x.add(&win)?;
        let f1 = self.ffn(&self.ln(&x, p, &format!("layer{layer}.ln_ffn1"))?, p, &format!("layer{layer}.ffn1"))?;
        x = x.add(&f1)?;
        let q = self.ln(&x, p, &format!("layer{layer}.ln_glob"))?;
        let glob = self.mha(&q, &q, p, &format!("layer{layer}.glob"))?;
        x = x.add(&glob)?;
        let f2 = self.ffn(&self.ln(&x, p, &format!("layer{layer}.ln_ffn2"))?, p, &format!("layer{layer}.ffn2"))?;
        Ok(x.add(&f2)?)
    }

    /// Decode final tokens into feature logits and raw Gaussian parameters.
    pub fn decode(&self, tokens: &Tensor, p: &BoundParams) -> Result<(Tensor, Tensor), ModelError> {
        let n = self.cfg.n_vars;
        match self.cfg.head_mode {
            HeadMode::TwoHeads => {
                let f = self.linear(tokens, p, "head_var")?;
                let g = self.linear(tokens, p, "head_gauss")?;
                Ok((f, g))
            }
            HeadMode::OneHead => {
                let joint = self.linear(tokens, p, "head_joint")?;
                Ok((joint.slice(1, 0, n)?, joint.slice(1, n, 8)?))
            }
        }
    }

    /// Full forward pass: embed, L x (cross-attention + attention block),
    /// final norm, optional upsampling, decode.
    pub fn forward(
        &self,
        graph: &Graph,
        p: &BoundParams,
        field: &Tensor,
        ratio: f64,
    ) -> Result<ModelOutput, ModelError> {
        let ratio_token = self.scale_embed(graph, p, ratio)?;
        let mut tokens = self.embed(p, field)?;
        for l in 0..self.cfg.layers {
            tokens = self.scale_cross_attention(&tokens, &ratio_token, p, l)?;
            tokens = self.attention_block(&tokens, p, l)?;
        }
        tokens = self.ln(&tokens, p, "ln_final")?;
        if self.cfg.upsample {
            let (th, tw) = self.token_grid_dims();
            let d = self.cfg.embed_dim;
            // [K, D] -> [K, 4D] -> 2x2 pixel shuffle -> drop the row past the
            // pole.
            let expanded = self.linear(&tokens, p, "upsample")?;
            let shuffled = expanded
                .reshape(&[th, tw, 2, 2, d])?
                .permute(&[0, 2, 1, 3, 4])?
                .reshape(&[2 * th, 2 * tw, d])?;
            tokens = shuffled.slice(0, 0, 2 * th - 1)?.reshape(&[(2 * th - 1) * 2 * tw, d])?;
        }
        let (mut feature_logits, mut gauss_raw) = self.decode(&tokens, p)?;
        if self.cfg.frozen_gaussians {
            // Pin the raw Gaussian parameters at their init-bias values; the
            // constant leaf receives no gradient.
            let k = self.n_primitives();
            let bias = self.gauss_bias_init();
            let mut frozen = Vec::with_capacity(k * 8);
            for _ in 0..k {
                frozen.extend_from_slice(&bias);
            }
            gauss_raw = graph.constant(frozen, &[k, 8])?;
            feature_logits = feature_logits.add_scalar(0.0)?;
        }
        let mu_offset = if self.cfg.learnable_positions {
            Some(p.get("mu_offset").clone())
        } else {
            None
        };
        Ok(ModelOutput { feature_logits, gauss_raw, mu_offset })
    }

    /// Materialize an activated Gaussian set from decoder outputs (values are
    /// read out of the graph).
    pub fn to_gaussian_set(&self, out: &ModelOutput) -> Result<GaussianSet, ModelError> {
        let grid = self.gaussian_grid();
        let k = grid.len();
        let n = self.cfg.n_vars;
        let logits = out.feature_logits.values();
        let gauss = out.gauss_raw.values();
        let offsets = out.mu_offset.as_ref().map(|t| t.values());
        let mut prims = Vec::with_capacity(k);
        for i in 0..k {
            let raw = RawGaussianOutput {
                feature_logits: logits[i * n..(i + 1) * n].to_vec(),
                quat_raw: [gauss[i * 8], gauss[i * 8 + 1], gauss[i * 8 + 2], gauss[i * 8 + 3]],
                scale_raw: [gauss[i * 8 + 4], gauss[i * 8 + 5], gauss[i * 8 + 6]],
                opacity_logit: gauss[i * 8 + 7],
            };
            let (kk, mm) = (i / grid.n_lon(), i % grid.n_lon());
            let (mut lat, mut lon) = (grid.lat(kk), grid.lon(mm));
            if let Some(off) = &offsets {
                lat = (lat + off[i * 2]).clamp(-90.0, 90.0);
                lon = crate::grid::wrap_lon(lon + off[i * 2 + 1]);
            }
            let p = activate_raw(&raw)
                .map_err(|e| ModelError::Config(format!("activation failed: {e}")))?
                .at(lat, lon);
            prims.push(p);
        }
        if self.cfg.learnable_positions {
            Ok(GaussianSet::free(grid, prims))
        } else {
            Ok(GaussianSet::anchored(grid, prims)
                .expect("decoded primitives sit on the lattice"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_config() -> ModelConfig {
        let mut cfg = ModelConfig::new(2, (3, 4));
        cfg.embed_dim = 8;
        cfg.layers = 1;
        cfg.heads = 2;
        cfg.window = (3, 2);
        cfg
    }

    fn rand_field(graph: &Graph, cfg: &ModelConfig, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.n_vars * cfg.anchor.0 * cfg.anchor.1;
        graph
            .constant(
                (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
                &[cfg.n_vars, cfg.anchor.0, cfg.anchor.1],
            )
            .unwrap()
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_config();
        cfg.heads = 3;
        assert!(matches!(Model::new(cfg), Err(ModelError::Config(_))));
        let mut cfg = tiny_config();
        cfg.window = (2, 2);
        assert!(matches!(Model::new(cfg), Err(ModelError::WindowDivisibility { .. })));
        let mut cfg = tiny_config();
        cfg.token_patch = 2;
        // (3-1) % 2 == 0 and 4 % 2 == 0: valid; token grid 2x2 needs window fix.
        cfg.window = (2, 2);
        let m = Model::new(cfg).unwrap();
        assert_eq!(m.token_grid_dims(), (2, 2));
        assert_eq!(m.n_primitives(), 4);
    }

    #[test]
    fn default_token_count_matches_anchor() {
        let cfg = ModelConfig::new(3, (32, 64));
        let m = Model::new(cfg).unwrap();
        assert_eq!(m.n_tokens(), 2048);
        assert_eq!(m.n_primitives(), 2048);
        let mut cfg = ModelConfig::new(3, (33, 64));
        cfg.window = (3, 4);
        let m = Model::new(cfg).unwrap();
        assert_eq!(m.n_tokens(), 33 * 64);
    }

    #[test]
    fn upsample_grid_is_the_refinement() {
        let mut cfg = tiny_config();
        cfg.upsample = true;
        let m = Model::new(cfg).unwrap();
        // Token grid 3x4 -> refined 5x8.
        assert_eq!((m.gaussian_grid().n_lat(), m.gaussian_grid().n_lon()), (5, 8));
        assert_eq!(m.n_primitives(), 40);
        // Forward produces one raw row per refined-lattice primitive.
        let params = m.init_params(3);
        let g = Graph::new();
        let bound = params.bind(&g).unwrap();
        let field = rand_field(&g, m.config(), 1);
        let out = m.forward(&g, &bound, &field, 2.0).unwrap();
        assert_eq!(out.gauss_raw.shape(), vec![40, 8]);
        m.to_gaussian_set(&out).unwrap();
    }

    #[test]
    fn zero_field_zero_pos_zero_bias_gives_zero_tokens() {
        let m = Model::new(tiny_config()).unwrap();
        let mut params = m.init_params(0);
        // Bias and positional table are zero-initialized already.
        let g = Graph::new();
        let bound = params.bind(&g).unwrap();
        let field = g.constant(vec![0.0; 2 * 12], &[2, 3, 4]).unwrap();
        let tokens = m.embed(&bound, &field).unwrap();
        assert!(tokens.values().iter().all(|&v| v == 0.0));
        assert_eq!(tokens.shape(), vec![12, 8]);
        // Sanity: nonzero position table changes that.
        params.get_mut("pos").values[3] = 1.5;
        let g = Graph::new();
        let bound = params.bind(&g).unwrap();
        let field = g.constant(vec![0.0; 2 * 12], &[2, 3, 4]).unwrap();
        let tokens = m.embed(&bound, &field).unwrap();
        assert_eq!(tokens.values()[3], 1.5);
    }

    #[test]
    fn scale_embed_is_affine_in_r() {
        let m = Model::new(tiny_config()).unwrap();
        let mut params = m.init_params(1);
        // Zero weight: r' = bias for every ratio.
        for v in params.get_mut("scale.w").values.iter_mut() {
            *v = 0.0;
        }
        params.get_mut("scale.b").values[2] = 0.25;
        let g = Graph::new();
        let bound = params.bind(&g).unwrap();
        let a = m.scale_embed(&g, &bound, 2.0).unwrap();
        let b = m.scale_embed(&g, &bound, 4.0).unwrap();
        assert_eq!(a.values(), b.values());
        assert_eq!(a.values()[2], 0.25);

        // Nonzero weight separates ratios.
        let mut params = m.init_params(2);
        params.get_mut("scale.w").values[0] = 1.0;
        let g = Graph::new();
        let bound = params.bind(&g).unwrap();
        let a = m.scale_embed(&g, &bound, 2.0).unwrap();
        let b = m.scale_embed(&g, &bound, 4.0).unwrap();
        assert_ne!(a.values(), b.values());
        assert!(matches!(
            m.scale_embed(&g, &bound, 0.0),
            Err(ModelError::NonPositiveRatio(_))
        ));
    }

    #[test]
    fn single_key_cross_attention_matches_direct_formula() {
        // With one key token the softmax weight is exactly 1, so the output
        // must equal x + O(V(r')) broadcast to every token.
        let m = Model::new(tiny_config()).unwrap();
        let params = m.init_params(7);
        let g = Graph::new();
        let bound = params.bind(&g).unwrap();
        let field = rand_field(&g, m.config(), 3);
        let x = m.embed(&bound, &field).unwrap();
        let r = m.scale_embed(&g, &bound, 3.0).unwrap();
        let got = m.scale_cross_attention(&x, &r, &bound, 0).unwrap();

        let wv = params.get("layer0.cross.v.w");
        let bv = params.get("layer0.cross.v.b");
        let wo = params.get("layer0.cross.o.w");
        let bo = params.get("layer0.cross.o.b");
        let d = 8;
        let rv = r.values();
        let mut v = bv.values.clone();
        for j in 0..d {
            for i in 0..d {
                v[j] += rv[i] * wv.values[i * d + j];
            }
        }
        let mut o = bo.values.clone();
        for j in 0..d {
            for i in 0..d {
                o[j] += v[i] * wo.values[i * d + j];
            }
        }
        let xv = x.values();
        let gv = got.values();
        for t in 0..12 {
            for j in 0..d {
                let want = xv[t * d + j] + o[j];
                assert!((gv[t * d + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zeroed_value_and_output_projections_are_identity() {
        let m = Model::new(tiny_config()).unwrap();
        let mut params = m.init_params(8);
        for name in ["layer0.cross.v.w", "layer0.cross.v.b", "layer0.cross.o.w", "layer0.cross.o.b"] {
            for v in params.get_mut(name).values.iter_mut() {
                *v = 0.0;
            }
        }
        let g = Graph::new();
        let bound = params.bind(&g).unwrap();
        let field = rand_field(&g, m.config(), 4);
        let x = m.embed(&bound, &field).unwrap();
        let r = m.scale_embed(&g, &bound, 2.0).unwrap();
        let got = m.scale_cross_attention(&x, &r, &bound, 0).unwrap();
        // Exact identity, bit for bit.
        let xv = x.values();
        let gv = got.values();
        for (a, b) in gv.iter().zip(&xv) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn full_grid_window_equals_global_attention() {
        let mut cfg = tiny_config();
        cfg.window = (3, 4); // the whole token grid: one window
        let m = Model::new(cfg).unwrap();
        let params = m.init_params(9);
        let g = Graph::new();
        let bound = params.bind(&g).unwrap();
        let field = rand_field(&g, m.config(), 5);
        let x = m.embed(&bound, &field).unwrap();
        let win = m.window_attention(&x, &bound, "layer0.win").unwrap();
        let glob = m.mha(&x, &x, &bound, "layer0.win").unwrap();
        for (a, b) in win.values().iter().zip(glob.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn windowed_attention_matches_per_window_oracle() {
        // 4x4 token lattice, 2x2 windows: run dense attention per window by
        // hand and compare.
        let mut cfg = ModelConfig::new(1, (5, 4));
        cfg.embed_dim = 4;
        cfg.heads = 1;
        cfg.layers = 1;
        cfg.window = (2, 2);
        cfg.token_patch = 1;
        // 5x4 token grid is not divisible by 2x2; use anchor 5 -> tokens 5.
        // Switch to an anchor giving a 4x4 token grid instead.
        cfg.anchor = (4, 4);
        let m = Model::new(cfg).unwrap();
        let params = m.init_params(10);
        let g = Graph::new();
        let bound = params.bind(&g).unwrap();
        let field = rand_field(&g, m.config(), 6);
        let x = m.embed(&bound, &field).unwrap();
        let got = m.window_attention(&x, &bound, "layer0.win").unwrap();

        // Oracle: gather each 2x2 window, run single-head attention densely.
        let d = 4;
        let xv = x.values();
        let dense = |idx: &[usize]| -> Vec<Vec<f64>> {
            let get_w = |name: &str| params.get(name).values.clone();
            let (wq, bq) = (get_w("layer0.win.q.w"), get_w("layer0.win.q.b"));
            let (wk, bk) = (get_w("layer0.win.k.w"), get_w("layer0.win.k.b"));
            let (wv, bv) = (get_w("layer0.win.v.w"), get_w("layer0.win.v.b"));
            let (wo, bo) = (get_w("layer0.win.o.w"), get_w("layer0.win.o.b"));
            let proj = |t: usize, w: &[f64], b: &[f64]| -> Vec<f64> {
                let mut out = b.to_vec();
                for j in 0..d {
                    for i in 0..d {
                        out[j] += xv[t * d + i] * w[i * d + j];
                    }
                }
                out
            };
            let qs: Vec<Vec<f64>> = idx.iter().map(|&t| proj(t, &wq, &bq)).collect();
            let ks: Vec<Vec<f64>> = idx.iter().map(|&t| proj(t, &wk, &bk)).collect();
            let vs: Vec<Vec<f64>> = idx.iter().map(|&t| proj(t, &wv, &bv)).collect();
            let mut out = Vec::new();
            for q in &qs {
                let scores: Vec<f64> = ks
                    .iter()
                    .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = exps.iter().sum();
                let mut attn_out = vec![0.0; d];
                for (e, v) in exps.iter().zip(&vs) {
                    for j in 0..d {
                        attn_out[j] += e / z * v[j];
                    }
                }
                let mut o = bo.to_vec();
                for j in 0..d {
                    for i in 0..d {
                        o[j] += attn_out[i] * wo[i * d + j];
                    }
                }
                out.push(o);
            }
            out
        };
        let gv = got.values();
        for (wi, window) in [[0usize, 1, 4, 5], [2, 3, 6, 7], [8, 9, 12, 13], [10, 11, 14, 15]]
            .iter()
            .enumerate()
        {
            let want = dense(window);
            for (ti, &t) in window.iter().enumerate() {
                for j in 0..d {
                    assert!(
                        (gv[t * d + j] - want[ti][j]).abs() < 1e-12,
                        "window {wi} token {t}"
                    );
                }
            }
        }
    }

    #[test]
    fn one_head_with_stacked_weights_matches_two_heads() {
        let m2 = Model::new(tiny_config()).unwrap();
        let params2 = m2.init_params(11);
        let mut cfg1 = tiny_config();
        cfg1.head_mode = HeadMode::OneHead;
        let m1 = Model::new(cfg1).unwrap();
        let mut params1 = m1.init_params(11);
        // Joint weight = column-stack of the two heads (outputs split by
        // index), biases concatenated.
        let d = 8;
        let n = 2;
        let wv = params2.get("head_var.w").values.clone();
        let wg = params2.get("head_gauss.w").values.clone();
        let joint = params1.get_mut("head_joint.w");
        for i in 0..d {
            for j in 0..n {
                joint.values[i * (n + 8) + j] = wv[i * n + j];
            }
            for j in 0..8 {
                joint.values[i * (n + 8) + n + j] = wg[i * 8 + j];
            }
        }
        let mut bias = params2.get("head_var.b").values.clone();
        bias.extend_from_slice(&params2.get("head_gauss.b").values);
        params1.get_mut("head_joint.b").values = bias;
        // Copy every shared parameter.
        for p in params2.params() {
            if !p.name.starts_with("head_") {
                params1.get_mut(&p.name).values = p.values.clone();
            }
        }

        let g2 = Graph::new();
        let b2 = params2.bind(&g2).unwrap();
        let f2 = rand_field(&g2, m2.config(), 12);
        let out2 = m2.forward(&g2, &b2, &f2, 2.0).unwrap();
        let g1 = Graph::new();
        let b1 = params1.bind(&g1).unwrap();
        let f1 = rand_field(&g1, m1.config(), 12);
        let out1 = m1.forward(&g1, &b1, &f1, 2.0).unwrap();
        for (a, b) in out1.feature_logits.values().iter().zip(out2.feature_logits.values()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in out1.gauss_raw.values().iter().zip(out2.gauss_raw.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn permuting_positional_rows_changes_output() {
        let m = Model::new(tiny_config()).unwrap();
        let mut params = m.init_params(13);
        // Give the positional table structure.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for v in params.get_mut("pos").values.iter_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        let run = |params: &ModelParams| {
            let g = Graph::new();
            let bound = params.bind(&g).unwrap();
            let field = rand_field(&g, m.config(), 14);
            m.forward(&g, &bound, &field, 2.0).unwrap().feature_logits.values()
        };
        let base = run(&params);
        let mut permuted = params.clone();
        let d = 8;
        let pos = permuted.get_mut("pos");
        for j in 0..d {
            pos.values.swap(j, d + j); // swap rows 0 and 1
        }
        let after = run(&permuted);
        let diff: f64 = base.iter().zip(&after).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-9, "positional information is dead");
    }

    #[test]
    fn forward_output_contracts() {
        let m = Model::new(tiny_config()).unwrap();
        let params = m.init_params(15);
        let g = Graph::new();
        let bound = params.bind(&g).unwrap();
        let field = rand_field(&g, m.config(), 16);
        let out = m.forward(&g, &bound, &field, 2.0).unwrap();
        assert_eq!(out.feature_logits.shape(), vec![12, 2]);
        assert_eq!(out.gauss_raw.shape(), vec![12, 8]);
        let set = m.to_gaussian_set(&out).unwrap();
        assert_eq!(set.len(), 12);
        assert!(set.primitives().iter().all(|p| p.mu[2] == 1.0));
        for p in set.primitives() {
            p.validate().unwrap();
        }

        // Different ratios produce different outputs under random init.
        let g = Graph::new();
        let bound = params.bind(&g).unwrap();
        let field = rand_field(&g, m.config(), 16);
        let out2 = m.forward(&g, &bound, &field, 4.0).unwrap();
        let d: f64 = out
            .feature_logits
            .values()
            .iter()
            .zip(out2.feature_logits.values())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(d > 1e-9);
    }

    #[test]
    fn frozen_gaussians_pin_raw_outputs() {
        let mut cfg = tiny_config();
        cfg.frozen_gaussians = true;
        let m = Model::new(cfg).unwrap();
        let params = m.init_params(17);
        let g = Graph::new();
        let bound = params.bind(&g).unwrap();
        let field = rand_field(&g, m.config(), 18);
        let out = m.forward(&g, &bound, &field, 2.0).unwrap();
        let bias = m.gauss_bias_init();
        for row in out.gauss_raw.values().chunks(8) {
            assert_eq!(row, &bias);
        }
        assert!(!out.gauss_raw.requires_grad());
    }

    #[test]
    fn patch_embedding_shape_property() {
        use proptest::prelude::*;
        let mut runner = proptest::test_runner::TestRunner::new(ProptestConfig::with_cases(24));
        runner
            .run(
                &(2usize..5, 1usize..4, 2usize..4, 1usize..3, 1usize..3),
                |(th_raw, tw_half, n_vars, layers, seed)| {
                    // Build a config whose token grid is (th_raw, 2*tw_half)
                    // and whose window is the full token grid.
                    let th = th_raw;
                    let tw = 2 * tw_half;
                    let mut cfg = ModelConfig::new(n_vars, (th, tw));
                    cfg.embed_dim = 8;
                    cfg.heads = 2;
                    cfg.layers = layers;
                    cfg.window = (th, tw);
                    let m = Model::new(cfg).unwrap();
                    let params = m.init_params(seed as u64);
                    let g = Graph::new();
                    let bound = params.bind(&g).unwrap();
                    let field = rand_field(&g, m.config(), seed as u64);
                    let out = m.forward(&g, &bound, &field, 2.0).unwrap();
                    prop_assert_eq!(out.feature_logits.shape(), vec![th * tw, n_vars]);
                    prop_assert_eq!(out.gauss_raw.shape(), vec![th * tw, 8]);
                    Ok(())
                },
            )
            .unwrap();
    }
}
