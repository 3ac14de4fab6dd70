//! Arbitrary-resolution rendering of a Gaussian set by ordered alpha
//! compositing, with exact hand-written adjoints for training.
//!
//! For a query point p on the z = 1 plane, every primitive within the
//! Mahalanobis cutoff contributes its feature vector weighted by the
//! effective opacity `alpha_i * exp(-d^T sigma_i^-1 d / 2)` and by the
//! transmittance accumulated over lower-index contributors. All primitives
//! share the same depth, so compositing order is fixed to ascending
//! primitive index (row-major anchor order); this makes serial and parallel
//! renders bit-identical by construction.
//!
//! Candidate gathering scans a window of anchor rows/columns around the
//! query derived from `cutoff * max(scale)`; the bound
//! `d^T sigma^-1 d >= |d|^2 / max(s)^2` guarantees the window never excludes
//! a primitive the exact cutoff test would accept, so results match a brute
//! force scan over all K primitives exactly.

use crate::gaussian::{rotation_from_unit_quat, GaussianPrimitive, GaussianSet, RawGaussianOutput};
use crate::grid::{wrap_lon_delta, FieldTensor, LatLonGrid};
use crate::math::sigmoid;
use crate::parallel;

/// Compositing stops once the transmittance falls below this floor; the
/// remaining contributions are below 1e-9 absolute and the accumulated
/// opacity stays strictly below 1 in floating point.
pub const TRANSMITTANCE_FLOOR: f64 = 1e-9;

/// Culling and truncation settings for a render pass.
#[derive(Debug, Clone, Copy)]
pub struct RenderConfig {
    /// Primitives beyond this Mahalanobis distance are skipped. May be
    /// `f64::INFINITY` for exact brute-force compositing.
    pub mahalanobis_cutoff: f64,
    /// Optional cap on accepted contributors per query point.
    pub max_contributors: Option<usize>,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { mahalanobis_cutoff: 3.0, max_contributors: None }
    }
}

impl RenderConfig {
    /// Exact compositing over all primitives.
    pub fn brute_force() -> Self {
        Self { mahalanobis_cutoff: f64::INFINITY, max_contributors: None }
    }
}

/// Per-primitive quantities hoisted out of the per-point loops: center,
/// opacity, and the six unique entries of the symmetric inverse covariance.
struct PrimTable {
    mu_lat: Vec<f64>,
    mu_lon: Vec<f64>,
    alpha: Vec<f64>,
    // [a00, a01, a02, a11, a12, a22] per primitive.
    inv: Vec<[f64; 6]>,
    max_scale: f64,
}

fn build_table(set: &GaussianSet) -> PrimTable {
    let k = set.len();
    let mut t = PrimTable {
        mu_lat: Vec::with_capacity(k),
        mu_lon: Vec::with_capacity(k),
        alpha: Vec::with_capacity(k),
        inv: Vec::with_capacity(k),
        max_scale: 0.0,
    };
    for p in set.primitives() {
        let a = crate::gaussian::inv_cov_of(p);
        t.inv.push([a[0], a[1], a[2], a[4], a[5], a[8]]);
        t.mu_lat.push(p.mu[0]);
        t.mu_lon.push(p.mu[1]);
        t.alpha.push(p.opacity);
        for &s in &p.scales {
            t.max_scale = t.max_scale.max(s);
        }
    }
    t
}

/// Candidate anchor rows/columns whose nodes can possibly lie within
/// `radius` degrees of the query. Always a superset of the exact set.
struct CandidateWindow {
    rows: std::ops::RangeInclusive<usize>,
    // Candidate columns in ascending index order (at most two runs after
    // unwrapping the seam).
    col_runs: [(usize, usize); 2],
    n_runs: usize,
}

fn candidate_window(anchor: &LatLonGrid, lat: f64, lon: f64, radius: f64) -> CandidateWindow {
    let n_lat = anchor.n_lat();
    let n_lon = anchor.n_lon();
    if !radius.is_finite() {
        return CandidateWindow {
            rows: 0..=n_lat - 1,
            col_runs: [(0, n_lon - 1), (0, 0)],
            n_runs: 1,
        };
    }
    let dlat = anchor.lat_spacing();
    let lo = (((lat - radius) + 90.0) / dlat).floor() as isize - 1;
    let hi = (((lat + radius) + 90.0) / dlat).ceil() as isize + 1;
    let rows = lo.clamp(0, n_lat as isize - 1) as usize..=hi.clamp(0, n_lat as isize - 1) as usize;

    let dlon = anchor.lon_spacing();
    let half = (radius / dlon).ceil() as isize + 1;
    if 2 * half + 1 >= n_lon as isize {
        return CandidateWindow { rows, col_runs: [(0, n_lon - 1), (0, 0)], n_runs: 1 };
    }
    let center = ((lon + 180.0) / dlon).round() as isize;
    let first = (center - half).rem_euclid(n_lon as isize) as usize;
    let last = (center + half).rem_euclid(n_lon as isize) as usize;
    if first <= last {
        CandidateWindow { rows, col_runs: [(first, last), (0, 0)], n_runs: 1 }
    } else {
        // Wrapped: iterate the low run first so indices stay ascending.
        CandidateWindow { rows, col_runs: [(0, last), (first, n_lon - 1)], n_runs: 2 }
    }
}

/// One accepted contributor at a query point, in compositing order.
#[derive(Debug, Clone, Copy)]
struct Contrib {
    idx: usize,
    alpha_hat: f64,
    weight: f64,
    falloff: f64,
    dx: f64,
    dy: f64,
}

/// Visit accepted contributors for one query point in ascending index order,
/// maintaining the transmittance. Returns the final transmittance.
fn composite<F: FnMut(Contrib)>(
    table: &PrimTable,
    anchor: &LatLonGrid,
    lat: f64,
    lon: f64,
    cfg: &RenderConfig,
    mut visit: F,
) -> f64 {
    let radius = cfg.mahalanobis_cutoff * table.max_scale;
    let window = candidate_window(anchor, lat, lon, radius);
    let cutoff_sq = cfg.mahalanobis_cutoff * cfg.mahalanobis_cutoff;
    let n_lon = anchor.n_lon();
    let mut transmittance = 1.0;
    let mut accepted = 0usize;
    let limit = cfg.max_contributors.unwrap_or(usize::MAX);
    'rows: for k in window.rows.clone() {
        let base = k * n_lon;
        for run in 0..window.n_runs {
            let (c0, c1) = window.col_runs[run];
            for m in c0..=c1 {
                let idx = base + m;
                let dx = lat - table.mu_lat[idx];
                let dy = wrap_lon_delta(lon - table.mu_lon[idx]);
                let a = &table.inv[idx];
                let q = a[0] * dx * dx + 2.0 * a[1] * dx * dy + a[3] * dy * dy;
                if !(q <= cutoff_sq) {
                    continue;
                }
                if accepted >= limit || transmittance < TRANSMITTANCE_FLOOR {
                    break 'rows;
                }
                let falloff = (-0.5 * q).exp();
                let alpha_hat = table.alpha[idx] * falloff;
                visit(Contrib { idx, alpha_hat, weight: transmittance, falloff, dx, dy });
                transmittance *= 1.0 - alpha_hat;
                accepted += 1;
            }
        }
    }
    transmittance
}

/// Indices of primitives within the Mahalanobis cutoff of the query point,
/// in compositing (ascending index) order, truncated to `max_contributors`.
pub fn overlap_set(set: &GaussianSet, lat: f64, lon: f64, cfg: &RenderConfig) -> Vec<usize> {
    let table = build_table(set);
    let mut out = Vec::new();
    composite(&table, set.anchor(), lat, lon, cfg, |c| out.push(c.idx));
    out
}

/// Opacity modulated by the Gaussian falloff at a query point on the z = 1
/// plane: `alpha * exp(-d^T sigma^-1 d / 2)` with wrapped longitude delta.
pub fn effective_opacity(g: &GaussianPrimitive, lat: f64, lon: f64) -> f64 {
    let inv = crate::gaussian::inv_cov_of(g);
    let dx = lat - g.mu[0];
    let dy = wrap_lon_delta(lon - g.mu[1]);
    let q = inv[0] * dx * dx + 2.0 * inv[1] * dx * dy + inv[4] * dy * dy;
    g.opacity * (-0.5 * q).exp()
}

/// Composite the feature vectors of all contributors at one query point.
/// Returns the all-zeros vector when nothing overlaps.
pub fn render_point(set: &GaussianSet, lat: f64, lon: f64, cfg: &RenderConfig) -> Vec<f64> {
    let table = build_table(set);
    render_point_with(&table, set, lat, lon, cfg).0
}

/// Accumulated opacity `sum_i alpha_hat_i w_i` at a query point, computed as
/// one minus the final transmittance; strictly below 1 by construction.
pub fn accumulated_opacity(set: &GaussianSet, lat: f64, lon: f64, cfg: &RenderConfig) -> f64 {
    let table = build_table(set);
    let t = composite(&table, set.anchor(), lat, lon, cfg, |_| {});
    1.0 - t
}

fn render_point_with(
    table: &PrimTable,
    set: &GaussianSet,
    lat: f64,
    lon: f64,
    cfg: &RenderConfig,
) -> (Vec<f64>, f64) {
    let n_vars = set.primitives().first().map_or(0, |p| p.features.len());
    let mut out = vec![0.0; n_vars];
    let prims = set.primitives();
    let t = composite(table, set.anchor(), lat, lon, cfg, |c| {
        let w = c.alpha_hat * c.weight;
        for (o, f) in out.iter_mut().zip(&prims[c.idx].features) {
            *o += f * w;
        }
    });
    (out, t)
}

/// Render the set at every node of `target`. Each node is a pure function of
/// (set, node coordinate, cfg); the batch layout never changes values.
pub fn render_grid(set: &GaussianSet, target: &LatLonGrid, cfg: &RenderConfig) -> FieldTensor {
    let table = build_table(set);
    let n_vars = set.primitives().first().map_or(0, |p| p.features.len());
    let (n_lat, n_lon) = (target.n_lat(), target.n_lon());
    let rows: Vec<Vec<f64>> = parallel::map_indexed(n_lat, |k| {
        let mut row = vec![0.0; n_lon * n_vars];
        for m in 0..n_lon {
            let (vals, _) = render_point_with(&table, set, target.lat(k), target.lon(m), cfg);
            for (v, val) in vals.into_iter().enumerate() {
                row[v * n_lon + m] = val;
            }
        }
        row
    });
    let mut out = FieldTensor::zeros(target.clone(), n_vars);
    let values = out.values_mut();
    for (k, row) in rows.into_iter().enumerate() {
        for v in 0..n_vars {
            let dst = (v * n_lat + k) * n_lon;
            values[dst..dst + n_lon].copy_from_slice(&row[v * n_lon..(v + 1) * n_lon]);
        }
    }
    out
}

/// Adjoints of [`render_grid`] with respect to the primitive parameters.
///
/// Gradients are reported in the activated parameter space (features,
/// opacity, unit quaternion, positive scales) plus the center; use
/// [`chain_raw`] to compose them with the decoder activations. Centers
/// receive gradients only so the learnable-position ablation can use them;
/// the default training path ignores `d_mu`.
#[derive(Debug, Clone)]
pub struct RenderGrads {
    pub d_features: Vec<Vec<f64>>,
    pub d_opacity: Vec<f64>,
    pub d_quat: Vec<[f64; 4]>,
    pub d_scales: Vec<[f64; 3]>,
    pub d_mu: Vec<[f64; 2]>,
}

/// Gradients with respect to the pre-activation decoder outputs.
#[derive(Debug, Clone)]
pub struct RawGrads {
    pub d_feature_logits: Vec<Vec<f64>>,
    pub d_quat_raw: Vec<[f64; 4]>,
    pub d_scale_raw: Vec<[f64; 3]>,
    pub d_opacity_logit: Vec<f64>,
}

/// Per-row accumulator merged in fixed row order for bit determinism.
struct Partial {
    d_features: Vec<f64>, // K * n_vars
    d_alpha: Vec<f64>,    // K
    g_sigma: Vec<[f64; 6]>, // K, symmetric (00, 01, 02, 11, 12, 22)
    d_mu: Vec<[f64; 2]>,  // K
}

impl Partial {
    fn new(k: usize, n_vars: usize) -> Self {
        Self {
            d_features: vec![0.0; k * n_vars],
            d_alpha: vec![0.0; k],
            g_sigma: vec![[0.0; 6]; k],
            d_mu: vec![[0.0; 2]; k],
        }
    }

    fn merge(&mut self, other: &Partial) {
        for (a, b) in self.d_features.iter_mut().zip(&other.d_features) {
            *a += b;
        }
        for (a, b) in self.d_alpha.iter_mut().zip(&other.d_alpha) {
            *a += b;
        }
        for (a, b) in self.g_sigma.iter_mut().zip(&other.g_sigma) {
            for i in 0..6 {
                a[i] += b[i];
            }
        }
        for (a, b) in self.d_mu.iter_mut().zip(&other.d_mu) {
            a[0] += b[0];
            a[1] += b[1];
        }
    }
}

/// Exact adjoint of [`render_grid`]: pull `upstream` (a gradient field on the
/// target grid) back onto the primitive parameters.
pub fn render_grid_backward(
    set: &GaussianSet,
    target: &LatLonGrid,
    cfg: &RenderConfig,
    upstream: &FieldTensor,
) -> RenderGrads {
    assert_eq!(upstream.grid(), target, "upstream gradient must live on the target grid");
    let table = build_table(set);
    let prims = set.primitives();
    let k_total = prims.len();
    let n_vars = prims.first().map_or(0, |p| p.features.len());
    let (n_lat, n_lon) = (target.n_lat(), target.n_lon());

    let partials: Vec<Partial> = parallel::map_indexed(n_lat, |k| {
        let mut part = Partial::new(k_total, n_vars);
        let mut contribs: Vec<Contrib> = Vec::new();
        let mut gdot: Vec<f64> = Vec::new();
        for m in 0..n_lon {
            contribs.clear();
            composite(&table, set.anchor(), target.lat(k), target.lon(m), cfg, |c| {
                contribs.push(c);
            });
            if contribs.is_empty() {
                continue;
            }
            // Upstream gradient vector at this node and its dot products with
            // the contributor features.
            gdot.clear();
            for c in contribs.iter() {
                let mut acc = 0.0;
                for (v, f) in prims[c.idx].features.iter().enumerate() {
                    acc += upstream.get(v, k, m) * f;
                }
                gdot.push(acc);
                // d features: g * (alpha_hat * w)
                let fw = c.alpha_hat * c.weight;
                let row = &mut part.d_features[c.idx * n_vars..(c.idx + 1) * n_vars];
                for (v, slot) in row.iter_mut().enumerate() {
                    *slot += upstream.get(v, k, m) * fw;
                }
            }
            // Reverse sweep: d alpha_hat_i = gdot_i w_i - S_i / (1 - alpha_hat_i)
            // with S_i the suffix sum of gdot_j alpha_hat_j w_j over j > i.
            let mut suffix = 0.0;
            for (c, &gd) in contribs.iter().zip(gdot.iter()).rev() {
                let d_ahat = gd * c.weight - suffix / (1.0 - c.alpha_hat);
                suffix += gd * c.alpha_hat * c.weight;

                part.d_alpha[c.idx] += d_ahat * c.falloff;
                // alpha_hat = alpha * exp(-Q/2) => dQ = -alpha_hat/2 * d_ahat
                let dq = -0.5 * c.alpha_hat * d_ahat;
                // u = sigma^-1 d (3-vector; d has no z component).
                let a = &table.inv[c.idx];
                let u = [
                    a[0] * c.dx + a[1] * c.dy,
                    a[1] * c.dx + a[3] * c.dy,
                    a[2] * c.dx + a[4] * c.dy,
                ];
                // dQ/dSigma = -u u^T
                let g = &mut part.g_sigma[c.idx];
                g[0] -= dq * u[0] * u[0];
                g[1] -= dq * u[0] * u[1];
                g[2] -= dq * u[0] * u[2];
                g[3] -= dq * u[1] * u[1];
                g[4] -= dq * u[1] * u[2];
                g[5] -= dq * u[2] * u[2];
                // dQ/dmu = -2 u (in-plane components).
                part.d_mu[c.idx][0] -= 2.0 * dq * u[0];
                part.d_mu[c.idx][1] -= 2.0 * dq * u[1];
            }
        }
        part
    });

    let mut total = Partial::new(k_total, n_vars);
    for p in &partials {
        total.merge(p);
    }
    finalize_grads(set, total, n_vars)
}

/// Chain the accumulated covariance gradients through
/// `sigma = R diag(s)^2 R^T` and package everything per primitive.
fn finalize_grads(set: &GaussianSet, total: Partial, n_vars: usize) -> RenderGrads {
    let prims = set.primitives();
    let k_total = prims.len();
    let mut out = RenderGrads {
        d_features: Vec::with_capacity(k_total),
        d_opacity: total.d_alpha,
        d_quat: vec![[0.0; 4]; k_total],
        d_scales: vec![[0.0; 3]; k_total],
        d_mu: total.d_mu,
    };
    for i in 0..k_total {
        out.d_features.push(total.d_features[i * n_vars..(i + 1) * n_vars].to_vec());
        let p = &prims[i];
        let gs = &total.g_sigma[i];
        let g = [gs[0], gs[1], gs[2], gs[1], gs[3], gs[4], gs[2], gs[4], gs[5]];
        let q = &p.quat;
        let r = rotation_from_unit_quat(q[0], q[1], q[2], q[3]);
        let d = [
            p.scales[0] * p.scales[0],
            p.scales[1] * p.scales[1],
            p.scales[2] * p.scales[2],
        ];
        // dL/dR = 2 G R D (G symmetric).
        let mut dr = [0.0; 9];
        for a in 0..3 {
            for b in 0..3 {
                let mut acc = 0.0;
                for c in 0..3 {
                    acc += g[a * 3 + c] * r[c * 3 + b];
                }
                dr[a * 3 + b] = 2.0 * acc * d[b];
            }
        }
        // dL/ds_k = 2 s_k (R^T G R)_kk.
        for kk in 0..3 {
            let mut acc = 0.0;
            for a in 0..3 {
                for b in 0..3 {
                    acc += r[a * 3 + kk] * g[a * 3 + b] * r[b * 3 + kk];
                }
            }
            out.d_scales[i][kk] = 2.0 * p.scales[kk] * acc;
        }
        // Contract dR with the partial derivatives of the unit-quaternion
        // rotation formula.
        let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
        let dr_dq: [[f64; 9]; 4] = [
            [0.0, -z, y, z, 0.0, -x, -y, x, 0.0],
            [0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x],
            [-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y],
            [-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0],
        ];
        for c in 0..4 {
            let mut acc = 0.0;
            for e in 0..9 {
                acc += dr[e] * 2.0 * dr_dq[c][e];
            }
            out.d_quat[i][c] = acc;
        }
    }
    out
}

/// Compose [`RenderGrads`] with the decoder activations, producing gradients
/// with respect to the raw decoder outputs. `raws` must be the same outputs
/// the rendered set was activated from.
pub fn chain_raw(set: &GaussianSet, grads: &RenderGrads, raws: &[RawGaussianOutput]) -> RawGrads {
    let prims = set.primitives();
    assert_eq!(prims.len(), raws.len());
    let mut out = RawGrads {
        d_feature_logits: Vec::with_capacity(raws.len()),
        d_quat_raw: vec![[0.0; 4]; raws.len()],
        d_scale_raw: vec![[0.0; 3]; raws.len()],
        d_opacity_logit: vec![0.0; raws.len()],
    };
    for (i, raw) in raws.iter().enumerate() {
        let p = &prims[i];
        // features: f = sigmoid(l) => df/dl = f (1 - f)
        out.d_feature_logits.push(
            grads.d_features[i]
                .iter()
                .zip(&p.features)
                .map(|(g, f)| g * f * (1.0 - f))
                .collect(),
        );
        // opacity: a = sigmoid(l) (1 - eps)
        let s = sigmoid(raw.opacity_logit);
        out.d_opacity_logit[i] =
            grads.d_opacity[i] * s * (1.0 - s) * (1.0 - crate::gaussian::OPACITY_EPS);
        // scales: s = softplus(raw) + eps => ds/draw = sigmoid(raw)
        for c in 0..3 {
            out.d_scale_raw[i][c] = grads.d_scales[i][c] * sigmoid(raw.scale_raw[c]);
        }
        // quaternion: unit = raw / |raw| => J = (I - u u^T) / |raw|
        let n = (raw.quat_raw.iter().map(|v| v * v).sum::<f64>()).sqrt();
        let u = &p.quat;
        let dot: f64 = (0..4).map(|c| grads.d_quat[i][c] * u[c]).sum();
        for c in 0..4 {
            out.d_quat_raw[i][c] = (grads.d_quat[i][c] - dot * u[c]) / n;
        }
    }
    out
}

/// Build an activated Gaussian set from flat decoder buffers: `features`
/// `[K, n_vars]` logits, `gauss` `[K, 8]` raw `(quat, scales, opacity)`, and
/// optional `[K, 2]` position offsets added to the lattice coordinates.
pub fn set_from_raw_buffers(
    anchor: &LatLonGrid,
    n_vars: usize,
    features: &[f64],
    gauss: &[f64],
    offsets: Option<&[f64]>,
) -> Result<(GaussianSet, Vec<RawGaussianOutput>), crate::gaussian::GaussianError> {
    let k = anchor.len();
    debug_assert_eq!(features.len(), k * n_vars);
    debug_assert_eq!(gauss.len(), k * 8);
    let mut prims = Vec::with_capacity(k);
    let mut raws = Vec::with_capacity(k);
    for i in 0..k {
        let raw = RawGaussianOutput {
            feature_logits: features[i * n_vars..(i + 1) * n_vars].to_vec(),
            quat_raw: [gauss[i * 8], gauss[i * 8 + 1], gauss[i * 8 + 2], gauss[i * 8 + 3]],
            scale_raw: [gauss[i * 8 + 4], gauss[i * 8 + 5], gauss[i * 8 + 6]],
            opacity_logit: gauss[i * 8 + 7],
        };
        let (kk, mm) = (i / anchor.n_lon(), i % anchor.n_lon());
        let (mut lat, mut lon) = (anchor.lat(kk), anchor.lon(mm));
        if let Some(off) = offsets {
            lat = (lat + off[i * 2]).clamp(-90.0, 90.0);
            lon = crate::grid::wrap_lon(lon + off[i * 2 + 1]);
        }
        prims.push(crate::gaussian::activate_raw(&raw)?.at(lat, lon));
        raws.push(raw);
    }
    Ok((GaussianSet::free(anchor.clone(), prims), raws))
}

/// Differentiable splatting node for the tensor graph.
///
/// Inputs: feature logits `[K, n_vars]`, raw Gaussian parameters `[K, 8]`,
/// and (when position learning is on) offsets `[K, 2]`. Output: the rendered
/// field `[n_vars, n_lat, n_lon]` on the target grid. Forward activates the
/// raw outputs and composites; backward is the exact hand-written adjoint
/// chained through the activations. A degenerate quaternion surfaces as a
/// non-finite output, which the graph rejects at this op.
pub struct SplatRenderOp {
    pub anchor: LatLonGrid,
    pub target: LatLonGrid,
    pub cfg: RenderConfig,
    pub n_vars: usize,
}

impl crate::autodiff::CustomOp for SplatRenderOp {
    fn name(&self) -> &'static str {
        "splat_render"
    }

    fn forward(&self, inputs: &[(&[usize], &[f64])]) -> (Vec<usize>, Vec<f64>) {
        let shape = vec![self.n_vars, self.target.n_lat(), self.target.n_lon()];
        let offsets = inputs.get(2).map(|(_, v)| *v);
        match set_from_raw_buffers(&self.anchor, self.n_vars, inputs[0].1, inputs[1].1, offsets) {
            Ok((set, _)) => {
                let rendered = render_grid(&set, &self.target, &self.cfg);
                let len = rendered.values().len();
                debug_assert_eq!(len, shape.iter().product::<usize>());
                (shape, rendered.into_values())
            }
            Err(_) => {
                let len = shape.iter().product();
                (shape, vec![f64::NAN; len])
            }
        }
    }

    fn backward(
        &self,
        inputs: &[(&[usize], &[f64])],
        output_grad: &[f64],
    ) -> Vec<Option<Vec<f64>>> {
        let offsets = inputs.get(2).map(|(_, v)| *v);
        let (set, raws) =
            set_from_raw_buffers(&self.anchor, self.n_vars, inputs[0].1, inputs[1].1, offsets)
                .expect("forward already validated the raw outputs");
        let upstream = FieldTensor::new(self.target.clone(), self.n_vars, output_grad.to_vec())
            .expect("gradient buffer matches the target grid");
        let grads = render_grid_backward(&set, &self.target, &self.cfg, &upstream);
        let raw = chain_raw(&set, &grads, &raws);
        let k = set.len();
        let mut d_feat = Vec::with_capacity(k * self.n_vars);
        for row in &raw.d_feature_logits {
            d_feat.extend_from_slice(row);
        }
        let mut d_gauss = Vec::with_capacity(k * 8);
        for i in 0..k {
            d_gauss.extend_from_slice(&raw.d_quat_raw[i]);
            d_gauss.extend_from_slice(&raw.d_scale_raw[i]);
            d_gauss.push(raw.d_opacity_logit[i]);
        }
        let mut out = vec![Some(d_feat), Some(d_gauss)];
        if inputs.len() > 2 {
            let mut d_mu = Vec::with_capacity(k * 2);
            for g in &grads.d_mu {
                d_mu.extend_from_slice(g);
            }
            out.push(Some(d_mu));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::activate_raw;
    use crate::grid::LatLonGrid;
    use rand::{Rng, SeedableRng};

    /// Random activated set on a grid, with moderate parameter magnitudes.
    fn random_set(
        grid: &LatLonGrid,
        n_vars: usize,
        rng: &mut impl Rng,
        scale_lo: f64,
        scale_hi: f64,
    ) -> (GaussianSet, Vec<RawGaussianOutput>) {
        use crate::math::inv_softplus;
        let mut prims = Vec::new();
        let mut raws = Vec::new();
        for k in 0..grid.n_lat() {
            for m in 0..grid.n_lon() {
                let raw = RawGaussianOutput {
                    feature_logits: (0..n_vars).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                    quat_raw: std::array::from_fn(|_| rng.gen_range(-1.0..1.0)),
                    scale_raw: std::array::from_fn(|_| {
                        inv_softplus(rng.gen_range(scale_lo..scale_hi))
                    }),
                    opacity_logit: rng.gen_range(-1.0..2.0),
                };
                let p = activate_raw(&raw).unwrap().at(grid.lat(k), grid.lon(m));
                prims.push(p);
                raws.push(raw);
            }
        }
        (GaussianSet::anchored(grid.clone(), prims).unwrap(), raws)
    }

    /// Reference compositing: scan all K primitives in index order with no
    /// candidate window, applying the same cutoff test, contributor limit,
    /// and transmittance floor as the production path.
    fn brute_force_point(set: &GaussianSet, lat: f64, lon: f64, cfg: &RenderConfig) -> Vec<f64> {
        let n_vars = set.primitives()[0].features.len();
        let cutoff_sq = cfg.mahalanobis_cutoff * cfg.mahalanobis_cutoff;
        let limit = cfg.max_contributors.unwrap_or(usize::MAX);
        let mut out = vec![0.0; n_vars];
        let mut w = 1.0;
        let mut accepted = 0usize;
        for p in set.primitives() {
            let inv = crate::gaussian::inv_cov_of(p);
            let dx = lat - p.mu[0];
            let dy = wrap_lon_delta(lon - p.mu[1]);
            let q = inv[0] * dx * dx + 2.0 * inv[1] * dx * dy + inv[4] * dy * dy;
            if !(q <= cutoff_sq) {
                continue;
            }
            if accepted >= limit || w < TRANSMITTANCE_FLOOR {
                break;
            }
            let ah = p.opacity * (-0.5 * q).exp();
            let fw = ah * w;
            for (o, f) in out.iter_mut().zip(&p.features) {
                *o += f * fw;
            }
            w *= 1.0 - ah;
            accepted += 1;
        }
        out
    }

    #[test]
    fn far_point_has_empty_overlap() {
        let grid = LatLonGrid::build(3, 4).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let (mut set, _) = random_set(&grid, 2, &mut rng, 0.5, 1.0);
        // Crowd everything near one node so a distant point sees nothing.
        for p in set.primitives_mut() {
            p.mu = [-90.0, -180.0, 1.0];
        }
        let set = GaussianSet::free(grid, set.primitives().to_vec());
        let cfg = RenderConfig::default();
        assert!(overlap_set(&set, 90.0, 90.0, &cfg).is_empty());
        assert_eq!(render_point(&set, 90.0, 90.0, &cfg), vec![0.0, 0.0]);
    }

    #[test]
    fn point_at_center_is_listed_and_opacity_is_alpha() {
        let grid = LatLonGrid::build(3, 4).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let (set, _) = random_set(&grid, 1, &mut rng, 0.5, 2.0);
        let cfg = RenderConfig::default();
        let j = 5;
        let p = &set.primitives()[j];
        assert!(overlap_set(&set, p.mu[0], p.mu[1], &cfg).contains(&j));
        let ah = effective_opacity(p, p.mu[0], p.mu[1]);
        assert!((ah - p.opacity).abs() < 1e-15);
    }

    #[test]
    fn effective_opacity_closed_forms() {
        let g = GaussianPrimitive {
            mu: [0.0, 0.0, 1.0],
            quat: [1.0, 0.0, 0.0, 0.0],
            scales: [2.0, 2.0, 2.0],
            opacity: 0.7,
            features: vec![],
        };
        // Isotropic sigma = 4 I; |d| = 3 sigma in-plane => Q = 9, a_hat = a e^-4.5.
        let ah = effective_opacity(&g, 6.0, 0.0);
        assert!((ah - 0.7 * (-4.5f64).exp()).abs() < 1e-15);
        // d^T sigma^-1 d = 2 => a e^-1.
        let d = (2.0f64).sqrt() * 2.0;
        let ah = effective_opacity(&g, d, 0.0);
        assert!((ah - 0.7 * (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn overlap_membership_matches_brute_force() {
        let grid = LatLonGrid::build(5, 8).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (set, _) = random_set(&grid, 1, &mut rng, 5.0, 40.0);
        let cfg = RenderConfig::default();
        for _ in 0..50 {
            let lat = rng.gen_range(-90.0..=90.0);
            let lon = rng.gen_range(-180.0..180.0);
            let got = overlap_set(&set, lat, lon, &cfg);
            let mut want = Vec::new();
            for (i, p) in set.primitives().iter().enumerate() {
                let inv = crate::gaussian::inv_cov_of(p);
                let dx = lat - p.mu[0];
                let dy = wrap_lon_delta(lon - p.mu[1]);
                let q = inv[0] * dx * dx + 2.0 * inv[1] * dx * dy + inv[4] * dy * dy;
                if q.sqrt() <= cfg.mahalanobis_cutoff {
                    want.push(i);
                }
            }
            assert_eq!(got, want);
        }
    }

    #[test]
    fn single_and_double_contributor_formulas() {
        let grid = LatLonGrid::build(2, 2).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let (mut set, _) = random_set(&grid, 2, &mut rng, 1.0, 3.0);
        // Zero out all but two primitives.
        for p in &mut set.primitives_mut()[2..] {
            p.opacity = 0.0;
        }
        let set = GaussianSet::free(grid, set.primitives().to_vec());
        let cfg = RenderConfig::brute_force();
        let (lat, lon) = (-30.0, -120.0);
        let p0 = &set.primitives()[0];
        let p1 = &set.primitives()[1];
        let a0 = effective_opacity(p0, lat, lon);
        let a1 = effective_opacity(p1, lat, lon);
        let got = render_point(&set, lat, lon, &cfg);
        for v in 0..2 {
            let want = a0 * p0.features[v] + (1.0 - a0) * a1 * p1.features[v];
            assert!((got[v] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn grid_render_matches_brute_force_oracle() {
        let grid = LatLonGrid::build(3, 4).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let (mut set, _) = random_set(&grid, 2, &mut rng, 1.0, 6.0);
        for (i, p) in set.primitives_mut().iter_mut().enumerate() {
            if i != 3 && i != 9 {
                p.opacity = 0.0;
            }
        }
        let set = GaussianSet::free(grid.clone(), set.primitives().to_vec());
        let target = LatLonGrid::build(5, 8).unwrap();
        let cfg = RenderConfig::brute_force();
        let out = render_grid(&set, &target, &cfg);
        for k in 0..5 {
            for m in 0..8 {
                let want = brute_force_point(&set, target.lat(k), target.lon(m), &RenderConfig::brute_force());
                for v in 0..2 {
                    assert!((out.get(v, k, m) - want[v]).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn candidate_window_never_changes_results() {
        // The window prunes only provably out-of-cutoff primitives, so the
        // windowed render must equal a full scan at the same cutoff bit for
        // bit.
        let grid = LatLonGrid::build(9, 16).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let (set, _) = random_set(&grid, 2, &mut rng, 4.0, 20.0);
        let cfg = RenderConfig::default();
        let target = LatLonGrid::build(17, 32).unwrap();
        let windowed = render_grid(&set, &target, &cfg);
        for k in 0..target.n_lat() {
            for m in 0..target.n_lon() {
                let want = brute_force_point(&set, target.lat(k), target.lon(m), &cfg);
                for v in 0..2 {
                    assert_eq!(windowed.get(v, k, m).to_bits(), want[v].to_bits());
                }
            }
        }
    }

    #[test]
    fn culling_deviation_is_bounded_by_tail_mass() {
        // Dropping contributors beyond 3 sigma perturbs the output by at most
        // the e^-4.5 tail scale of the compositing weights.
        let grid = LatLonGrid::build(9, 16).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let (set, _) = random_set(&grid, 2, &mut rng, 6.0, 20.0);
        let cfg = RenderConfig::default();
        let target = LatLonGrid::build(17, 32).unwrap();
        let culled = render_grid(&set, &target, &cfg);
        let brute = render_grid(&set, &target, &RenderConfig::brute_force());
        let tail = (-4.5f64).exp();
        let mut num = 0.0;
        let mut den = 0.0;
        for (a, b) in culled.values().iter().zip(brute.values()) {
            // Each dropped contributor perturbs one point by O(e^-4.5).
            assert!((a - b).abs() < 10.0 * tail, "{a} vs {b}");
            num += (a - b) * (a - b);
            den += b * b;
        }
        assert!((num / den).sqrt() < 2.0 * tail, "aggregate rel {}", (num / den).sqrt());
    }

    #[test]
    fn shared_refinement_nodes_render_bit_identically() {
        let anchor = LatLonGrid::build(5, 8).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let (set, _) = random_set(&anchor, 1, &mut rng, 3.0, 15.0);
        let cfg = RenderConfig::default();
        let r2 = render_grid(&set, &anchor.refine(2.0).unwrap(), &cfg);
        let r4 = render_grid(&set, &anchor.refine(4.0).unwrap(), &cfg);
        let (lk, lm) = r2.grid().node_map_into(r4.grid()).unwrap();
        for k in 0..r2.grid().n_lat() {
            for m in 0..r2.grid().n_lon() {
                let a = r2.get(0, k, m);
                let b = r4.get(0, lk[k], lm[m]);
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn longitude_full_turn_bit_identical() {
        let grid = LatLonGrid::build(5, 8).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let (set, _) = random_set(&grid, 1, &mut rng, 2.0, 10.0);
        let cfg = RenderConfig::default();
        for _ in 0..100 {
            let lat = rng.gen_range(-90.0..=90.0);
            // Dyadic longitudes so lon + 360 is exactly representable.
            let lon = rng.gen_range(-2880i32..2880) as f64 / 16.0;
            let a = render_point(&set, lat, lon, &cfg);
            let b = render_point(&set, lat, lon + 360.0, &cfg);
            for (x, y) in a.iter().zip(&b) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn accumulated_opacity_strictly_below_one() {
        let grid = LatLonGrid::build(5, 8).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        // Large scales and high opacities: everything overlaps everything.
        let (mut set, _) = random_set(&grid, 1, &mut rng, 30.0, 120.0);
        for p in set.primitives_mut() {
            p.opacity = 1.0 - 1e-6;
        }
        let set = GaussianSet::free(grid, set.primitives().to_vec());
        let cfg = RenderConfig::brute_force();
        for _ in 0..200 {
            let lat = rng.gen_range(-90.0..=90.0);
            let lon = rng.gen_range(-180.0..180.0);
            let s = accumulated_opacity(&set, lat, lon, &cfg);
            assert!((0.0..1.0).contains(&s), "sum = {s}");
        }
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let grid = LatLonGrid::build(3, 4).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
        let (set, _) = random_set(&grid, 2, &mut rng, 1.0, 5.0);
        let target = LatLonGrid::build(5, 8).unwrap();
        let upstream = FieldTensor::zeros(target.clone(), 2);
        let g = render_grid_backward(&set, &target, &RenderConfig::default(), &upstream);
        assert!(g.d_opacity.iter().all(|&v| v == 0.0));
        assert!(g.d_features.iter().flatten().all(|&v| v == 0.0));
        assert!(g.d_quat.iter().flatten().all(|&v| v == 0.0));
        assert!(g.d_scales.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn single_gaussian_feature_grad_is_alpha() {
        // One query at the center: dF/df = alpha_hat = alpha.
        let grid = LatLonGrid::build(2, 2).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let (mut set, _) = random_set(&grid, 1, &mut rng, 1.0, 2.0);
        for p in &mut set.primitives_mut()[1..] {
            p.opacity = 0.0;
        }
        let alpha = set.primitives()[0].opacity;
        let set = GaussianSet::free(grid.clone(), set.primitives().to_vec());
        // Target grid whose first node is the first primitive center.
        let target = LatLonGrid::build(2, 2).unwrap();
        let mut upstream = FieldTensor::zeros(target.clone(), 1);
        upstream.set(0, 0, 0, 1.0);
        let g = render_grid_backward(&set, &target, &RenderConfig::default(), &upstream);
        assert!((g.d_features[0][0] - alpha).abs() < 1e-12);
    }

    /// Central-difference check of the full backward pass through the
    /// activations, on a small random instance.
    #[test]
    fn finite_difference_raw_grads() {
        let grid = LatLonGrid::build(3, 4).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let (set, raws) = random_set(&grid, 2, &mut rng, 8.0, 30.0);
        let target = LatLonGrid::build(5, 8).unwrap();
        let cfg = RenderConfig::brute_force();
        // Random upstream gradient and the loss L = <upstream, render>.
        let upstream_values: Vec<f64> =
            (0..2 * target.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let upstream = FieldTensor::new(target.clone(), 2, upstream_values).unwrap();
        let loss = |raws: &[RawGaussianOutput]| -> f64 {
            let prims: Vec<GaussianPrimitive> = raws
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    let (k, m) = (i / grid.n_lon(), i % grid.n_lon());
                    activate_raw(r).unwrap().at(grid.lat(k), grid.lon(m))
                })
                .collect();
            let s = GaussianSet::anchored(grid.clone(), prims).unwrap();
            let rendered = render_grid(&s, &target, &cfg);
            rendered.values().iter().zip(upstream.values()).map(|(a, b)| a * b).sum()
        };

        let grads = render_grid_backward(&set, &target, &cfg, &upstream);
        let raw_grads = chain_raw(&set, &grads, &raws);

        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let mut check = |analytic: f64, perturb: &dyn Fn(&mut Vec<RawGaussianOutput>, f64)| {
            let mut plus = raws.clone();
            perturb(&mut plus, h);
            let mut minus = raws.clone();
            perturb(&mut minus, -h);
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-8);
            worst = worst.max(rel);
            assert!(rel < 1e-4, "analytic {analytic} vs fd {fd} (rel {rel})");
        };

        for i in 0..raws.len() {
            for v in 0..2 {
                check(raw_grads.d_feature_logits[i][v], &move |r, eps| {
                    r[i].feature_logits[v] += eps
                });
            }
            check(raw_grads.d_opacity_logit[i], &move |r, eps| r[i].opacity_logit += eps);
            for c in 0..4 {
                check(raw_grads.d_quat_raw[i][c], &move |r, eps| r[i].quat_raw[c] += eps);
            }
            for c in 0..3 {
                check(raw_grads.d_scale_raw[i][c], &move |r, eps| r[i].scale_raw[c] += eps);
            }
        }
        assert!(worst < 1e-4);
    }

    #[test]
    fn graph_render_op_passes_grad_check() {
        use crate::autodiff::check::{grad_check, CheckInput};
        use std::rc::Rc;
        let grid = LatLonGrid::build(2, 2).unwrap();
        let target = LatLonGrid::build(3, 4).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(20);
        let n_vars = 2;
        let k = grid.len();
        let inputs = vec![
            CheckInput {
                name: "features".into(),
                shape: vec![k, n_vars],
                values: (0..k * n_vars).map(|_| rng.gen_range(-1.5..1.5)).collect(),
            },
            CheckInput {
                name: "gauss".into(),
                shape: vec![k, 8],
                values: (0..k)
                    .flat_map(|_| {
                        let q: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
                        let s: Vec<f64> =
                            (0..3).map(|_| rng.gen_range(2.0f64..3.5).ln_1p()).collect();
                        [q, s, vec![rng.gen_range(-0.5..1.5)]].concat()
                    })
                    .collect(),
            },
        ];
        let anchor = grid.clone();
        let tgt = target.clone();
        let report = grad_check(
            move |g, t| {
                let op = Rc::new(SplatRenderOp {
                    anchor: anchor.clone(),
                    target: tgt.clone(),
                    cfg: RenderConfig::brute_force(),
                    n_vars,
                });
                let rendered = g.custom(op, &[&t[0], &t[1]])?;
                rendered.mul(&rendered)?.reduce_mean(None)
            },
            &inputs,
            1e-5,
            1e-9,
            None,
        )
        .unwrap();
        assert!(report.passes(1e-4), "max rel err {} at {:?}", report.max_rel_err, report.worst);
    }

    #[test]
    fn max_contributors_truncates_in_index_order() {
        let grid = LatLonGrid::build(3, 4).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let (set, _) = random_set(&grid, 1, &mut rng, 40.0, 80.0);
        let all = overlap_set(&set, 0.0, 0.0, &RenderConfig::brute_force());
        assert_eq!(all.len(), 12);
        let cfg = RenderConfig { mahalanobis_cutoff: f64::INFINITY, max_contributors: Some(5) };
        let some = overlap_set(&set, 0.0, 0.0, &cfg);
        assert_eq!(some, &all[..5]);
    }
}
