//! Anisotropic Gaussian primitives anchored on a latitude-longitude grid.
//!
//! A primitive lives in the degree-unit coordinate space (lat, lon, z): its
//! center sits at a grid node with the fixed vertical coordinate z = 1, and
//! its covariance is built from a unit quaternion and three positive scale
//! factors as `sigma = R * diag(s)^2 * R^T`, so the scale factors carry
//! degree units and the eigenvalues of sigma are exactly `{s^2}`.

use crate::grid::{wrap_lon_delta, LatLonGrid};
use crate::math::{sigmoid, softplus};
use thiserror::Error;

/// Floor added to activated scales so the covariance never degenerates.
pub const SCALE_EPS: f64 = 1e-6;
/// Shrink applied to activated opacities so they stay strictly below 1.
pub const OPACITY_EPS: f64 = 1e-6;
/// Quaternions with a norm at or below this are rejected.
pub const QUAT_NORM_MIN: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum GaussianError {
    #[error("degenerate quaternion with norm {0:e}")]
    DegenerateQuaternion(f64),
    #[error("non-positive scale factor {0}")]
    NonPositiveScale(f64),
    #[error("invalid primitive: {0}")]
    InvalidPrimitive(String),
}

/// Pre-activation decoder output for one primitive.
#[derive(Debug, Clone, PartialEq)]
pub struct RawGaussianOutput {
    pub feature_logits: Vec<f64>,
    pub quat_raw: [f64; 4],
    pub scale_raw: [f64; 3],
    pub opacity_logit: f64,
}

/// One activated Gaussian: center in (lat deg, lon deg, z), unit quaternion
/// in (w, x, y, z) order, positive scales, opacity in [0, 1), and per-variable
/// features in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrimitive {
    pub mu: [f64; 3],
    pub quat: [f64; 4],
    pub scales: [f64; 3],
    pub opacity: f64,
    pub features: Vec<f64>,
}

impl GaussianPrimitive {
    /// Check the primitive invariants.
    pub fn validate(&self) -> Result<(), GaussianError> {
        let norm = quat_norm(&self.quat);
        if (norm - 1.0).abs() > 1e-9 {
            return Err(GaussianError::InvalidPrimitive(format!(
                "quaternion norm {norm} is not 1"
            )));
        }
        if let Some(&s) = self.scales.iter().find(|s| !(**s > 0.0)) {
            return Err(GaussianError::NonPositiveScale(s));
        }
        if !(0.0..1.0).contains(&self.opacity) {
            return Err(GaussianError::InvalidPrimitive(format!(
                "opacity {} outside [0, 1)",
                self.opacity
            )));
        }
        if self.features.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(GaussianError::InvalidPrimitive("feature outside [0, 1]".into()));
        }
        if self.mu[2] != 1.0 {
            return Err(GaussianError::InvalidPrimitive(format!(
                "mu.z = {} but the vertical coordinate is fixed at 1",
                self.mu[2]
            )));
        }
        Ok(())
    }

    /// Place the primitive at a grid coordinate (z stays 1).
    pub fn at(mut self, lat: f64, lon: f64) -> Self {
        self.mu = [lat, lon, 1.0];
        self
    }
}

fn quat_norm(q: &[f64; 4]) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

/// Rotation matrix (row-major 3x3) of a quaternion in (w, x, y, z) order.
/// The quaternion is normalized internally; the norm must exceed
/// [`QUAT_NORM_MIN`].
pub fn quat_to_rotation(q: &[f64; 4]) -> Result<[f64; 9], GaussianError> {
    let n = quat_norm(q);
    if n <= QUAT_NORM_MIN {
        return Err(GaussianError::DegenerateQuaternion(n));
    }
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Ok(rotation_from_unit_quat(w, x, y, z))
}

/// The standard unit-quaternion rotation formula; callers must pass unit
/// components.
pub(crate) fn rotation_from_unit_quat(w: f64, x: f64, y: f64, z: f64) -> [f64; 9] {
    [
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ]
}

/// Covariance `R diag(s)^2 R^T` for a quaternion and positive scales.
pub fn build_covariance(q: &[f64; 4], s: &[f64; 3]) -> Result<[f64; 9], GaussianError> {
    if let Some(&bad) = s.iter().find(|v| !(**v > 0.0)) {
        return Err(GaussianError::NonPositiveScale(bad));
    }
    let r = quat_to_rotation(q)?;
    Ok(rotate_diag(&r, &[s[0] * s[0], s[1] * s[1], s[2] * s[2]]))
}

/// `R diag(d) R^T` for a row-major rotation and diagonal entries.
pub(crate) fn rotate_diag(r: &[f64; 9], d: &[f64; 3]) -> [f64; 9] {
    let mut out = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            let mut acc = 0.0;
            for k in 0..3 {
                acc += r[i * 3 + k] * d[k] * r[j * 3 + k];
            }
            out[i * 3 + j] = acc;
        }
    }
    out
}

/// Inverse covariance computed from the same factorization,
/// `R diag(1/s^2) R^T`; exact up to rounding and always positive definite.
pub fn inverse_covariance(q: &[f64; 4], s: &[f64; 3]) -> Result<[f64; 9], GaussianError> {
    if let Some(&bad) = s.iter().find(|v| !(**v > 0.0)) {
        return Err(GaussianError::NonPositiveScale(bad));
    }
    let r = quat_to_rotation(q)?;
    Ok(rotate_diag(
        &r,
        &[1.0 / (s[0] * s[0]), 1.0 / (s[1] * s[1]), 1.0 / (s[2] * s[2])],
    ))
}

/// Inverse covariance of an activated primitive, using its stored unit
/// quaternion without re-normalization so every consumer sees bit-identical
/// entries.
pub(crate) fn inv_cov_of(p: &GaussianPrimitive) -> [f64; 9] {
    let q = &p.quat;
    let r = rotation_from_unit_quat(q[0], q[1], q[2], q[3]);
    let s = &p.scales;
    rotate_diag(&r, &[1.0 / (s[0] * s[0]), 1.0 / (s[1] * s[1]), 1.0 / (s[2] * s[2])])
}

/// Apply the decoder post-processing to a raw output:
/// scales through softplus (plus a small floor), opacity and features through
/// sigmoid (opacity shrunk into [0, 1)), quaternion normalized to unit length.
/// The center is left at the placeholder (0, 0, 1); see
/// [`GaussianPrimitive::at`].
pub fn activate_raw(raw: &RawGaussianOutput) -> Result<GaussianPrimitive, GaussianError> {
    let n = quat_norm(&raw.quat_raw);
    if n <= QUAT_NORM_MIN {
        return Err(GaussianError::DegenerateQuaternion(n));
    }
    let quat = [
        raw.quat_raw[0] / n,
        raw.quat_raw[1] / n,
        raw.quat_raw[2] / n,
        raw.quat_raw[3] / n,
    ];
    let scales = [
        softplus(raw.scale_raw[0]) + SCALE_EPS,
        softplus(raw.scale_raw[1]) + SCALE_EPS,
        softplus(raw.scale_raw[2]) + SCALE_EPS,
    ];
    let opacity = sigmoid(raw.opacity_logit) * (1.0 - OPACITY_EPS);
    let features = raw.feature_logits.iter().map(|&l| sigmoid(l)).collect();
    Ok(GaussianPrimitive { mu: [0.0, 0.0, 1.0], quat, scales, opacity, features })
}

/// Gaussian density at a 3D point, including the opacity factor:
/// `alpha * (2pi)^(-3/2) |sigma|^(-1/2) exp(-d^T sigma^-1 d / 2)` with the
/// longitude component of `d` wrapped into [-180, 180).
pub fn eval_pdf(g: &GaussianPrimitive, p: &[f64; 3]) -> f64 {
    let inv = inverse_covariance(&g.quat, &g.scales).expect("validated primitive");
    let d = [p[0] - g.mu[0], wrap_lon_delta(p[1] - g.mu[1]), p[2] - g.mu[2]];
    let mut q = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            q += d[i] * inv[i * 3 + j] * d[j];
        }
    }
    let det_sqrt = g.scales[0] * g.scales[1] * g.scales[2];
    let norm = (2.0 * std::f64::consts::PI).powf(1.5) * det_sqrt;
    g.opacity / norm * (-0.5 * q).exp()
}

/// A set of primitives anchored one-per-node on a grid, in row-major
/// (latitude-major) order.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSet {
    anchor: LatLonGrid,
    primitives: Vec<GaussianPrimitive>,
}

impl GaussianSet {
    /// Wrap primitives whose centers already sit on the anchor nodes.
    pub fn anchored(
        anchor: LatLonGrid,
        primitives: Vec<GaussianPrimitive>,
    ) -> Result<Self, GaussianError> {
        if primitives.len() != anchor.len() {
            return Err(GaussianError::InvalidPrimitive(format!(
                "expected {} primitives for the anchor grid, got {}",
                anchor.len(),
                primitives.len()
            )));
        }
        for (i, p) in primitives.iter().enumerate() {
            let (k, m) = (i / anchor.n_lon(), i % anchor.n_lon());
            if (p.mu[0] - anchor.lat(k)).abs() > 1e-9
                || (p.mu[1] - anchor.lon(m)).abs() > 1e-9
                || p.mu[2] != 1.0
            {
                return Err(GaussianError::InvalidPrimitive(format!(
                    "primitive {i} is not anchored at its grid node"
                )));
            }
        }
        Ok(Self { anchor, primitives })
    }

    /// Wrap primitives without the node-anchoring check (used by the
    /// learnable-position ablation, where centers drift off the nodes).
    pub fn free(anchor: LatLonGrid, primitives: Vec<GaussianPrimitive>) -> Self {
        Self { anchor, primitives }
    }

    pub fn anchor(&self) -> &LatLonGrid {
        &self.anchor
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn primitives(&self) -> &[GaussianPrimitive] {
        &self.primitives
    }

    pub fn primitives_mut(&mut self) -> &mut [GaussianPrimitive] {
        &mut self.primitives
    }
}

/// Default (quaternion, scales, opacity) applied to every primitive at
/// initialization time.
#[derive(Debug, Clone, Copy)]
pub struct GaussianDefaults {
    pub quat: [f64; 4],
    pub scales: [f64; 3],
    pub opacity: f64,
}

impl Default for GaussianDefaults {
    fn default() -> Self {
        Self { quat: [1.0, 0.0, 0.0, 0.0], scales: [1.0, 1.0, 1.0], opacity: 0.9 }
    }
}

/// One primitive per grid node in row-major order, centers at the node
/// coordinates with z = 1, features zeroed.
pub fn init_gaussians_from_grid(
    grid: &LatLonGrid,
    n_vars: usize,
    defaults: GaussianDefaults,
) -> GaussianSet {
    let mut primitives = Vec::with_capacity(grid.len());
    for k in 0..grid.n_lat() {
        for m in 0..grid.n_lon() {
            primitives.push(GaussianPrimitive {
                mu: [grid.lat(k), grid.lon(m), 1.0],
                quat: defaults.quat,
                scales: defaults.scales,
                opacity: defaults.opacity,
                features: vec![0.0; n_vars],
            });
        }
    }
    GaussianSet { anchor: grid.clone(), primitives }
}
