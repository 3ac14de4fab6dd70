//! Gaussian-splat modeling of gridded atmospheric fields.
//!
//! The crate represents a field on a latitude-longitude grid as a set of
//! anisotropic 3D Gaussians anchored at the grid nodes, renders that set at
//! arbitrary query resolutions through ordered alpha compositing, and trains
//! a scale-aware vision transformer to generate the Gaussian parameters from
//! a coarse input field. The same machinery serves two tasks that differ only
//! in the target time index: spatial downscaling (reconstruct the current
//! state at a finer grid) and forecasting (predict the next state, optionally
//! rolled out autoregressively).
//!
//! Module map:
//!
//! - [`grid`] - spherical grids, latitude weights, bilinear/bicubic baselines
//! - [`gaussian`] - Gaussian primitives, quaternion -> covariance construction
//! - [`render`] - arbitrary-resolution splatting with exact hand-written adjoints
//! - [`autodiff`] - minimal reverse-mode tensor engine used by the model
//! - [`model`] - the scale-aware transformer generating Gaussian parameters
//! - [`train`] - AdamW, cosine schedule, rollout fine-tuning, checkpoints
//! - [`metrics`] - latitude-weighted RMSE, Pearson correlation, mean bias
//! - [`data`] - the GSF container format, synthetic fields, normalization

pub mod autodiff;
pub mod data;
pub mod gaussian;
pub mod grid;
pub mod metrics;
pub mod model;
pub mod render;
pub mod train;

mod codec;
pub mod math;
mod parallel;

pub use gaussian::{GaussianPrimitive, GaussianSet, RawGaussianOutput};
pub use grid::{FieldTensor, LatLonGrid};
pub use render::RenderConfig;
