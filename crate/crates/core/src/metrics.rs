//! Forecast verification metrics: latitude-weighted RMSE, Pearson
//! correlation, and mean bias, per variable, with multi-sample aggregation
//! and a text report format.
//!
//! LRMSE weights each node by the cosine of its latitude; Pearson and mean
//! bias are unweighted. A Pearson value is undefined (reported as `NA`)
//! whenever either field has zero variance; it is never silently coerced
//! to 0.

use crate::grid::{FieldTensor, GridError, LatLonGrid};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("empty sample set")]
    EmptySet,
    #[error("zero total latitude weight (grid has only pole rows)")]
    ZeroWeight,
    #[error("malformed report line: {0}")]
    MalformedReport(String),
}

/// Weighted RMSE kernel over per-value weights:
/// `sqrt(sum w_i (a_i - b_i)^2 / sum w_i)`.
pub fn weighted_rmse(pred: &[f64], reference: &[f64], weights: &[f64]) -> Result<f64, MetricsError> {
    debug_assert_eq!(pred.len(), reference.len());
    debug_assert_eq!(pred.len(), weights.len());
    let mut num = 0.0;
    let mut den = 0.0;
    for ((a, b), w) in pred.iter().zip(reference).zip(weights) {
        let d = a - b;
        num += w * d * d;
        den += w;
    }
    if den <= 0.0 {
        return Err(MetricsError::ZeroWeight);
    }
    Ok((num / den).sqrt())
}

/// Per-node cosine-latitude weights flattened in `[lat, lon]` order.
fn node_weights(grid: &LatLonGrid) -> Vec<f64> {
    let row = grid.latitude_weights();
    let mut out = Vec::with_capacity(grid.len());
    for &w in &row {
        for _ in 0..grid.n_lon() {
            out.push(w);
        }
    }
    out
}

/// Latitude-weighted RMSE of one variable.
pub fn lrmse(pred: &FieldTensor, reference: &FieldTensor, var: usize) -> Result<f64, MetricsError> {
    pred.same_layout(reference)?;
    let weights = node_weights(pred.grid());
    weighted_rmse(pred.var_slice(var), reference.var_slice(var), &weights)
}

/// Unweighted Pearson correlation of one variable; `None` when either field
/// has zero variance.
pub fn pearson(pred: &FieldTensor, reference: &FieldTensor, var: usize) -> Result<Option<f64>, MetricsError> {
    pred.same_layout(reference)?;
    let a = pred.var_slice(var);
    let b = reference.var_slice(var);
    let n = a.len() as f64;
    let mean_a: f64 = a.iter().sum::<f64>() / n;
    let mean_b: f64 = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - mean_a, y - mean_b);
        cov += dx * dy;
        var_a += dx * dx;
        var_b += dy * dy;
    }
    if var_a == 0.0 || var_b == 0.0 {
        return Ok(None);
    }
    Ok(Some(cov / (var_a.sqrt() * var_b.sqrt())))
}

/// Unweighted signed mean of (pred - reference) for one variable.
pub fn mean_bias(pred: &FieldTensor, reference: &FieldTensor, var: usize) -> Result<f64, MetricsError> {
    pred.same_layout(reference)?;
    let a = pred.var_slice(var);
    let b = reference.var_slice(var);
    let sum: f64 = a.iter().zip(b).map(|(x, y)| x - y).sum();
    Ok(sum / a.len() as f64)
}

/// One variable's aggregated scores.
#[derive(Debug, Clone, PartialEq)]
pub struct VarMetrics {
    pub name: String,
    pub lrmse: f64,
    /// `None` when undefined for at least one sample (zero variance).
    pub pearson: Option<f64>,
    pub mean_bias: f64,
}

/// Context the report was computed in.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReportMeta {
    pub n_lat: usize,
    pub n_lon: usize,
    pub n_samples: usize,
    pub ratio: Option<f64>,
    pub lead_steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub meta: ReportMeta,
    pub vars: Vec<VarMetrics>,
}

/// Aggregate metrics over aligned sample pairs.
///
/// LRMSE aggregates in squared-error space (the root of the mean of the
/// per-sample weighted mean squared errors); Pearson and mean bias average
/// arithmetically, with Pearson undefined if any sample is undefined.
pub fn evaluate(
    pred: &[FieldTensor],
    reference: &[FieldTensor],
    names: &[String],
    mut meta: ReportMeta,
) -> Result<EvalReport, MetricsError> {
    if pred.is_empty() || pred.len() != reference.len() {
        return Err(MetricsError::EmptySet);
    }
    let n_vars = pred[0].n_vars();
    let weights = node_weights(pred[0].grid());
    let mut vars = Vec::with_capacity(n_vars);
    for v in 0..n_vars {
        let mut sq = 0.0;
        let mut bias = 0.0;
        let mut p_acc = Some(0.0);
        for (p, r) in pred.iter().zip(reference) {
            p.same_layout(r)?;
            pred[0].same_layout(p)?;
            let e = weighted_rmse(p.var_slice(v), r.var_slice(v), &weights)?;
            sq += e * e;
            bias += mean_bias(p, r, v)?;
            p_acc = match (p_acc, pearson(p, r, v)?) {
                (Some(acc), Some(x)) => Some(acc + x),
                _ => None,
            };
        }
        let n = pred.len() as f64;
        vars.push(VarMetrics {
            name: names.get(v).cloned().unwrap_or_else(|| format!("var{v}")),
            lrmse: (sq / n).sqrt(),
            pearson: p_acc.map(|acc| acc / n),
            mean_bias: bias / n,
        });
    }
    meta.n_lat = pred[0].grid().n_lat();
    meta.n_lon = pred[0].grid().n_lon();
    meta.n_samples = pred.len();
    Ok(EvalReport { meta, vars })
}

impl EvalReport {
    /// Machine-readable lines: `var<TAB>lrmse<TAB>pearson<TAB>mbias`, one per
    /// variable, `NA` for undefined Pearson. Float formatting is Rust's
    /// shortest round-trip representation, so parsing recovers exact values.
    pub fn machine_lines(&self) -> String {
        let mut out = String::new();
        for v in &self.vars {
            let p = match v.pearson {
                Some(p) => format!("{p}"),
                None => "NA".to_string(),
            };
            out.push_str(&format!("{}\t{}\t{}\t{}\n", v.name, v.lrmse, p, v.mean_bias));
        }
        out
    }

    /// Parse the machine-line block back into per-variable metrics.
    pub fn parse_machine_lines(text: &str) -> Result<Vec<VarMetrics>, MetricsError> {
        let mut out = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 4 {
                return Err(MetricsError::MalformedReport(line.to_string()));
            }
            let parse = |s: &str| {
                s.parse::<f64>().map_err(|_| MetricsError::MalformedReport(line.to_string()))
            };
            let pearson = if parts[2] == "NA" { None } else { Some(parse(parts[2])?) };
            out.push(VarMetrics {
                name: parts[0].to_string(),
                lrmse: parse(parts[1])?,
                pearson,
                mean_bias: parse(parts[3])?,
            });
        }
        Ok(out)
    }

    /// Human-readable table plus the machine block.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "# grid {}x{}  samples {}",
            self.meta.n_lat, self.meta.n_lon, self.meta.n_samples
        ));
        if let Some(r) = self.meta.ratio {
            out.push_str(&format!("  ratio {r}"));
        }
        if let Some(l) = self.meta.lead_steps {
            out.push_str(&format!("  lead {l}"));
        }
        out.push('\n');
        out.push_str(&format!("{:<12} {:>14} {:>10} {:>14}\n", "variable", "lrmse", "pearson", "mean_bias"));
        for v in &self.vars {
            let p = match v.pearson {
                Some(p) => format!("{p:.6}"),
                None => "NA".to_string(),
            };
            out.push_str(&format!(
                "{:<12} {:>14.6e} {:>10} {:>14.6e}\n",
                v.name, v.lrmse, p, v.mean_bias
            ));
        }
        out.push('\n');
        out.push_str(&self.machine_lines());
        out
    }
}
