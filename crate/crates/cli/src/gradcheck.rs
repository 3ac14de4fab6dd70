//! Finite-difference gradient verification suites.
//!
//! The default run sweeps every tensor primitive; `--full` adds the
//! renderer adjoint, the end-to-end model + render + loss path, and unrolled
//! autoregressive chains. Each suite prints its worst relative error; any
//! failure exits with code 5 naming the suite and coordinate.

use std::rc::Rc;

use crate::{config::ConfigMap, CliError, EXIT_VERIFICATION};
use splatcast_core::autodiff::check::{grad_check, CheckInput, CheckReport};
use splatcast_core::autodiff::{CustomOp, Graph, Tensor, TensorError};
use splatcast_core::data::{synth_fields, SyntheticConfig};
use splatcast_core::grid::LatLonGrid;
use splatcast_core::math::{inv_softplus, logit};
use splatcast_core::model::{Model, ModelConfig};
use splatcast_core::render::SplatRenderOp;
use splatcast_core::train::{render_model_output, Dataset};
use splatcast_core::RenderConfig;

const H: f64 = 1e-5;
const ZERO_ATOL: f64 = 1e-8;
const TOL_PRIMITIVES: f64 = 1e-5;
const TOL_RENDERER: f64 = 1e-4;
const TOL_END_TO_END: f64 = 1e-4;
const TOL_ROLLOUT: f64 = 1e-3;

struct Suite {
    name: &'static str,
    tol: f64,
    report: CheckReport,
}

fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

fn rand_input(name: &str, shape: &[usize], r: &mut impl rand::Rng) -> CheckInput {
    CheckInput {
        name: name.into(),
        shape: shape.to_vec(),
        values: (0..shape.iter().product()).map(|_| r.gen_range(-2.0..2.0)).collect(),
    }
}

fn primitives_suite() -> Result<Vec<Suite>, CliError> {
    type CaseFn = Box<dyn Fn(&Graph, &[Tensor]) -> Result<Tensor, TensorError> + Sync + Send>;
    let mut out = Vec::new();
    let mut r = rng(1);
    let cases: Vec<(&'static str, CaseFn, Vec<CheckInput>)> = vec![
        (
            "elementwise",
            Box::new(|_g, t: &[Tensor]| {
                t[0].add(&t[1])?.mul(&t[0])?.sub(&t[1])?.mul_scalar(0.7)?.add_scalar(0.1)?.reduce_sum(None)
            }),
            vec![rand_input("a", &[3, 4], &mut r), rand_input("b", &[3, 4], &mut r)],
        ),
        (
            "broadcast",
            Box::new(|_g, t: &[Tensor]| t[0].add(&t[1])?.mul(&t[1])?.reduce_mean(None)),
            vec![rand_input("x", &[2, 3, 4], &mut r), rand_input("bias", &[4], &mut r)],
        ),
        (
            "matmul_transpose",
            Box::new(|_g, t: &[Tensor]| {
                t[0].matmul(&t[1])?.transpose()?.matmul(&t[0])?.reduce_sum(None)
            }),
            vec![rand_input("a", &[3, 3], &mut r), rand_input("b", &[3, 3], &mut r)],
        ),
        (
            "batched_matmul_permute",
            Box::new(|_g, t: &[Tensor]| {
                t[0].permute(&[1, 0, 2])?.matmul(&t[1])?.reduce_sum(None)
            }),
            vec![rand_input("a", &[3, 2, 4], &mut r), rand_input("b", &[2, 4, 3], &mut r)],
        ),
        (
            "softmax",
            Box::new(|_g, t: &[Tensor]| t[0].softmax(1)?.mul(&t[1])?.reduce_sum(None)),
            vec![rand_input("x", &[3, 5], &mut r), rand_input("w", &[3, 5], &mut r)],
        ),
        (
            "layer_norm",
            Box::new(|_g, t: &[Tensor]| {
                let y = t[0].layer_norm(1e-5)?;
                y.mul(&y)?.mul(&t[1])?.reduce_sum(None)
            }),
            vec![rand_input("x", &[4, 8], &mut r), rand_input("w", &[4, 8], &mut r)],
        ),
        (
            "activations",
            Box::new(|_g, t: &[Tensor]| {
                let a = t[0].gelu()?.add(&t[0].sigmoid()?)?.add(&t[0].softplus()?)?;
                let b = t[0].mul(&t[0])?.add_scalar(0.5)?.log()?;
                a.add(&b)?.mul_scalar(0.25)?.exp()?.reduce_mean(None)
            }),
            vec![rand_input("x", &[4, 4], &mut r)],
        ),
        (
            "slice_concat_reshape",
            Box::new(|_g, t: &[Tensor]| {
                let a = t[0].slice(1, 0, 2)?;
                let b = t[0].slice(1, 2, 2)?;
                Tensor::concat(&[&a, &b], 0)?.reshape(&[2, 4])?.mul(&t[1])?.reduce_sum(None)
            }),
            vec![rand_input("x", &[2, 4], &mut r), rand_input("w", &[2, 4], &mut r)],
        ),
        (
            "reductions",
            Box::new(|_g, t: &[Tensor]| {
                let s = t[0].reduce_sum(Some(1))?.reduce_mean(None)?;
                t[0].reduce_mean(Some(0))?.reduce_sum(None)?.add(&s)
            }),
            vec![rand_input("x", &[3, 4, 2], &mut r)],
        ),
    ];
    for (name, f, inputs) in cases {
        let report = grad_check(f.as_ref(), &inputs, H, ZERO_ATOL, None)
            .map_err(|e| CliError::validation(e.to_string()))?;
        out.push(Suite { name, tol: TOL_PRIMITIVES, report });
    }
    Ok(out)
}

fn renderer_suite() -> Result<Suite, CliError> {
    let mut r = rng(2);
    let anchor = LatLonGrid::build(3, 4).unwrap();
    let target = LatLonGrid::build(5, 8).unwrap();
    let k = anchor.len();
    let n_vars = 2;
    let inputs = vec![
        rand_input("features", &[k, n_vars], &mut r),
        CheckInput {
            name: "gauss".into(),
            shape: vec![k, 8],
            values: (0..k)
                .flat_map(|_| {
                    use rand::Rng;
                    let mut row = Vec::with_capacity(8);
                    for _ in 0..4 {
                        row.push(r.gen_range(-1.0..1.0));
                    }
                    for _ in 0..3 {
                        row.push(inv_softplus(r.gen_range(15.0..60.0)));
                    }
                    row.push(logit(r.gen_range(0.2..0.9)));
                    row
                })
                .collect(),
        },
    ];
    let report = grad_check(
        move |g, t| {
            let op = Rc::new(SplatRenderOp {
                anchor: anchor.clone(),
                target: target.clone(),
                cfg: RenderConfig::brute_force(),
                n_vars,
            });
            let rendered = g.custom(op, &[&t[0], &t[1]])?;
            rendered.mul(&rendered)?.reduce_mean(None)
        },
        &inputs,
        H,
        ZERO_ATOL,
        None,
    )
    .map_err(|e| CliError::validation(e.to_string()))?;
    Ok(Suite { name: "renderer", tol: TOL_RENDERER, report })
}

fn toy_model() -> (Model, Dataset) {
    let grid = LatLonGrid::build(5, 8).unwrap();
    let synth = SyntheticConfig { seed: 7, ..Default::default() };
    let stack = synth_fields(&synth, &grid, 2, 8).unwrap();
    let dataset = Dataset::new(stack, (3, 4)).unwrap();
    let mut cfg = ModelConfig::new(2, (3, 4));
    cfg.embed_dim = 8;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.window = (3, 2);
    (Model::new(cfg).unwrap(), dataset)
}

/// End-to-end (or unrolled) chain: every parameter through forward, splat
/// rendering, and the mean-squared loss against fixed targets.
fn chain_suite(
    name: &'static str,
    steps: usize,
    tol: f64,
    max_coords: Option<usize>,
) -> Result<Suite, CliError> {
    let (model, dataset) = toy_model();
    let params = model.init_params(11);
    let rcfg = RenderConfig::brute_force();
    let anchor = dataset.anchor().clone();
    let target_grid = anchor.refine(2.0).unwrap();
    let inputs: Vec<CheckInput> = params
        .params()
        .iter()
        .map(|p| CheckInput { name: p.name.clone(), shape: p.shape.clone(), values: p.values.clone() })
        .collect();
    let input0 = dataset.input(0).clone();
    let targets: Vec<_> = (1..=steps).map(|t| dataset.target(t, 2.0).unwrap()).collect();
    let reference = params.clone();
    let report = grad_check(
        move |g, leaves| {
            let bound = reference.bind_tensors(leaves.to_vec());
            let mut state =
                g.constant(input0.values().to_vec(), &[2, anchor.n_lat(), anchor.n_lon()])?;
            let mut total: Option<Tensor> = None;
            let wrap = |e: String| TensorError::InvalidArgument { op: "chain", what: e };
            for (s, tgt) in targets.iter().enumerate() {
                let out = model
                    .forward(g, &bound, &state, 2.0)
                    .map_err(|e| wrap(e.to_string()))?;
                let rendered = render_model_output(g, &model, &out, &target_grid, &rcfg)
                    .map_err(|e| wrap(e.to_string()))?;
                let t = g.constant(
                    tgt.values().to_vec(),
                    &[2, target_grid.n_lat(), target_grid.n_lon()],
                )?;
                let loss = rendered.mse(&t)?;
                total = Some(match total {
                    None => loss,
                    Some(acc) => acc.add(&loss)?,
                });
                if s + 1 < targets.len() {
                    state = render_model_output(g, &model, &out, &anchor, &rcfg)
                        .map_err(|e| wrap(e.to_string()))?;
                }
            }
            Ok(total.unwrap())
        },
        &inputs,
        H,
        ZERO_ATOL,
        max_coords,
    )
    .map_err(|e| CliError::validation(e.to_string()))?;
    Ok(Suite { name, tol, report })
}

/// A custom op whose adjoint is deliberately wrong; used to prove the
/// harness catches bad gradients.
struct BrokenAdjoint;

impl CustomOp for BrokenAdjoint {
    fn name(&self) -> &'static str {
        "injected-broken-adjoint"
    }
    fn forward(&self, inputs: &[(&[usize], &[f64])]) -> (Vec<usize>, Vec<f64>) {
        (inputs[0].0.to_vec(), inputs[0].1.iter().map(|v| v * v).collect())
    }
    fn backward(&self, inputs: &[(&[usize], &[f64])], g: &[f64]) -> Vec<Option<Vec<f64>>> {
        // Correct would be 2 x g; report half of it.
        vec![Some(inputs[0].1.iter().zip(g).map(|(x, g)| x * g).collect())]
    }
}

fn injected_fault_suite() -> Result<Suite, CliError> {
    let mut r = rng(3);
    let inputs = vec![rand_input("x", &[3, 3], &mut r)];
    let report = grad_check(
        |g, t| g.custom(Rc::new(BrokenAdjoint), &[&t[0]])?.reduce_sum(None),
        &inputs,
        H,
        ZERO_ATOL,
        None,
    )
    .map_err(|e| CliError::validation(e.to_string()))?;
    Ok(Suite { name: "injected-broken-adjoint", tol: TOL_PRIMITIVES, report })
}

pub fn run(full: bool, inject_fault: bool, cfg: ConfigMap) -> Result<(), CliError> {
    cfg.finish()?;
    let start = std::time::Instant::now();
    let mut suites = primitives_suite()?;
    if full {
        suites.push(renderer_suite()?);
        suites.push(chain_suite("end-to-end", 1, TOL_END_TO_END, None)?);
        suites.push(chain_suite("rollout-3", 3, TOL_ROLLOUT, Some(8))?);
        suites.push(chain_suite("rollout-12", 12, TOL_ROLLOUT, Some(3))?);
    }
    if inject_fault {
        suites.push(injected_fault_suite()?);
    }
    let mut failed = Vec::new();
    for s in &suites {
        let ok = s.report.passes(s.tol);
        println!(
            "{:<26} max rel err {:>12.3e}  tol {:>8.0e}  coords {:>5}  {}",
            s.name,
            s.report.max_rel_err,
            s.tol,
            s.report.coords_checked,
            if ok { "PASS" } else { "FAIL" }
        );
        if !ok {
            failed.push(s);
        }
    }
    println!("total runtime: {:.1}s", start.elapsed().as_secs_f64());
    if let Some(worst) = failed.first() {
        let coord = worst
            .report
            .worst
            .as_ref()
            .map(|(n, i)| format!("{n}[{i}]"))
            .unwrap_or_else(|| "?".into());
        return Err(CliError {
            code: EXIT_VERIFICATION,
            message: format!(
                "gradient check failed in suite {:?} at {coord}: max rel err {:.3e} exceeds {:.0e}",
                worst.name, worst.report.max_rel_err, worst.tol
            ),
        });
    }
    Ok(())
}
