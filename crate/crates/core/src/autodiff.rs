//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node holding the forward
//! values and enough saved state to run its adjoint. Graphs are built fresh
//! for every training step and backward may run exactly once per graph.
//! Broadcasting follows the conventional trailing-dimension rule with size-1
//! expansion. Every op validates its output for non-finite values, so NaNs
//! surface at the op that produced them instead of propagating.
//!
//! Determinism: all reductions (dot products, lane sums, gradient
//! accumulation) run in a fixed order that does not depend on the thread
//! count; matmul parallelizes over output rows, each of which is produced by
//! exactly one fixed-order dot product.

use std::cell::RefCell;
use std::rc::Rc;

use crate::parallel;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("graph already consumed by backward; rebuild the graph")]
    StaleGraph,
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis { op: &'static str, axis: usize, rank: usize },
    #[error("tensors belong to different graphs")]
    DifferentGraphs,
    #[error("{op}: invalid argument: {what}")]
    InvalidArgument { op: &'static str, what: String },
}

/// Storage precision of forward values. `Single` keeps f64 arithmetic inside
/// each kernel but rounds every stored buffer through f32, emulating 32-bit
/// storage with 64-bit accumulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

/// A differentiable operation implemented outside the op enum (the splat
/// renderer plugs in through this).
pub trait CustomOp {
    fn name(&self) -> &'static str;
    /// Forward values and output shape from input (shape, values) pairs.
    fn forward(&self, inputs: &[(&[usize], &[f64])]) -> (Vec<usize>, Vec<f64>);
    /// Per-input gradients (None where the input needs none).
    fn backward(&self, inputs: &[(&[usize], &[f64])], output_grad: &[f64])
        -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Matmul(usize, usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Slice { input: usize, axis: usize, start: usize },
    Concat { inputs: Vec<usize>, axis: usize },
    ReduceSum(usize, Option<usize>),
    ReduceMean(usize, Option<usize>),
    Softmax(usize, usize),
    LayerNorm { input: usize, rstd: Vec<f64> },
    Gelu(usize),
    Sigmoid(usize),
    Softplus(usize),
    Exp(usize),
    Log(usize),
    Custom { inputs: Vec<usize>, op: Rc<dyn CustomOp> },
}

struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

struct GraphInner {
    nodes: Vec<Node>,
    consumed: bool,
    precision: Precision,
}

/// The tape. Cheap to clone (shared handle).
#[derive(Clone)]
pub struct Graph {
    inner: Rc<RefCell<GraphInner>>,
}

/// Handle to one node of a [`Graph`].
#[derive(Clone)]
pub struct Tensor {
    graph: Graph,
    id: usize,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Broadcast two shapes with trailing alignment and size-1 expansion.
fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db {
            out[i] = da;
        } else if da == 1 {
            out[i] = db;
        } else if db == 1 {
            out[i] = da;
        } else {
            return None;
        }
    }
    Some(out)
}

/// Row-major strides padded to `out_shape`, with 0 stride on broadcast axes.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; out_shape.len()];
    let offset = out_shape.len() - shape.len();
    let mut stride = 1;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { stride };
        stride *= shape[i];
    }
    strides
}

/// Sum `grad` (shaped `out_shape`) down to `shape` for broadcast backward.
fn reduce_to_shape(grad: &[f64], out_shape: &[usize], shape: &[usize]) -> Vec<f64> {
    if out_shape == shape {
        return grad.to_vec();
    }
    let mut out = vec![0.0; numel(shape)];
    let strides = broadcast_strides(shape, out_shape);
    let mut idx = vec![0usize; out_shape.len()];
    for &g in grad.iter() {
        let mut src = 0;
        for (d, &s) in idx.iter().zip(&strides) {
            src += d * s;
        }
        out[src] += g;
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

/// Fixed-order four-lane dot product; deterministic for a given length.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let chunks = a.len() / 4;
    let mut acc = [0.0f64; 4];
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + tail
}

fn transpose_2d(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Batched `C[b] = A[b] (m x k) * B[b] (k x n)`, parallel over output rows.
fn matmul_batched(a: &[f64], b: &[f64], batch: usize, m: usize, k: usize, n: usize) -> Vec<f64> {
    // Pre-transpose each B batch so the inner loops are contiguous dots.
    let mut bt = vec![0.0; b.len()];
    for bi in 0..batch {
        bt[bi * k * n..(bi + 1) * k * n]
            .copy_from_slice(&transpose_2d(&b[bi * k * n..(bi + 1) * k * n], k, n));
    }
    let mut out = vec![0.0; batch * m * n];
    parallel::for_each_row(&mut out, n, |row, out_row| {
        let bi = row / m;
        let i = row % m;
        let a_row = &a[(bi * m + i) * k..(bi * m + i) * k + k];
        let bt_base = &bt[bi * k * n..(bi + 1) * k * n];
        for (j, slot) in out_row.iter_mut().enumerate() {
            *slot = dot(a_row, &bt_base[j * k..j * k + k]);
        }
    });
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::with_precision(Precision::Double)
    }

    pub fn with_precision(precision: Precision) -> Self {
        Graph {
            inner: Rc::new(RefCell::new(GraphInner {
                nodes: Vec::new(),
                consumed: false,
                precision,
            })),
        }
    }

    fn push(
        &self,
        op_name: &'static str,
        shape: Vec<usize>,
        mut values: Vec<f64>,
        requires_grad: bool,
        op: Op,
    ) -> Result<Tensor, TensorError> {
        debug_assert_eq!(values.len(), numel(&shape));
        let mut inner = self.inner.borrow_mut();
        if inner.precision == Precision::Single {
            for v in values.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        inner.nodes.push(Node { shape, values, grad: None, requires_grad, op });
        Ok(Tensor { graph: self.clone(), id: inner.nodes.len() - 1 })
    }

    /// A leaf tensor. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(
        &self,
        values: Vec<f64>,
        shape: &[usize],
        requires_grad: bool,
    ) -> Result<Tensor, TensorError> {
        if values.len() != numel(shape) {
            return Err(TensorError::InvalidArgument {
                op: "leaf",
                what: format!("{} values for shape {:?}", values.len(), shape),
            });
        }
        self.push("leaf", shape.to_vec(), values, requires_grad, Op::Leaf)
    }

    pub fn constant(&self, values: Vec<f64>, shape: &[usize]) -> Result<Tensor, TensorError> {
        self.leaf(values, shape, false)
    }

    pub fn scalar(&self, value: f64) -> Result<Tensor, TensorError> {
        self.leaf(vec![value], &[], false)
    }

    /// Append a custom differentiable operation.
    pub fn custom(&self, op: Rc<dyn CustomOp>, inputs: &[&Tensor]) -> Result<Tensor, TensorError> {
        let name = op.name();
        let ids: Vec<usize> = inputs.iter().map(|t| t.id).collect();
        for t in inputs {
            if !Rc::ptr_eq(&t.graph.inner, &self.inner) {
                return Err(TensorError::DifferentGraphs);
            }
        }
        let (shape, values, requires) = {
            let inner = self.inner.borrow();
            let views: Vec<(&[usize], &[f64])> = ids
                .iter()
                .map(|&id| (inner.nodes[id].shape.as_slice(), inner.nodes[id].values.as_slice()))
                .collect();
            let (shape, values) = op.forward(&views);
            let requires = ids.iter().any(|&id| inner.nodes[id].requires_grad);
            (shape, values, requires)
        };
        self.push(name, shape, values, requires, Op::Custom { inputs: ids, op })
    }

    /// Run reverse-mode accumulation from a scalar loss. Each graph may be
    /// consumed exactly once.
    pub fn backward(&self, loss: &Tensor) -> Result<(), TensorError> {
        if !Rc::ptr_eq(&loss.graph.inner, &self.inner) {
            return Err(TensorError::DifferentGraphs);
        }
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(TensorError::StaleGraph);
        }
        if numel(&inner.nodes[loss.id].shape) != 1 {
            return Err(TensorError::NonScalarLoss(inner.nodes[loss.id].shape.clone()));
        }
        inner.consumed = true;
        inner.nodes[loss.id].grad = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            if inner.nodes[id].grad.is_none() || !inner.nodes[id].requires_grad {
                continue;
            }
            backward_node(&mut inner, id);
        }
        Ok(())
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Add `delta` into the grad buffer of `target`, allocating zeros on first
/// touch. Skips targets that do not require gradients.
fn accumulate(inner: &mut GraphInner, target: usize, delta: &[f64]) {
    if !inner.nodes[target].requires_grad {
        return;
    }
    let n = numel(&inner.nodes[target].shape);
    let grad = inner.nodes[target].grad.get_or_insert_with(|| vec![0.0; n]);
    for (g, d) in grad.iter_mut().zip(delta) {
        *g += d;
    }
}

fn backward_node(inner: &mut GraphInner, id: usize) {
    // The upstream gradient is cloned out so input grads can be pushed while
    // the node table is mutably borrowed; buffers are modest at desk scale.
    let grad = inner.nodes[id].grad.clone().expect("checked by caller");
    let shape = inner.nodes[id].shape.clone();
    match &inner.nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            let (a, b) = (*a, *b);
            let ga = reduce_to_shape(&grad, &shape, &inner.nodes[a].shape.clone());
            accumulate(inner, a, &ga);
            let gb = reduce_to_shape(&grad, &shape, &inner.nodes[b].shape.clone());
            accumulate(inner, b, &gb);
        }
        Op::Sub(a, b) => {
            let (a, b) = (*a, *b);
            let ga = reduce_to_shape(&grad, &shape, &inner.nodes[a].shape.clone());
            accumulate(inner, a, &ga);
            let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
            let gb = reduce_to_shape(&neg, &shape, &inner.nodes[b].shape.clone());
            accumulate(inner, b, &gb);
        }
        Op::Mul(a, b) => {
            let (a, b) = (*a, *b);
            let (sa, sb) = (inner.nodes[a].shape.clone(), inner.nodes[b].shape.clone());
            let stra = broadcast_strides(&sa, &shape);
            let strb = broadcast_strides(&sb, &shape);
            let mut ga_full = vec![0.0; grad.len()];
            let mut gb_full = vec![0.0; grad.len()];
            let mut idx = vec![0usize; shape.len()];
            for (flat, &g) in grad.iter().enumerate() {
                let (mut ia, mut ib) = (0, 0);
                for (d, (&ta, &tb)) in idx.iter().zip(stra.iter().zip(&strb)) {
                    ia += d * ta;
                    ib += d * tb;
                }
                ga_full[flat] = g * inner.nodes[b].values[ib];
                gb_full[flat] = g * inner.nodes[a].values[ia];
                for d in (0..idx.len()).rev() {
                    idx[d] += 1;
                    if idx[d] < shape[d] {
                        break;
                    }
                    idx[d] = 0;
                }
            }
            let ga = reduce_to_shape(&ga_full, &shape, &sa);
            accumulate(inner, a, &ga);
            let gb = reduce_to_shape(&gb_full, &shape, &sb);
            accumulate(inner, b, &gb);
        }
        Op::AddScalar(a) => {
            let a = *a;
            accumulate(inner, a, &grad);
        }
        Op::MulScalar(a, c) => {
            let (a, c) = (*a, *c);
            let ga: Vec<f64> = grad.iter().map(|g| g * c).collect();
            accumulate(inner, a, &ga);
        }
        Op::Matmul(a, b) => {
            let (a, b) = (*a, *b);
            let sa = inner.nodes[a].shape.clone();
            let sb = inner.nodes[b].shape.clone();
            let rank = sa.len();
            let (m, k, n) = (sa[rank - 2], sa[rank - 1], sb[rank - 1]);
            let batch: usize = sa[..rank - 2].iter().product();
            // dA = g B^T ; dB = A^T g (per batch)
            let ga = {
                let bv = &inner.nodes[b].values;
                let mut b_t = vec![0.0; bv.len()];
                for bi in 0..batch {
                    b_t[bi * n * k..(bi + 1) * n * k]
                        .copy_from_slice(&transpose_2d(&bv[bi * k * n..(bi + 1) * k * n], k, n));
                }
                matmul_batched(&grad, &b_t, batch, m, n, k)
            };
            let gb = {
                let av = &inner.nodes[a].values;
                let mut a_t = vec![0.0; av.len()];
                for bi in 0..batch {
                    a_t[bi * k * m..(bi + 1) * k * m]
                        .copy_from_slice(&transpose_2d(&av[bi * m * k..(bi + 1) * m * k], m, k));
                }
                matmul_batched(&a_t, &grad, batch, k, m, n)
            };
            accumulate(inner, a, &ga);
            accumulate(inner, b, &gb);
        }
        Op::Permute(a, axes) => {
            let (a, axes) = (*a, axes.clone());
            let mut inverse = vec![0usize; axes.len()];
            for (i, &ax) in axes.iter().enumerate() {
                inverse[ax] = i;
            }
            let ga = permute_values(&grad, &shape, &inverse);
            accumulate(inner, a, &ga);
        }
        Op::Reshape(a) => {
            let a = *a;
            accumulate(inner, a, &grad);
        }
        Op::Slice { input, axis, start } => {
            let (input, axis, start) = (*input, *axis, *start);
            let in_shape = inner.nodes[input].shape.clone();
            let mut ga = vec![0.0; numel(&in_shape)];
            scatter_slice(&mut ga, &in_shape, axis, start, &grad, &shape);
            accumulate(inner, input, &ga);
        }
        Op::Concat { inputs, axis } => {
            let (inputs, axis) = (inputs.clone(), *axis);
            let mut start = 0;
            for &inp in &inputs {
                let in_shape = inner.nodes[inp].shape.clone();
                let len = in_shape[axis];
                let ga = gather_slice(&grad, &shape, axis, start, len);
                accumulate(inner, inp, &ga);
                start += len;
            }
        }
        Op::ReduceSum(a, axis) => {
            let (a, axis) = (*a, *axis);
            let in_shape = inner.nodes[a].shape.clone();
            let ga = expand_reduced(&grad, &in_shape, axis, 1.0);
            accumulate(inner, a, &ga);
        }
        Op::ReduceMean(a, axis) => {
            let (a, axis) = (*a, *axis);
            let in_shape = inner.nodes[a].shape.clone();
            let scale = match axis {
                None => 1.0 / numel(&in_shape) as f64,
                Some(ax) => 1.0 / in_shape[ax] as f64,
            };
            let ga = expand_reduced(&grad, &in_shape, axis, scale);
            accumulate(inner, a, &ga);
        }
        Op::Softmax(a, axis) => {
            let (a, axis) = (*a, *axis);
            let y = inner.nodes[id].values.clone();
            let mut ga = vec![0.0; grad.len()];
            for lane in lane_iter(&shape, axis) {
                let mut dot_gy = 0.0;
                for &i in &lane {
                    dot_gy += grad[i] * y[i];
                }
                for &i in &lane {
                    ga[i] = y[i] * (grad[i] - dot_gy);
                }
            }
            accumulate(inner, a, &ga);
        }
        Op::LayerNorm { input, rstd } => {
            let (input, rstd) = (*input, rstd.clone());
            let y = inner.nodes[id].values.clone();
            let axis = shape.len() - 1;
            let n = shape[axis] as f64;
            let mut ga = vec![0.0; grad.len()];
            for (li, lane) in lane_iter(&shape, axis).into_iter().enumerate() {
                let mut mean_g = 0.0;
                let mut mean_gy = 0.0;
                for &i in &lane {
                    mean_g += grad[i];
                    mean_gy += grad[i] * y[i];
                }
                mean_g /= n;
                mean_gy /= n;
                for &i in &lane {
                    ga[i] = rstd[li] * (grad[i] - mean_g - y[i] * mean_gy);
                }
            }
            accumulate(inner, input, &ga);
        }
        Op::Gelu(a) => {
            let a = *a;
            let x = inner.nodes[a].values.clone();
            let ga: Vec<f64> =
                grad.iter().zip(&x).map(|(g, &x)| g * crate::math::gelu_grad(x)).collect();
            accumulate(inner, a, &ga);
        }
        Op::Sigmoid(a) => {
            let a = *a;
            let y = inner.nodes[id].values.clone();
            let ga: Vec<f64> = grad.iter().zip(&y).map(|(g, &y)| g * y * (1.0 - y)).collect();
            accumulate(inner, a, &ga);
        }
        Op::Softplus(a) => {
            let a = *a;
            let x = inner.nodes[a].values.clone();
            let ga: Vec<f64> =
                grad.iter().zip(&x).map(|(g, &x)| g * crate::math::sigmoid(x)).collect();
            accumulate(inner, a, &ga);
        }
        Op::Exp(a) => {
            let a = *a;
            let y = inner.nodes[id].values.clone();
            let ga: Vec<f64> = grad.iter().zip(&y).map(|(g, &y)| g * y).collect();
            accumulate(inner, a, &ga);
        }
        Op::Log(a) => {
            let a = *a;
            let x = inner.nodes[a].values.clone();
            let ga: Vec<f64> = grad.iter().zip(&x).map(|(g, &x)| g / x).collect();
            accumulate(inner, a, &ga);
        }
        Op::Custom { inputs, op } => {
            let inputs = inputs.clone();
            let op = Rc::clone(op);
            let grads = {
                let views: Vec<(&[usize], &[f64])> = inputs
                    .iter()
                    .map(|&i| (inner.nodes[i].shape.as_slice(), inner.nodes[i].values.as_slice()))
                    .collect();
                op.backward(&views, &grad)
            };
            for (inp, g) in inputs.iter().zip(grads) {
                if let Some(g) = g {
                    accumulate(inner, *inp, &g);
                }
            }
        }
    }
}

/// Flat indices of every lane along `axis`, lanes in row-major order of the
/// remaining axes.
fn lane_iter(shape: &[usize], axis: usize) -> Vec<Vec<usize>> {
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut lanes = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            lanes.push((0..axis_len).map(|a| base + a * inner).collect());
        }
    }
    lanes
}

fn permute_values(values: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut out = vec![0.0; values.len()];
    let mut idx = vec![0usize; rank];
    for slot in out.iter_mut() {
        let mut src = 0;
        for (d, &ax) in idx.iter().zip(axes) {
            src += d * in_strides[ax];
        }
        *slot = values[src];
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

/// Copy `grad` (shaped like the slice output) into the right region of `ga`.
fn scatter_slice(
    ga: &mut [f64],
    in_shape: &[usize],
    axis: usize,
    start: usize,
    grad: &[f64],
    out_shape: &[usize],
) {
    let inner: usize = in_shape[axis + 1..].iter().product();
    let outer: usize = in_shape[..axis].iter().product();
    let len = out_shape[axis];
    for o in 0..outer {
        for a in 0..len {
            let dst = (o * in_shape[axis] + start + a) * inner;
            let src = (o * len + a) * inner;
            ga[dst..dst + inner].copy_from_slice(&grad[src..src + inner]);
        }
    }
}

fn gather_slice(
    values: &[f64],
    shape: &[usize],
    axis: usize,
    start: usize,
    len: usize,
) -> Vec<f64> {
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![0.0; outer * len * inner];
    for o in 0..outer {
        for a in 0..len {
            let src = (o * shape[axis] + start + a) * inner;
            let dst = (o * len + a) * inner;
            out[dst..dst + inner].copy_from_slice(&values[src..src + inner]);
        }
    }
    out
}

/// Broadcast a reduced gradient back over the reduced axis (or everywhere).
fn expand_reduced(grad: &[f64], in_shape: &[usize], axis: Option<usize>, scale: f64) -> Vec<f64> {
    match axis {
        None => vec![grad[0] * scale; numel(in_shape)],
        Some(ax) => {
            let inner: usize = in_shape[ax + 1..].iter().product();
            let outer: usize = in_shape[..ax].iter().product();
            let mut out = vec![0.0; numel(in_shape)];
            for o in 0..outer {
                for a in 0..in_shape[ax] {
                    for i in 0..inner {
                        out[(o * in_shape[ax] + a) * inner + i] = grad[o * inner + i] * scale;
                    }
                }
            }
            out
        }
    }
}

impl Tensor {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.inner.borrow().nodes[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape())
    }

    pub fn values(&self) -> Vec<f64> {
        self.graph.inner.borrow().nodes[self.id].values.clone()
    }

    pub fn scalar_value(&self) -> f64 {
        let inner = self.graph.inner.borrow();
        debug_assert_eq!(numel(&inner.nodes[self.id].shape), 1);
        inner.nodes[self.id].values[0]
    }

    /// Accumulated gradient after backward; `None` if this node never
    /// received one.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.graph.inner.borrow().nodes[self.id].grad.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.inner.borrow().nodes[self.id].requires_grad
    }

    fn same_graph(&self, other: &Tensor) -> Result<(), TensorError> {
        if Rc::ptr_eq(&self.graph.inner, &other.graph.inner) {
            Ok(())
        } else {
            Err(TensorError::DifferentGraphs)
        }
    }

    fn binary_broadcast(
        &self,
        other: &Tensor,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(usize, usize) -> Op,
    ) -> Result<Tensor, TensorError> {
        self.same_graph(other)?;
        let (sa, sb) = (self.shape(), other.shape());
        let out_shape = broadcast_shapes(&sa, &sb).ok_or(TensorError::ShapeMismatch {
            op: name,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let values = {
            let inner = self.graph.inner.borrow();
            let av = &inner.nodes[self.id].values;
            let bv = &inner.nodes[other.id].values;
            let stra = broadcast_strides(&sa, &out_shape);
            let strb = broadcast_strides(&sb, &out_shape);
            let mut out = vec![0.0; numel(&out_shape)];
            let mut idx = vec![0usize; out_shape.len()];
            for slot in out.iter_mut() {
                let (mut ia, mut ib) = (0, 0);
                for (d, (&ta, &tb)) in idx.iter().zip(stra.iter().zip(&strb)) {
                    ia += d * ta;
                    ib += d * tb;
                }
                *slot = f(av[ia], bv[ib]);
                for d in (0..idx.len()).rev() {
                    idx[d] += 1;
                    if idx[d] < out_shape[d] {
                        break;
                    }
                    idx[d] = 0;
                }
            }
            out
        };
        let requires = self.requires_grad() || other.requires_grad();
        self.graph.push(name, out_shape, values, requires, op(self.id, other.id))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.binary_broadcast(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.binary_broadcast(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.binary_broadcast(other, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor, TensorError> {
        let values: Vec<f64> = self.values().iter().map(|v| v + c).collect();
        self.graph.push(
            "add_scalar",
            self.shape(),
            values,
            self.requires_grad(),
            Op::AddScalar(self.id),
        )
    }

    pub fn mul_scalar(&self, c: f64) -> Result<Tensor, TensorError> {
        let values: Vec<f64> = self.values().iter().map(|v| v * c).collect();
        self.graph.push(
            "mul_scalar",
            self.shape(),
            values,
            self.requires_grad(),
            Op::MulScalar(self.id, c),
        )
    }

    pub fn neg(&self) -> Result<Tensor, TensorError> {
        self.mul_scalar(-1.0)
    }

    /// Batched matrix product; leading (batch) dimensions must match exactly,
    /// trailing dims follow `(m, k) x (k, n)`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.same_graph(other)?;
        let (sa, sb) = (self.shape(), other.shape());
        let ok = sa.len() == sb.len()
            && sa.len() >= 2
            && sa[..sa.len() - 2] == sb[..sb.len() - 2]
            && sa[sa.len() - 1] == sb[sb.len() - 2];
        if !ok {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let rank = sa.len();
        let (m, k, n) = (sa[rank - 2], sa[rank - 1], sb[rank - 1]);
        let batch: usize = sa[..rank - 2].iter().product();
        let values = {
            let inner = self.graph.inner.borrow();
            matmul_batched(
                &inner.nodes[self.id].values,
                &inner.nodes[other.id].values,
                batch,
                m,
                k,
                n,
            )
        };
        let mut out_shape = sa.clone();
        out_shape[rank - 2] = m;
        out_shape[rank - 1] = n;
        let requires = self.requires_grad() || other.requires_grad();
        self.graph.push("matmul", out_shape, values, requires, Op::Matmul(self.id, other.id))
    }

    /// Reorder axes; `axes` must be a permutation of `0..rank`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor, TensorError> {
        let shape = self.shape();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank
            || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true))
        {
            return Err(TensorError::InvalidArgument {
                op: "permute",
                what: format!("axes {:?} for rank {rank}", axes),
            });
        }
        let values = permute_values(&self.values(), &shape, axes);
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        self.graph.push(
            "permute",
            out_shape,
            values,
            self.requires_grad(),
            Op::Permute(self.id, axes.to_vec()),
        )
    }

    /// Swap the last two axes.
    pub fn transpose(&self) -> Result<Tensor, TensorError> {
        let rank = self.shape().len();
        if rank < 2 {
            return Err(TensorError::InvalidArgument {
                op: "transpose",
                what: format!("rank {rank} < 2"),
            });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(&axes)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor, TensorError> {
        if numel(shape) != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(),
                rhs: shape.to_vec(),
            });
        }
        self.graph.push(
            "reshape",
            shape.to_vec(),
            self.values(),
            self.requires_grad(),
            Op::Reshape(self.id),
        )
    }

    /// Contiguous range along one axis.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor, TensorError> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis { op: "slice", axis, rank: shape.len() });
        }
        if start + len > shape[axis] {
            return Err(TensorError::InvalidArgument {
                op: "slice",
                what: format!("range {start}..{} exceeds axis size {}", start + len, shape[axis]),
            });
        }
        let values = gather_slice(&self.values(), &shape, axis, start, len);
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.graph.push(
            "slice",
            out_shape,
            values,
            self.requires_grad(),
            Op::Slice { input: self.id, axis, start },
        )
    }

    pub fn concat(tensors: &[&Tensor], axis: usize) -> Result<Tensor, TensorError> {
        let first = tensors.first().ok_or(TensorError::InvalidArgument {
            op: "concat",
            what: "empty input list".into(),
        })?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(TensorError::InvalidAxis { op: "concat", axis, rank: base.len() });
        }
        let mut total = 0;
        for t in tensors {
            first.same_graph(t)?;
            let s = t.shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch { op: "concat", lhs: base, rhs: s });
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let inner_len: usize = base[axis + 1..].iter().product();
        let outer: usize = base[..axis].iter().product();
        let mut values = vec![0.0; numel(&out_shape)];
        let mut start = 0;
        for t in tensors {
            let s = t.shape();
            let v = t.values();
            for o in 0..outer {
                for a in 0..s[axis] {
                    let dst = (o * total + start + a) * inner_len;
                    let src = (o * s[axis] + a) * inner_len;
                    values[dst..dst + inner_len].copy_from_slice(&v[src..src + inner_len]);
                }
            }
            start += s[axis];
        }
        let requires = tensors.iter().any(|t| t.requires_grad());
        first.graph.push(
            "concat",
            out_shape,
            values,
            requires,
            Op::Concat { inputs: tensors.iter().map(|t| t.id).collect(), axis },
        )
    }

    fn reduce(
        &self,
        name: &'static str,
        axis: Option<usize>,
        mean: bool,
    ) -> Result<Tensor, TensorError> {
        let shape = self.shape();
        if let Some(ax) = axis {
            if ax >= shape.len() {
                return Err(TensorError::InvalidAxis { op: name, axis: ax, rank: shape.len() });
            }
        }
        let values = self.values();
        let (out_shape, out) = match axis {
            None => {
                let mut acc = 0.0;
                for &v in &values {
                    acc += v;
                }
                if mean {
                    acc /= values.len() as f64;
                }
                (vec![], vec![acc])
            }
            Some(ax) => {
                let inner: usize = shape[ax + 1..].iter().product();
                let outer: usize = shape[..ax].iter().product();
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for a in 0..shape[ax] {
                        for i in 0..inner {
                            out[o * inner + i] += values[(o * shape[ax] + a) * inner + i];
                        }
                    }
                }
                if mean {
                    for v in out.iter_mut() {
                        *v /= shape[ax] as f64;
                    }
                }
                let mut os = shape.clone();
                os.remove(ax);
                (os, out)
            }
        };
        let op = if mean { Op::ReduceMean(self.id, axis) } else { Op::ReduceSum(self.id, axis) };
        self.graph.push(name, out_shape, out, self.requires_grad(), op)
    }

    /// Sum over one axis, or over everything (scalar) when `axis` is `None`.
    pub fn reduce_sum(&self, axis: Option<usize>) -> Result<Tensor, TensorError> {
        self.reduce("reduce_sum", axis, false)
    }

    pub fn reduce_mean(&self, axis: Option<usize>) -> Result<Tensor, TensorError> {
        self.reduce("reduce_mean", axis, true)
    }

    /// Numerically stable softmax along `axis`; a single-element axis yields
    /// exactly 1.0.
    pub fn softmax(&self, axis: usize) -> Result<Tensor, TensorError> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis { op: "softmax", axis, rank: shape.len() });
        }
        let values = self.values();
        let mut out = vec![0.0; values.len()];
        for lane in lane_iter(&shape, axis) {
            let mut max = f64::NEG_INFINITY;
            for &i in &lane {
                max = max.max(values[i]);
            }
            let mut sum = 0.0;
            for &i in &lane {
                let e = (values[i] - max).exp();
                out[i] = e;
                sum += e;
            }
            for &i in &lane {
                out[i] /= sum;
            }
        }
        self.graph.push("softmax", shape, out, self.requires_grad(), Op::Softmax(self.id, axis))
    }

    /// Layer normalization over the last axis (no affine parameters), `eps`
    /// added inside the square root.
    pub fn layer_norm(&self, eps: f64) -> Result<Tensor, TensorError> {
        let shape = self.shape();
        if shape.is_empty() {
            return Err(TensorError::InvalidAxis { op: "layer_norm", axis: 0, rank: 0 });
        }
        let axis = shape.len() - 1;
        let n = shape[axis] as f64;
        let values = self.values();
        let mut out = vec![0.0; values.len()];
        let lanes = lane_iter(&shape, axis);
        let mut rstds = Vec::with_capacity(lanes.len());
        for lane in lanes {
            let mut mean = 0.0;
            for &i in &lane {
                mean += values[i];
            }
            mean /= n;
            let mut var = 0.0;
            for &i in &lane {
                let d = values[i] - mean;
                var += d * d;
            }
            var /= n;
            let rstd = 1.0 / (var + eps).sqrt();
            rstds.push(rstd);
            for &i in &lane {
                out[i] = (values[i] - mean) * rstd;
            }
        }
        self.graph.push(
            "layer_norm",
            shape,
            out,
            self.requires_grad(),
            Op::LayerNorm { input: self.id, rstd: rstds },
        )
    }

    fn unary(
        &self,
        name: &'static str,
        f: impl Fn(f64) -> f64,
        op: impl Fn(usize) -> Op,
    ) -> Result<Tensor, TensorError> {
        let values: Vec<f64> = self.values().iter().map(|&v| f(v)).collect();
        self.graph.push(name, self.shape(), values, self.requires_grad(), op(self.id))
    }

    pub fn gelu(&self) -> Result<Tensor, TensorError> {
        self.unary("gelu", crate::math::gelu, Op::Gelu)
    }

    pub fn sigmoid(&self) -> Result<Tensor, TensorError> {
        self.unary("sigmoid", crate::math::sigmoid, Op::Sigmoid)
    }

    pub fn softplus(&self) -> Result<Tensor, TensorError> {
        self.unary("softplus", crate::math::softplus, Op::Softplus)
    }

    pub fn exp(&self) -> Result<Tensor, TensorError> {
        self.unary("exp", f64::exp, Op::Exp)
    }

    pub fn log(&self) -> Result<Tensor, TensorError> {
        self.unary("log", f64::ln, Op::Log)
    }

    /// Mean squared difference against `other` (scalar output).
    pub fn mse(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        let d = self.sub(other)?;
        d.mul(&d)?.reduce_mean(None)
    }

    /// Convenience for scalar-loss backward.
    pub fn backward(&self) -> Result<(), TensorError> {
        self.graph.backward(self)
    }
}

pub mod check {
    //! Central-difference gradient verification.

    use super::*;

    /// One named input to a checked function.
    #[derive(Clone)]
    pub struct CheckInput {
        pub name: String,
        pub shape: Vec<usize>,
        pub values: Vec<f64>,
    }

    /// Outcome of a finite-difference sweep.
    #[derive(Debug, Clone)]
    pub struct CheckReport {
        /// Largest relative error over the checked coordinates, with
        /// denominator `max(|analytic|, |numeric|, 1e-8)`.
        pub max_rel_err: f64,
        /// Input name and flat coordinate of the worst entry.
        pub worst: Option<(String, usize)>,
        pub coords_checked: usize,
    }

    impl CheckReport {
        pub fn passes(&self, tol: f64) -> bool {
            self.max_rel_err < tol
        }
    }

    /// Compare analytic gradients of `f` against central differences.
    ///
    /// `f` must build a scalar loss on the provided graph from leaves that
    /// mirror `inputs` (same order). Coordinates where both the analytic and
    /// the numeric estimate sit below `zero_atol` count as exact agreement;
    /// this absorbs finite-difference noise on structurally zero gradients.
    /// `max_coords` caps the checked coordinates per input (deterministic
    /// stride subsampling).
    pub fn grad_check<F>(
        f: F,
        inputs: &[CheckInput],
        h: f64,
        zero_atol: f64,
        max_coords: Option<usize>,
    ) -> Result<CheckReport, TensorError>
    where
        F: Fn(&Graph, &[Tensor]) -> Result<Tensor, TensorError> + Sync + Send,
    {
        let eval = |vals: &[Vec<f64>]| -> Result<f64, TensorError> {
            let graph = Graph::new();
            let leaves: Vec<Tensor> = inputs
                .iter()
                .zip(vals)
                .map(|(ci, v)| graph.leaf(v.clone(), &ci.shape, true))
                .collect::<Result<_, _>>()?;
            Ok(f(&graph, &leaves)?.scalar_value())
        };

        // Analytic pass.
        let graph = Graph::new();
        let leaves: Vec<Tensor> = inputs
            .iter()
            .map(|ci| graph.leaf(ci.values.clone(), &ci.shape, true))
            .collect::<Result<_, _>>()?;
        let loss = f(&graph, &leaves)?;
        graph.backward(&loss)?;
        let analytic: Vec<Vec<f64>> = leaves
            .iter()
            .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
            .collect();

        let base: Vec<Vec<f64>> = inputs.iter().map(|ci| ci.values.clone()).collect();
        // Flat work list of (input index, coordinate).
        let mut work: Vec<(usize, usize)> = Vec::new();
        for (ii, ci) in inputs.iter().enumerate() {
            let n = ci.values.len();
            let take = max_coords.unwrap_or(n).min(n);
            let stride = (n / take.max(1)).max(1);
            let mut picked = 0;
            let mut c = 0;
            while picked < take && c < n {
                work.push((ii, c));
                picked += 1;
                c += stride;
            }
        }

        let results: Vec<Result<(f64, usize), TensorError>> =
            parallel::map_indexed(work.len(), |wi| {
                let (ii, c) = work[wi];
                let mut plus = base.clone();
                plus[ii][c] += h;
                let mut minus = base.clone();
                minus[ii][c] -= h;
                let fp = eval(&plus)?;
                let fm = eval(&minus)?;
                let numeric = (fp - fm) / (2.0 * h);
                let a = analytic[ii][c];
                let rel = if a.abs() <= zero_atol && numeric.abs() <= zero_atol {
                    0.0
                } else {
                    (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8)
                };
                Ok((rel, wi))
            });

        let mut report = CheckReport { max_rel_err: 0.0, worst: None, coords_checked: work.len() };
        for r in results {
            let (rel, wi) = r?;
            if rel > report.max_rel_err {
                let (ii, c) = work[wi];
                report.max_rel_err = rel;
                report.worst = Some((inputs[ii].name.clone(), c));
            }
        }
        Ok(report)
    }
}
