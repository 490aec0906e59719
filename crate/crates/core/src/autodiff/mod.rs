//! Tape-based reverse-mode automatic differentiation over dense f64 matrices.
//!
//! The tape is define-by-run: building an op evaluates it immediately and
//! records it for the backward pass. The primitive set is deliberately small
//! (matmul, add, mul, sigmoid, exp, log, softmax, layer norm, rotary rotation,
//! row gather, sum/mean); composite layers such as attention, feed-forward
//! and adaptive layer norm are expressed in terms of these so every backward
//! rule stays individually testable.
//!
//! Everything is double precision. All matrices are row-major; a scalar is a
//! 1x1 matrix and a row vector is 1xN. `Add`/`Mul` broadcast a 1x1 scalar or
//! a 1xN row vector against an RxN operand.

mod check;
mod store;

pub use check::{finite_difference_check, FdReport};
pub use store::{load_checkpoint, save_checkpoint, CheckpointManifest, ParamMeta, ParamStore};

use std::collections::BTreeMap;
use std::sync::Arc;
use thiserror::Error;

/// Floor below which a probability fed to `log` is treated as an underflow
/// rather than silently producing `-inf`.
pub const LOG_FLOOR: f64 = 1e-300;

#[derive(Debug, Error)]
pub enum GradError {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("loss node {0} is not a scalar")]
    NonScalarLoss(usize),
    #[error("non-finite value in {op} at node {node}")]
    NonFinite { node: usize, op: &'static str },
    #[error("log of non-positive or underflowed value at node {node}")]
    LogUnderflow { node: usize },
    #[error("unknown parameter '{0}'")]
    UnknownParam(String),
    #[error("non-finite loss while perturbing parameter '{0}'")]
    NonFiniteLoss(String),
    #[error("duplicate parameter '{0}'")]
    DuplicateParam(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub fn new(rows: usize, cols: usize) -> Self {
        Shape { rows, cols }
    }
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }
    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }
}

pub type NodeId = usize;

enum Data {
    Owned(Vec<f64>),
    Shared(Arc<Vec<f64>>),
}

impl Data {
    fn as_slice(&self) -> &[f64] {
        match self {
            Data::Owned(v) => v,
            Data::Shared(a) => a,
        }
    }
}

enum Op {
    /// Leaf with no gradient.
    Input,
    /// Leaf owned by a named parameter; receives gradient.
    Param(String),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul {
        a: NodeId,
        b: NodeId,
        trans_a: bool,
        trans_b: bool,
    },
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    /// Row-wise, numerically stable (max-subtracted).
    Softmax(NodeId),
    /// Row-wise normalization to zero mean / unit variance; no learned
    /// affine (scale and shift are applied with `mul`/`add` where needed).
    LayerNorm { x: NodeId, eps: f64 },
    /// Rotary position rotation applied independently to each `head_dim`
    /// chunk of every row; row i uses position `i + offset`.
    Rotary {
        x: NodeId,
        head_dim: usize,
        base: f64,
        offset: usize,
    },
    /// Select rows of a table by index; duplicate indices accumulate in
    /// the backward pass.
    Gather { table: NodeId, rows: Vec<usize> },
    Sum(NodeId),
    Mean(NodeId),
}

struct Node {
    op: Op,
    shape: Shape,
    data: Data,
}

/// Single-use recording of a forward computation.
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_shape: Shape,
    trans_a: bool,
    b: &[f64],
    b_shape: Shape,
    trans_b: bool,
    beta: f64,
    out: &mut [f64],
) {
    let (rsa, csa) = if trans_a {
        (1isize, a_shape.cols as isize)
    } else {
        (a_shape.cols as isize, 1isize)
    };
    let (rsb, csb) = if trans_b {
        (1isize, b_shape.cols as isize)
    } else {
        (b_shape.cols as isize, 1isize)
    };
    debug_assert_eq!(out.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Broadcast compatibility of `small` against `big` for add/mul: equal
/// shapes, a 1xN row vector against RxN, or a 1x1 scalar.
fn broadcast_ok(big: Shape, small: Shape) -> bool {
    small == big || small.is_scalar() || (small.rows == 1 && small.cols == big.cols)
}

/// Reduce a gradient of shape `from` down to the broadcast operand shape
/// `to` by summing over the broadcast dimensions.
fn reduce_to(grad: &[f64], from: Shape, to: Shape) -> Vec<f64> {
    if from == to {
        return grad.to_vec();
    }
    if to.is_scalar() {
        return vec![grad.iter().sum()];
    }
    // Row-vector operand: column sums.
    let mut out = vec![0.0; to.cols];
    for r in 0..from.rows {
        let row = &grad[r * from.cols..(r + 1) * from.cols];
        for (o, g) in out.iter_mut().zip(row) {
            *o += g;
        }
    }
    out
}

fn rotary_angle(pos: usize, pair: usize, half: usize, base: f64) -> f64 {
    pos as f64 * base.powf(-((pair as f64) / (half as f64)))
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id].shape
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        self.nodes[id].data.as_slice()
    }

    /// Scalar convenience accessor.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id].data.as_slice()[0]
    }

    fn push(&mut self, op: Op, shape: Shape, data: Data) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { op, shape, data });
        id
    }

    fn err(&self, op: &'static str, detail: String) -> GradError {
        GradError::ShapeMismatch {
            node: self.nodes.len(),
            op,
            detail,
        }
    }

    /// A leaf that never receives gradient.
    pub fn input(&mut self, shape: Shape, data: Vec<f64>) -> NodeId {
        debug_assert_eq!(shape.len(), data.len());
        self.push(Op::Input, shape, Data::Owned(data))
    }

    /// A leaf sharing storage with the caller (no copy); never receives
    /// gradient. Used for precomputed constants such as head selectors.
    pub fn input_shared(&mut self, shape: Shape, data: Arc<Vec<f64>>) -> NodeId {
        debug_assert_eq!(shape.len(), data.len());
        self.push(Op::Input, shape, Data::Shared(data))
    }

    pub fn scalar_input(&mut self, v: f64) -> NodeId {
        self.input(Shape::new(1, 1), vec![v])
    }

    /// Bind a named parameter from the store as a gradient-receiving leaf.
    /// Repeated binds of the same name return the same node so gradients
    /// accumulate across all uses.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId, GradError> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let (shape, data) = store
            .entry(name)
            .ok_or_else(|| GradError::UnknownParam(name.to_string()))?;
        let id = self.push(Op::Param(name.to_string()), shape, Data::Shared(data));
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (big, small, swapped) = if broadcast_ok(sa, sb) {
            (sa, sb, false)
        } else if broadcast_ok(sb, sa) {
            (sb, sa, true)
        } else {
            return Err(self.err("add", format!("{sa:?} vs {sb:?}")));
        };
        let (x, y) = if swapped { (b, a) } else { (a, b) };
        let xv = self.value(x);
        let yv = self.value(y);
        let mut out = Vec::with_capacity(big.len());
        if small == big {
            out.extend(xv.iter().zip(yv).map(|(p, q)| p + q));
        } else if small.is_scalar() {
            let s = yv[0];
            out.extend(xv.iter().map(|p| p + s));
        } else {
            for r in 0..big.rows {
                let row = &xv[r * big.cols..(r + 1) * big.cols];
                out.extend(row.iter().zip(yv).map(|(p, q)| p + q));
            }
        }
        Ok(self.push(Op::Add(a, b), big, Data::Owned(out)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (big, small, swapped) = if broadcast_ok(sa, sb) {
            (sa, sb, false)
        } else if broadcast_ok(sb, sa) {
            (sb, sa, true)
        } else {
            return Err(self.err("mul", format!("{sa:?} vs {sb:?}")));
        };
        let (x, y) = if swapped { (b, a) } else { (a, b) };
        let xv = self.value(x);
        let yv = self.value(y);
        let mut out = Vec::with_capacity(big.len());
        if small == big {
            out.extend(xv.iter().zip(yv).map(|(p, q)| p * q));
        } else if small.is_scalar() {
            let s = yv[0];
            out.extend(xv.iter().map(|p| p * s));
        } else {
            for r in 0..big.rows {
                let row = &xv[r * big.cols..(r + 1) * big.cols];
                out.extend(row.iter().zip(yv).map(|(p, q)| p * q));
            }
        }
        Ok(self.push(Op::Mul(a, b), big, Data::Owned(out)))
    }

    /// Multiply by a compile-time scalar constant.
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, GradError> {
        let s = self.scalar_input(c);
        self.mul(a, s)
    }

    /// a - b, expressed through the primitive set.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.matmul_t(a, b, false, false)
    }

    pub fn matmul_t(
        &mut self,
        a: NodeId,
        b: NodeId,
        trans_a: bool,
        trans_b: bool,
    ) -> Result<NodeId, GradError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, ka) = if trans_a {
            (sa.cols, sa.rows)
        } else {
            (sa.rows, sa.cols)
        };
        let (kb, n) = if trans_b {
            (sb.cols, sb.rows)
        } else {
            (sb.rows, sb.cols)
        };
        if ka != kb {
            return Err(self.err("matmul", format!("{sa:?} x {sb:?} (ta={trans_a}, tb={trans_b})")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            ka,
            n,
            self.value(a),
            sa,
            trans_a,
            self.value(b),
            sb,
            trans_b,
            0.0,
            &mut out,
        );
        Ok(self.push(
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            },
            Shape::new(m, n),
            Data::Owned(out),
        ))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, GradError> {
        let shape = self.shape(x);
        let out: Vec<f64> = self.value(x).iter().map(|&z| stable_sigmoid(z)).collect();
        Ok(self.push(Op::Sigmoid(x), shape, Data::Owned(out)))
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId, GradError> {
        let shape = self.shape(x);
        let out: Vec<f64> = self.value(x).iter().map(|&z| z.exp()).collect();
        Ok(self.push(Op::Exp(x), shape, Data::Owned(out)))
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId, GradError> {
        let shape = self.shape(x);
        let id = self.nodes.len();
        let mut out = Vec::with_capacity(shape.len());
        for &z in self.value(x) {
            if !(z >= LOG_FLOOR) {
                return Err(GradError::LogUnderflow { node: id });
            }
            out.push(z.ln());
        }
        Ok(self.push(Op::Log(x), shape, Data::Owned(out)))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId, GradError> {
        let shape = self.shape(x);
        let xv = self.value(x);
        let mut out = vec![0.0; shape.len()];
        for r in 0..shape.rows {
            let row = &xv[r * shape.cols..(r + 1) * shape.cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[r * shape.cols..(r + 1) * shape.cols];
            let mut z = 0.0;
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = (v - m).exp();
                z += *o;
            }
            for o in orow.iter_mut() {
                *o /= z;
            }
        }
        Ok(self.push(Op::Softmax(x), shape, Data::Owned(out)))
    }

    pub fn layer_norm(&mut self, x: NodeId, eps: f64) -> Result<NodeId, GradError> {
        let shape = self.shape(x);
        let xv = self.value(x);
        let n = shape.cols as f64;
        let mut out = vec![0.0; shape.len()];
        for r in 0..shape.rows {
            let row = &xv[r * shape.cols..(r + 1) * shape.cols];
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            let orow = &mut out[r * shape.cols..(r + 1) * shape.cols];
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
        }
        Ok(self.push(Op::LayerNorm { x, eps }, shape, Data::Owned(out)))
    }

    pub fn rotary(
        &mut self,
        x: NodeId,
        head_dim: usize,
        base: f64,
        offset: usize,
    ) -> Result<NodeId, GradError> {
        let shape = self.shape(x);
        if head_dim == 0 || head_dim % 2 != 0 || shape.cols % head_dim != 0 {
            return Err(self.err(
                "rotary",
                format!("cols {} not divisible by even head_dim {head_dim}", shape.cols),
            ));
        }
        let half = head_dim / 2;
        let xv = self.value(x);
        let mut out = xv.to_vec();
        for r in 0..shape.rows {
            let pos = r + offset;
            let row = &mut out[r * shape.cols..(r + 1) * shape.cols];
            for chunk in row.chunks_mut(head_dim) {
                for q in 0..half {
                    let theta = rotary_angle(pos, q, half, base);
                    let (sin, cos) = theta.sin_cos();
                    let a = chunk[2 * q];
                    let b = chunk[2 * q + 1];
                    chunk[2 * q] = a * cos - b * sin;
                    chunk[2 * q + 1] = a * sin + b * cos;
                }
            }
        }
        Ok(self.push(
            Op::Rotary {
                x,
                head_dim,
                base,
                offset,
            },
            shape,
            Data::Owned(out),
        ))
    }

    pub fn gather(&mut self, table: NodeId, rows: Vec<usize>) -> Result<NodeId, GradError> {
        let ts = self.shape(table);
        if let Some(&bad) = rows.iter().find(|&&r| r >= ts.rows) {
            return Err(self.err("gather", format!("row {bad} out of {} rows", ts.rows)));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(rows.len() * ts.cols);
        for &r in &rows {
            out.extend_from_slice(&tv[r * ts.cols..(r + 1) * ts.cols]);
        }
        let shape = Shape::new(rows.len(), ts.cols);
        Ok(self.push(Op::Gather { table, rows }, shape, Data::Owned(out)))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, GradError> {
        let s: f64 = self.value(x).iter().sum();
        Ok(self.push(Op::Sum(x), Shape::new(1, 1), Data::Owned(vec![s])))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId, GradError> {
        let v = self.value(x);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        Ok(self.push(Op::Mean(x), Shape::new(1, 1), Data::Owned(vec![m])))
    }

    /// Reverse pass from a scalar loss node. Returns gradients shaped like
    /// the parameter store; parameters not reachable from the loss get zero.
    pub fn backward(&self, loss: NodeId, params: &ParamStore) -> Result<Gradients, GradError> {
        self.backward_seeded(loss, params, 1.0)
    }

    pub(crate) fn backward_seeded(
        &self,
        loss: NodeId,
        params: &ParamStore,
        seed: f64,
    ) -> Result<Gradients, GradError> {
        if !self.shape(loss).is_scalar() {
            return Err(GradError::NonScalarLoss(loss));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss] = Some(vec![seed]);

        for id in (0..=loss).rev() {
            let g = match adj[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[id];
            match &node.op {
                Op::Input => {}
                Op::Param(name) => {
                    // Re-stash for collection below.
                    adj[id] = Some(g);
                    let _ = name;
                    continue;
                }
                Op::Add(a, b) => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    accumulate(&mut adj[*a], &reduce_to(&g, node.shape, sa));
                    accumulate(&mut adj[*b], &reduce_to(&g, node.shape, sb));
                }
                Op::Mul(a, b) => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let ga = mul_bcast(&g, node.shape, bv, sb);
                    let gb = mul_bcast(&g, node.shape, av, sa);
                    accumulate(&mut adj[*a], &reduce_to(&ga, node.shape, sa));
                    accumulate(&mut adj[*b], &reduce_to(&gb, node.shape, sb));
                }
                Op::MatMul {
                    a,
                    b,
                    trans_a,
                    trans_b,
                } => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    let gs = node.shape;
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    // dA contracts over the output columns, dB over the
                    // output rows, regardless of the transpose flags.
                    {
                        let ga = adj[*a].get_or_insert_with(|| vec![0.0; sa.len()]);
                        match (*trans_a, *trans_b) {
                            // dA = g . B^T
                            (false, false) => {
                                gemm(sa.rows, gs.cols, sa.cols, &g, gs, false, bv, sb, true, 1.0, ga)
                            }
                            // dA = g . B
                            (false, true) => {
                                gemm(sa.rows, gs.cols, sa.cols, &g, gs, false, bv, sb, false, 1.0, ga)
                            }
                            // dA = B . g^T
                            (true, false) => {
                                gemm(sa.rows, gs.cols, sa.cols, bv, sb, false, &g, gs, true, 1.0, ga)
                            }
                            // dA = B^T . g^T
                            (true, true) => {
                                gemm(sa.rows, gs.cols, sa.cols, bv, sb, true, &g, gs, true, 1.0, ga)
                            }
                        }
                    }
                    {
                        let gb = adj[*b].get_or_insert_with(|| vec![0.0; sb.len()]);
                        match (*trans_a, *trans_b) {
                            // dB = A^T . g
                            (false, false) => {
                                gemm(sb.rows, gs.rows, sb.cols, av, sa, true, &g, gs, false, 1.0, gb)
                            }
                            // dB = g^T . A
                            (false, true) => {
                                gemm(sb.rows, gs.rows, sb.cols, &g, gs, true, av, sa, false, 1.0, gb)
                            }
                            // dB = A . g
                            (true, false) => {
                                gemm(sb.rows, gs.rows, sb.cols, av, sa, false, &g, gs, false, 1.0, gb)
                            }
                            // dB = g^T . A^T
                            (true, true) => {
                                gemm(sb.rows, gs.rows, sb.cols, &g, gs, true, av, sa, true, 1.0, gb)
                            }
                        }
                    }
                }
                Op::Sigmoid(x) => {
                    let y = self.value(id);
                    let gx: Vec<f64> = g
                        .iter()
                        .zip(y)
                        .map(|(gi, &yi)| gi * yi * (1.0 - yi))
                        .collect();
                    accumulate(&mut adj[*x], &gx);
                }
                Op::Exp(x) => {
                    let y = self.value(id);
                    let gx: Vec<f64> = g.iter().zip(y).map(|(gi, &yi)| gi * yi).collect();
                    accumulate(&mut adj[*x], &gx);
                }
                Op::Log(x) => {
                    let xv = self.value(*x);
                    let gx: Vec<f64> = g.iter().zip(xv).map(|(gi, &xi)| gi / xi).collect();
                    accumulate(&mut adj[*x], &gx);
                }
                Op::Softmax(x) => {
                    let y = self.value(id);
                    let s = node.shape;
                    let mut gx = vec![0.0; s.len()];
                    for r in 0..s.rows {
                        let yr = &y[r * s.cols..(r + 1) * s.cols];
                        let gr = &g[r * s.cols..(r + 1) * s.cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        let out = &mut gx[r * s.cols..(r + 1) * s.cols];
                        for ((o, &yi), &gi) in out.iter_mut().zip(yr).zip(gr) {
                            *o = yi * (gi - dot);
                        }
                    }
                    accumulate(&mut adj[*x], &gx);
                }
                Op::LayerNorm { x, eps } => {
                    let xv = self.value(*x);
                    let y = self.value(id);
                    let s = node.shape;
                    let n = s.cols as f64;
                    let mut gx = vec![0.0; s.len()];
                    for r in 0..s.rows {
                        let xr = &xv[r * s.cols..(r + 1) * s.cols];
                        let yr = &y[r * s.cols..(r + 1) * s.cols];
                        let gr = &g[r * s.cols..(r + 1) * s.cols];
                        let mean = xr.iter().sum::<f64>() / n;
                        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        let gmean = gr.iter().sum::<f64>() / n;
                        let gydot = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                        let out = &mut gx[r * s.cols..(r + 1) * s.cols];
                        for ((o, &yi), &gi) in out.iter_mut().zip(yr).zip(gr) {
                            *o = inv * (gi - gmean - yi * gydot);
                        }
                    }
                    accumulate(&mut adj[*x], &gx);
                }
                Op::Rotary {
                    x,
                    head_dim,
                    base,
                    offset,
                } => {
                    let s = node.shape;
                    let half = head_dim / 2;
                    let mut gx = g.clone();
                    for r in 0..s.rows {
                        let pos = r + offset;
                        let row = &mut gx[r * s.cols..(r + 1) * s.cols];
                        for chunk in row.chunks_mut(*head_dim) {
                            for q in 0..half {
                                let theta = rotary_angle(pos, q, half, *base);
                                let (sin, cos) = theta.sin_cos();
                                let ga = chunk[2 * q];
                                let gb = chunk[2 * q + 1];
                                // Inverse rotation.
                                chunk[2 * q] = ga * cos + gb * sin;
                                chunk[2 * q + 1] = -ga * sin + gb * cos;
                            }
                        }
                    }
                    accumulate(&mut adj[*x], &gx);
                }
                Op::Gather { table, rows } => {
                    let ts = self.shape(*table);
                    let gt = adj[*table].get_or_insert_with(|| vec![0.0; ts.len()]);
                    for (i, &r) in rows.iter().enumerate() {
                        let src = &g[i * ts.cols..(i + 1) * ts.cols];
                        let dst = &mut gt[r * ts.cols..(r + 1) * ts.cols];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                Op::Sum(x) => {
                    let s = self.shape(*x);
                    accumulate(&mut adj[*x], &vec![g[0]; s.len()]);
                }
                Op::Mean(x) => {
                    let s = self.shape(*x);
                    let v = g[0] / s.len() as f64;
                    accumulate(&mut adj[*x], &vec![v; s.len()]);
                }
            }
        }

        let mut grads = Gradients::zeros_like(params);
        for (name, &id) in &self.params {
            if let Some(g) = adj[id].take() {
                grads.set(name, g);
            }
        }
        Ok(grads)
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        None => *slot = Some(g.to_vec()),
    }
}

/// Elementwise product of a full-shape gradient with a possibly broadcast
/// operand value, producing a full-shape result.
fn mul_bcast(g: &[f64], gs: Shape, v: &[f64], vs: Shape) -> Vec<f64> {
    if vs == gs {
        g.iter().zip(v).map(|(a, b)| a * b).collect()
    } else if vs.is_scalar() {
        g.iter().map(|a| a * v[0]).collect()
    } else {
        let mut out = Vec::with_capacity(g.len());
        for r in 0..gs.rows {
            let row = &g[r * gs.cols..(r + 1) * gs.cols];
            out.extend(row.iter().zip(v).map(|(a, b)| a * b));
        }
        out
    }
}

pub fn stable_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// log(sigmoid(z)) without intermediate underflow.
pub fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

/// Gradients aligned with a `ParamStore`: every parameter has an entry,
/// zero-filled when unreachable from the loss.
#[derive(Debug, Clone)]
pub struct Gradients {
    inner: BTreeMap<String, Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamStore) -> Self {
        let inner = params
            .iter()
            .map(|(name, shape, _)| (name.to_string(), vec![0.0; shape.len()]))
            .collect();
        Gradients { inner }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.inner.get(name).map(|v| v.as_slice())
    }

    fn set(&mut self, name: &str, g: Vec<f64>) {
        if let Some(slot) = self.inner.get_mut(name) {
            debug_assert_eq!(slot.len(), g.len());
            *slot = g;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.inner.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Vec<f64>)> {
        self.inner.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn global_norm(&self) -> f64 {
        self.inner
            .values()
            .flat_map(|v| v.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        for v in self.inner.values_mut() {
            for g in v.iter_mut() {
                *g *= c;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.inner.values().all(|v| v.iter().all(|g| g.is_finite()))
    }

    /// Accumulate another gradient set (same store layout).
    pub fn add_assign(&mut self, other: &Gradients) {
        for (k, v) in self.inner.iter_mut() {
            if let Some(o) = other.inner.get(k) {
                for (a, b) in v.iter_mut().zip(o) {
                    *a += b;
                }
            }
        }
    }
}
