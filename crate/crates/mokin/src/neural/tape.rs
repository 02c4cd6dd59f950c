//! Reverse-mode autodiff tape.
//!
//! A [`Tape`] is an append-only arena of tensor nodes. Forward methods
//! push a node per operation; creation order is a topological order, so
//! [`Tape::backward`] visits nodes exactly once in reverse, scattering
//! each node's gradient into its parents. A tape can be consumed by
//! backward only once; training builds a fresh tape per step.
//!
//! Domain-specific operations (quaternion row normalization, forward
//! kinematics, y-twist extraction) are fused nodes whose backward passes
//! call the analytic gradients from [`crate::quat`] and
//! [`crate::kinematics`]. Everything here is finite-difference checked in
//! the unit tests and again (with randomized shapes) by the acceptance
//! suite.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kinematics::{fk_backward, fk_forward_cached, Composition, FkCache, Skeleton};
use crate::quat::{self, Quat};

use super::tensor::Tensor;

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Node(pub(crate) usize);

/// Conv1d padding scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output length `ceil(len / stride)`; zero padding split left/right
    /// with the extra column on the right.
    Same,
    /// No padding; output length `(len - kernel) / stride + 1`.
    Valid,
}

enum Op {
    Leaf,
    Matmul { a: Node, b: Node },
    Add { a: Node, b: Node },
    AddBias { a: Node, b: Node },
    Sub { a: Node, b: Node },
    Mul { a: Node, b: Node },
    MulChan { x: Node, g: Node },
    AddChan { x: Node, b: Node },
    Scale { a: Node, c: f64 },
    AddScalar { a: Node },
    Concat { parts: Vec<Node> },
    SliceRows { a: Node, start: usize },
    Reshape { a: Node },
    Tanh { a: Node },
    Sigmoid { a: Node },
    LeakyRelu { a: Node, slope: f64 },
    Relu { a: Node },
    Abs { a: Node },
    Square { a: Node },
    Sqrt { a: Node },
    Ln { a: Node },
    Clamp { a: Node, lo: f64, hi: f64 },
    Dropout { a: Node, mask: Vec<f64> },
    InstanceNorm1d { a: Node, normalized: Vec<f64>, inv_std: Vec<f64> },
    Conv1d { x: Node, w: Node, b: Node, stride: usize, pad_left: usize },
    Sum { a: Node },
    Mean { a: Node },
    StackCols { parts: Vec<Node> },
    NormalizeRows { a: Node },
    Fk { quats: Node, skeleton: Rc<Skeleton>, mode: Composition, cache: FkCache },
    TwistY { quats: Node },
}

struct NodeData {
    value: Tensor,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    op: Op,
}

/// Append-only computation graph; see module docs.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<NodeData>,
    consumed: bool,
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node from index `len` on, invalidating their handles.
    /// Streaming inference extracts a frame's values and rolls the tape
    /// back to the parameter binding, so one binding serves an unbounded
    /// stream at constant memory.
    pub fn rewind(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    /// Inserts a leaf. Pass `needs_grad = true` for parameters.
    pub fn leaf(&mut self, value: Tensor, needs_grad: bool) -> Node {
        self.push(value, needs_grad, Op::Leaf)
    }

    /// Inserts a gradient-free constant.
    pub fn constant(&mut self, value: Tensor) -> Node {
        self.leaf(value, false)
    }

    pub fn value(&self, node: Node) -> &Tensor {
        &self.nodes[node.0].value
    }

    /// Gradient of the last backward pass, if this node received one.
    pub fn grad(&self, node: Node) -> Option<&[f64]> {
        self.nodes[node.0].grad.as_deref()
    }

    /// Gradient shaped like the node value, zeros if none was propagated.
    pub fn grad_tensor(&self, node: Node) -> Tensor {
        let value = &self.nodes[node.0].value;
        match &self.nodes[node.0].grad {
            Some(g) => Tensor { shape: value.shape.clone(), data: g.clone() },
            None => Tensor::zeros(&value.shape),
        }
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> Node {
        self.nodes.push(NodeData { value, grad: None, needs_grad, op });
        Node(self.nodes.len() - 1)
    }

    fn needs(&self, node: Node) -> bool {
        self.nodes[node.0].needs_grad
    }

    fn push_op(&mut self, value: Tensor, parents: &[Node], op: Op) -> Node {
        let needs = parents.iter().any(|p| self.needs(*p));
        self.push(value, needs, op)
    }

    // ---- forward operations ----

    /// `a [m,k] or [k]` times `b [k,n]`; vector inputs act as one row.
    pub fn matmul(&mut self, a: Node, b: Node) -> Result<Node> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rank() != 2 {
            return Err(shape_err("matmul", format!("rhs must be rank 2, got {:?}", bv.shape)));
        }
        let (k2, n) = (bv.shape[0], bv.shape[1]);
        let (m, k) = match av.rank() {
            1 => (1, av.shape[0]),
            2 => (av.shape[0], av.shape[1]),
            _ => {
                return Err(shape_err("matmul", format!("lhs must be rank 1 or 2, got {:?}", av.shape)))
            }
        };
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!("inner dims disagree: lhs {:?} vs rhs {:?}", av.shape, bv.shape),
            ));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(&av.data, m, k, &bv.data, n, &mut out);
        let shape = if self.value(a).rank() == 1 { vec![n] } else { vec![m, n] };
        Ok(self.push_op(Tensor { shape, data: out }, &[a, b], Op::Matmul { a, b }))
    }

    fn binary_same_shape(&self, op: &'static str, a: Node, b: Node) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape != bv.shape {
            return Err(shape_err(op, format!("{:?} vs {:?}", av.shape, bv.shape)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Node, b: Node) -> Result<Node> {
        self.binary_same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape.clone();
        Ok(self.push_op(Tensor { shape, data }, &[a, b], Op::Add { a, b }))
    }

    /// Adds a `[n]` bias to every row of `a [m,n]` (or to a `[n]` vector).
    pub fn add_bias(&mut self, a: Node, b: Node) -> Result<Node> {
        let (av, bv) = (self.value(a), self.value(b));
        let n = bv.cols();
        if bv.rank() != 1 || av.cols() != n {
            return Err(shape_err("add_bias", format!("{:?} vs bias {:?}", av.shape, bv.shape)));
        }
        let data = av
            .data
            .iter()
            .enumerate()
            .map(|(idx, x)| x + bv.data[idx % n])
            .collect();
        let shape = av.shape.clone();
        Ok(self.push_op(Tensor { shape, data }, &[a, b], Op::AddBias { a, b }))
    }

    pub fn sub(&mut self, a: Node, b: Node) -> Result<Node> {
        self.binary_same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.value(a).shape.clone();
        Ok(self.push_op(Tensor { shape, data }, &[a, b], Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Node, b: Node) -> Result<Node> {
        self.binary_same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape.clone();
        Ok(self.push_op(Tensor { shape, data }, &[a, b], Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Node, c: f64) -> Node {
        let value = Tensor {
            shape: self.value(a).shape.clone(),
            data: self.value(a).data.iter().map(|x| x * c).collect(),
        };
        self.push_op(value, &[a], Op::Scale { a, c })
    }

    pub fn add_scalar(&mut self, a: Node, c: f64) -> Node {
        let value = Tensor {
            shape: self.value(a).shape.clone(),
            data: self.value(a).data.iter().map(|x| x + c).collect(),
        };
        self.push_op(value, &[a], Op::AddScalar { a })
    }

    /// Concatenates along the leading axis. Vectors concatenate into a
    /// longer vector; matrices must share their trailing dimension.
    pub fn concat(&mut self, parts: &[Node]) -> Result<Node> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no inputs".into()));
        }
        let rank = self.value(parts[0]).rank();
        if rank > 2 {
            return Err(shape_err("concat", format!("need rank 1 or 2, got {:?}", self.value(parts[0]).shape)));
        }
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut lead = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rank() != rank || (rank == 2 && v.cols() != cols) {
                return Err(shape_err(
                    "concat",
                    format!("{:?} incompatible with first part {:?}", v.shape, self.value(parts[0]).shape),
                ));
            }
            lead += v.shape[0];
            data.extend_from_slice(&v.data);
        }
        let shape = if rank == 1 { vec![lead] } else { vec![lead, cols] };
        Ok(self.push_op(Tensor { shape, data }, parts, Op::Concat { parts: parts.to_vec() }))
    }

    /// Takes `len` leading-axis entries starting at `start`.
    pub fn slice_rows(&mut self, a: Node, start: usize, len: usize) -> Result<Node> {
        let v = self.value(a);
        let (rank, cols) = (v.rank(), v.cols());
        if rank > 2 {
            return Err(shape_err("slice", format!("need rank 1 or 2, got {:?}", v.shape)));
        }
        let rows = v.shape[0];
        let width = if rank == 1 { 1 } else { cols };
        if start + len > rows {
            return Err(shape_err(
                "slice",
                format!("rows {start}..{} out of bounds for {:?}", start + len, v.shape),
            ));
        }
        let data = v.data[start * width..(start + len) * width].to_vec();
        let shape = if rank == 1 { vec![len] } else { vec![len, cols] };
        Ok(self.push_op(Tensor { shape, data }, &[a], Op::SliceRows { a, start }))
    }

    /// Reinterprets the buffer with a new shape of equal element count.
    pub fn reshape(&mut self, a: Node, shape: &[usize]) -> Result<Node> {
        let v = self.value(a);
        let numel: usize = shape.iter().product();
        if numel != v.numel() {
            return Err(shape_err("reshape", format!("{:?} -> {:?}", v.shape, shape)));
        }
        let value = Tensor { shape: shape.to_vec(), data: v.data.clone() };
        Ok(self.push_op(value, &[a], Op::Reshape { a }))
    }

    fn unary(&mut self, a: Node, f: impl Fn(f64) -> f64, op: Op) -> Node {
        let value = Tensor {
            shape: self.value(a).shape.clone(),
            data: self.value(a).data.iter().map(|x| f(*x)).collect(),
        };
        self.push_op(value, &[a], op)
    }

    pub fn tanh(&mut self, a: Node) -> Node {
        self.unary(a, f64::tanh, Op::Tanh { a })
    }

    pub fn sigmoid(&mut self, a: Node) -> Node {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid { a })
    }

    pub fn leaky_relu(&mut self, a: Node, slope: f64) -> Node {
        self.unary(a, |x| if x > 0.0 { x } else { slope * x }, Op::LeakyRelu { a, slope })
    }

    pub fn relu(&mut self, a: Node) -> Node {
        self.unary(a, |x| x.max(0.0), Op::Relu { a })
    }

    pub fn abs(&mut self, a: Node) -> Node {
        self.unary(a, f64::abs, Op::Abs { a })
    }

    pub fn square(&mut self, a: Node) -> Node {
        self.unary(a, |x| x * x, Op::Square { a })
    }

    /// Elementwise square root; the derivative is unbounded at zero, so
    /// keep inputs strictly positive.
    pub fn sqrt(&mut self, a: Node) -> Node {
        self.unary(a, f64::sqrt, Op::Sqrt { a })
    }

    /// Natural log; clamp inputs away from zero first.
    pub fn ln(&mut self, a: Node) -> Node {
        self.unary(a, f64::ln, Op::Ln { a })
    }

    /// Clamps into `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&mut self, a: Node, lo: f64, hi: f64) -> Node {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp { a, lo, hi })
    }

    /// Inverted dropout: keeps each element with probability `keep` and
    /// scales survivors by `1/keep`, so the expectation is unchanged. At
    /// evaluation time simply do not insert the op.
    pub fn dropout(&mut self, a: Node, keep: f64, rng: &mut ChaCha8Rng) -> Node {
        assert!(keep > 0.0 && keep <= 1.0, "keep probability in (0, 1]");
        let mask: Vec<f64> = (0..self.value(a).numel())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let value = Tensor {
            shape: self.value(a).shape.clone(),
            data: self.value(a).data.iter().zip(&mask).map(|(x, m)| x * m).collect(),
        };
        self.push_op(value, &[a], Op::Dropout { a, mask })
    }

    /// Normalizes each channel (row) of `a [C, L]` to mean 0, variance 1
    /// over the length axis. Affine gain/bias, when wanted, are separate
    /// parameters applied with [`Tape::mul_chan`] / [`Tape::add_chan`].
    pub fn instance_norm_1d(&mut self, a: Node, eps: f64) -> Result<Node> {
        let v = self.value(a);
        if v.rank() != 2 {
            return Err(shape_err("instance_norm_1d", format!("need [C, L], got {:?}", v.shape)));
        }
        let (c, l) = (v.shape[0], v.shape[1]);
        let mut normalized = vec![0.0; c * l];
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let row = &v.data[ch * l..(ch + 1) * l];
            let mean = row.iter().sum::<f64>() / l as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / l as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[ch] = inv;
            for (idx, x) in row.iter().enumerate() {
                normalized[ch * l + idx] = (x - mean) * inv;
            }
        }
        let value = Tensor { shape: vec![c, l], data: normalized.clone() };
        Ok(self.push_op(value, &[a], Op::InstanceNorm1d { a, normalized, inv_std }))
    }

    /// Multiplies each row of `x [C, L]` by the matching entry of `g [C]`.
    pub fn mul_chan(&mut self, x: Node, g: Node) -> Result<Node> {
        let (xv, gv) = (self.value(x), self.value(g));
        if xv.rank() != 2 || gv.shape != vec![xv.shape[0]] {
            return Err(shape_err("mul_chan", format!("{:?} vs {:?}", xv.shape, gv.shape)));
        }
        let l = xv.shape[1];
        let data = xv
            .data
            .iter()
            .enumerate()
            .map(|(idx, v)| v * gv.data[idx / l])
            .collect();
        let shape = xv.shape.clone();
        // Same gradient structure as Mul with broadcasting; encode via a
        // dedicated matmul-free op below.
        Ok(self.push_op(Tensor { shape, data }, &[x, g], Op::MulChan { x, g }))
    }

    /// Adds `b [C]` to each row of `x [C, L]`.
    pub fn add_chan(&mut self, x: Node, b: Node) -> Result<Node> {
        let (xv, bv) = (self.value(x), self.value(b));
        if xv.rank() != 2 || bv.shape != vec![xv.shape[0]] {
            return Err(shape_err("add_chan", format!("{:?} vs {:?}", xv.shape, bv.shape)));
        }
        let l = xv.shape[1];
        let data = xv
            .data
            .iter()
            .enumerate()
            .map(|(idx, v)| v + bv.data[idx / l])
            .collect();
        let shape = xv.shape.clone();
        Ok(self.push_op(Tensor { shape, data }, &[x, b], Op::AddChan { x, b }))
    }

    /// 1-D convolution over `x [Cin, L]` with kernel `w [Cout, Cin, K]`
    /// and bias `b [Cout]`.
    pub fn conv1d(
        &mut self,
        x: Node,
        w: Node,
        b: Node,
        stride: usize,
        padding: Padding,
    ) -> Result<Node> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.rank() != 2 || wv.rank() != 3 || bv.rank() != 1 {
            return Err(shape_err(
                "conv1d",
                format!("x {:?}, w {:?}, b {:?}", xv.shape, wv.shape, bv.shape),
            ));
        }
        let (cin, l) = (xv.shape[0], xv.shape[1]);
        let (cout, cin_w, k) = (wv.shape[0], wv.shape[1], wv.shape[2]);
        if cin != cin_w || bv.shape[0] != cout {
            return Err(shape_err(
                "conv1d",
                format!("channels disagree: x {:?}, w {:?}, b {:?}", xv.shape, wv.shape, bv.shape),
            ));
        }
        let (lout, pad_left) = match padding {
            Padding::Same => {
                let lout = l.div_ceil(stride);
                let pad_total = ((lout - 1) * stride + k).saturating_sub(l);
                (lout, pad_total / 2)
            }
            Padding::Valid => {
                if l < k {
                    return Err(shape_err("conv1d", format!("valid conv needs len >= {k}, got {l}")));
                }
                ((l - k) / stride + 1, 0)
            }
        };
        let mut out = vec![0.0; cout * lout];
        for co in 0..cout {
            for t in 0..lout {
                let start = (t * stride) as isize - pad_left as isize;
                let mut acc = bv.data[co];
                for ci in 0..cin {
                    let xrow = &xv.data[ci * l..(ci + 1) * l];
                    let wrow = &wv.data[(co * cin + ci) * k..(co * cin + ci + 1) * k];
                    for (kk, wk) in wrow.iter().enumerate() {
                        let idx = start + kk as isize;
                        if idx >= 0 && (idx as usize) < l {
                            acc += xrow[idx as usize] * wk;
                        }
                    }
                }
                out[co * lout + t] = acc;
            }
        }
        let value = Tensor { shape: vec![cout, lout], data: out };
        Ok(self.push_op(value, &[x, w, b], Op::Conv1d { x, w, b, stride, pad_left }))
    }

    pub fn sum(&mut self, a: Node) -> Node {
        let total = self.value(a).data.iter().sum();
        self.push_op(Tensor::scalar(total), &[a], Op::Sum { a })
    }

    pub fn mean(&mut self, a: Node) -> Node {
        let v = self.value(a);
        let mean = v.data.iter().sum::<f64>() / v.numel() as f64;
        self.push_op(Tensor::scalar(mean), &[a], Op::Mean { a })
    }

    /// Stacks equal-length vectors as the columns of a `[C, T]` matrix;
    /// part `t` becomes column `t`.
    pub fn stack_cols(&mut self, parts: &[Node]) -> Result<Node> {
        if parts.is_empty() {
            return Err(shape_err("stack_cols", "no inputs".into()));
        }
        let c = self.value(parts[0]).numel();
        let t = parts.len();
        let mut data = vec![0.0; c * t];
        for (col, &p) in parts.iter().enumerate() {
            let v = self.value(p);
            if v.rank() != 1 || v.numel() != c {
                return Err(shape_err(
                    "stack_cols",
                    format!("part {col} has shape {:?}, want [{c}]", v.shape),
                ));
            }
            for row in 0..c {
                data[row * t + col] = v.data[row];
            }
        }
        let value = Tensor { shape: vec![c, t], data };
        Ok(self.push_op(value, parts, Op::StackCols { parts: parts.to_vec() }))
    }

    /// Normalizes each 4-wide row of `a [N, 4]` to a unit quaternion.
    /// Errors if any row is degenerate or non-finite; a training step
    /// that produced such a head output aborts with that diagnostic.
    pub fn normalize_rows(&mut self, a: Node) -> Result<Node> {
        let v = self.value(a);
        if v.rank() != 2 || v.shape[1] != 4 {
            return Err(shape_err("normalize_rows", format!("need [N, 4], got {:?}", v.shape)));
        }
        let mut data = vec![0.0; v.numel()];
        for row in 0..v.shape[0] {
            let r = &v.data[row * 4..row * 4 + 4];
            let q = quat::normalize([r[0], r[1], r[2], r[3]])?;
            data[row * 4..row * 4 + 4].copy_from_slice(&q.as_array());
        }
        let value = Tensor { shape: v.shape.clone(), data };
        Ok(self.push_op(value, &[a], Op::NormalizeRows { a }))
    }

    /// Forward kinematics as a tape node: unit quaternion rows `[N, 4]`
    /// to local joint positions `[N, 3]`.
    pub fn fk(&mut self, quats: Node, skeleton: Rc<Skeleton>, mode: Composition) -> Result<Node> {
        let v = self.value(quats);
        if v.rank() != 2 || v.shape[1] != 4 || v.shape[0] != skeleton.n_joints() {
            return Err(shape_err(
                "fk",
                format!("need [{}, 4], got {:?}", skeleton.n_joints(), v.shape),
            ));
        }
        let qs = rows_to_quats(&v.data);
        let cache = fk_forward_cached(&skeleton, &qs, mode)?;
        let mut data = Vec::with_capacity(qs.len() * 3);
        for p in &cache.positions {
            data.extend_from_slice(p);
        }
        let value = Tensor { shape: vec![qs.len(), 3], data };
        Ok(self.push_op(value, &[quats], Op::Fk { quats, skeleton, mode, cache }))
    }

    /// Per-joint y-twist angle in degrees: `[N, 4] -> [N]`.
    pub fn twist_y(&mut self, quats: Node) -> Result<Node> {
        let v = self.value(quats);
        if v.rank() != 2 || v.shape[1] != 4 {
            return Err(shape_err("twist_y", format!("need [N, 4], got {:?}", v.shape)));
        }
        let data: Vec<f64> = v
            .data
            .chunks(4)
            .map(|r| quat::twist_angle_y_deg(Quat::new(r[0], r[1], r[2], r[3])))
            .collect();
        let value = Tensor { shape: vec![v.shape[0]], data };
        Ok(self.push_op(value, &[quats], Op::TwistY { quats }))
    }

    // ---- backward ----

    /// Runs the backward pass from a scalar node. Consumes the tape's
    /// single backward budget; a second call is an error.
    pub fn backward(&mut self, from: Node) -> Result<()> {
        if self.consumed {
            return Err(Error::BackwardConsumed);
        }
        self.consumed = true;
        if self.value(from).numel() != 1 {
            return Err(shape_err(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(from).shape),
            ));
        }
        self.nodes[from.0].grad = Some(vec![1.0]);
        for idx in (0..=from.0).rev() {
            if self.nodes[idx].grad.is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let (lo, hi) = self.nodes.split_at_mut(idx);
            let node = &hi[0];
            let g = node.grad.as_ref().expect("checked above");
            step_backward(node, g, lo);
        }
        Ok(())
    }
}

fn rows_to_quats(data: &[f64]) -> Vec<Quat> {
    data.chunks(4)
        .map(|r| Quat::new(r[0], r[1], r[2], r[3]))
        .collect()
}

fn grad_buf<'a>(lo: &'a mut [NodeData], node: Node) -> Option<&'a mut Vec<f64>> {
    let entry = &mut lo[node.0];
    if !entry.needs_grad {
        return None;
    }
    if entry.grad.is_none() {
        entry.grad = Some(vec![0.0; entry.value.numel()]);
    }
    entry.grad.as_mut()
}

/// `out[m,n] += a[m,k] * b[k,n]`
fn matmul_acc(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    for i in 0..m {
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

/// `out[m,k] += g[m,n] * b^T[n,k]` (i.e. dA for A*B)
fn matmul_bt_acc(g: &[f64], m: usize, n: usize, b: &[f64], k: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut acc = 0.0;
            for (gv, bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            out[i * k + kk] += acc;
        }
    }
}

/// `out[k,n] += a^T[k,m] * g[m,n]` (i.e. dB for A*B)
fn matmul_at_acc(a: &[f64], m: usize, k: usize, g: &[f64], n: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += aik * gv;
            }
        }
    }
}

fn step_backward(node: &NodeData, g: &[f64], lo: &mut [NodeData]) {
    match &node.op {
        Op::Leaf => {}
        Op::Matmul { a, b } => {
            let (m, k) = {
                let av = &lo[a.0].value;
                if av.rank() == 1 {
                    (1, av.shape[0])
                } else {
                    (av.shape[0], av.shape[1])
                }
            };
            let n = lo[b.0].value.shape[1];
            if lo[a.0].needs_grad {
                let bdata = lo[b.0].value.data.clone();
                if let Some(da) = grad_buf(lo, *a) {
                    matmul_bt_acc(g, m, n, &bdata, k, da);
                }
            }
            if lo[b.0].needs_grad {
                let adata = lo[a.0].value.data.clone();
                if let Some(db) = grad_buf(lo, *b) {
                    matmul_at_acc(&adata, m, k, g, n, db);
                }
            }
        }
        Op::Add { a, b } => {
            for p in [a, b] {
                if let Some(dp) = grad_buf(lo, *p) {
                    for (d, gv) in dp.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
        }
        Op::AddBias { a, b } => {
            if let Some(da) = grad_buf(lo, *a) {
                for (d, gv) in da.iter_mut().zip(g) {
                    *d += gv;
                }
            }
            if let Some(db) = grad_buf(lo, *b) {
                let n = db.len();
                for (idx, gv) in g.iter().enumerate() {
                    db[idx % n] += gv;
                }
            }
        }
        Op::Sub { a, b } => {
            if let Some(da) = grad_buf(lo, *a) {
                for (d, gv) in da.iter_mut().zip(g) {
                    *d += gv;
                }
            }
            if let Some(db) = grad_buf(lo, *b) {
                for (d, gv) in db.iter_mut().zip(g) {
                    *d -= gv;
                }
            }
        }
        Op::Mul { a, b } => {
            if lo[a.0].needs_grad {
                let bdata = lo[b.0].value.data.clone();
                if let Some(da) = grad_buf(lo, *a) {
                    for ((d, gv), bv) in da.iter_mut().zip(g).zip(&bdata) {
                        *d += gv * bv;
                    }
                }
            }
            if lo[b.0].needs_grad {
                let adata = lo[a.0].value.data.clone();
                if let Some(db) = grad_buf(lo, *b) {
                    for ((d, gv), av) in db.iter_mut().zip(g).zip(&adata) {
                        *d += gv * av;
                    }
                }
            }
        }
        Op::MulChan { x, g: gain } => {
            let l = lo[x.0].value.shape[1];
            if lo[x.0].needs_grad {
                let gdata = lo[gain.0].value.data.clone();
                if let Some(dx) = grad_buf(lo, *x) {
                    for (idx, gv) in g.iter().enumerate() {
                        dx[idx] += gv * gdata[idx / l];
                    }
                }
            }
            if lo[gain.0].needs_grad {
                let xdata = lo[x.0].value.data.clone();
                if let Some(dg) = grad_buf(lo, *gain) {
                    for (idx, gv) in g.iter().enumerate() {
                        dg[idx / l] += gv * xdata[idx];
                    }
                }
            }
        }
        Op::AddChan { x, b } => {
            let l = lo[x.0].value.shape[1];
            if let Some(dx) = grad_buf(lo, *x) {
                for (d, gv) in dx.iter_mut().zip(g) {
                    *d += gv;
                }
            }
            if let Some(db) = grad_buf(lo, *b) {
                for (idx, gv) in g.iter().enumerate() {
                    db[idx / l] += gv;
                }
            }
        }
        Op::Scale { a, c } => {
            if let Some(da) = grad_buf(lo, *a) {
                for (d, gv) in da.iter_mut().zip(g) {
                    *d += gv * c;
                }
            }
        }
        Op::AddScalar { a } => {
            if let Some(da) = grad_buf(lo, *a) {
                for (d, gv) in da.iter_mut().zip(g) {
                    *d += gv;
                }
            }
        }
        Op::Concat { parts } => {
            let mut offset = 0;
            for p in parts {
                let numel = lo[p.0].value.numel();
                if let Some(dp) = grad_buf(lo, *p) {
                    for (d, gv) in dp.iter_mut().zip(&g[offset..offset + numel]) {
                        *d += gv;
                    }
                }
                offset += numel;
            }
        }
        Op::SliceRows { a, start } => {
            let width = if lo[a.0].value.rank() == 1 {
                1
            } else {
                lo[a.0].value.shape[1]
            };
            if let Some(da) = grad_buf(lo, *a) {
                for (idx, gv) in g.iter().enumerate() {
                    da[start * width + idx] += gv;
                }
            }
        }
        Op::Reshape { a } => {
            if let Some(da) = grad_buf(lo, *a) {
                for (d, gv) in da.iter_mut().zip(g) {
                    *d += gv;
                }
            }
        }
        Op::Tanh { a } => {
            let y = node.value.data.clone();
            if let Some(da) = grad_buf(lo, *a) {
                for ((d, gv), yv) in da.iter_mut().zip(g).zip(&y) {
                    *d += gv * (1.0 - yv * yv);
                }
            }
        }
        Op::Sigmoid { a } => {
            let y = node.value.data.clone();
            if let Some(da) = grad_buf(lo, *a) {
                for ((d, gv), yv) in da.iter_mut().zip(g).zip(&y) {
                    *d += gv * yv * (1.0 - yv);
                }
            }
        }
        Op::LeakyRelu { a, slope } => {
            let xdata = lo[a.0].value.data.clone();
            if let Some(da) = grad_buf(lo, *a) {
                for ((d, gv), xv) in da.iter_mut().zip(g).zip(&xdata) {
                    *d += gv * if *xv > 0.0 { 1.0 } else { *slope };
                }
            }
        }
        Op::Relu { a } => {
            let xdata = lo[a.0].value.data.clone();
            if let Some(da) = grad_buf(lo, *a) {
                for ((d, gv), xv) in da.iter_mut().zip(g).zip(&xdata) {
                    *d += gv * if *xv > 0.0 { 1.0 } else { 0.0 };
                }
            }
        }
        Op::Abs { a } => {
            let xdata = lo[a.0].value.data.clone();
            if let Some(da) = grad_buf(lo, *a) {
                for ((d, gv), xv) in da.iter_mut().zip(g).zip(&xdata) {
                    *d += gv * xv.signum();
                }
            }
        }
        Op::Square { a } => {
            let xdata = lo[a.0].value.data.clone();
            if let Some(da) = grad_buf(lo, *a) {
                for ((d, gv), xv) in da.iter_mut().zip(g).zip(&xdata) {
                    *d += gv * 2.0 * xv;
                }
            }
        }
        Op::Sqrt { a } => {
            let y = node.value.data.clone();
            if let Some(da) = grad_buf(lo, *a) {
                for ((d, gv), yv) in da.iter_mut().zip(g).zip(&y) {
                    *d += gv * 0.5 / yv;
                }
            }
        }
        Op::Ln { a } => {
            let xdata = lo[a.0].value.data.clone();
            if let Some(da) = grad_buf(lo, *a) {
                for ((d, gv), xv) in da.iter_mut().zip(g).zip(&xdata) {
                    *d += gv / xv;
                }
            }
        }
        Op::Clamp { a, lo: low, hi } => {
            let xdata = lo[a.0].value.data.clone();
            if let Some(da) = grad_buf(lo, *a) {
                for ((d, gv), xv) in da.iter_mut().zip(g).zip(&xdata) {
                    if *xv > *low && *xv < *hi {
                        *d += gv;
                    }
                }
            }
        }
        Op::Dropout { a, mask } => {
            if let Some(da) = grad_buf(lo, *a) {
                for ((d, gv), m) in da.iter_mut().zip(g).zip(mask) {
                    *d += gv * m;
                }
            }
        }
        Op::InstanceNorm1d { a, normalized, inv_std } => {
            let l = node.value.shape[1];
            if let Some(da) = grad_buf(lo, *a) {
                for (ch, inv) in inv_std.iter().enumerate() {
                    let gr = &g[ch * l..(ch + 1) * l];
                    let yr = &normalized[ch * l..(ch + 1) * l];
                    let g_mean = gr.iter().sum::<f64>() / l as f64;
                    let gy_mean = gr.iter().zip(yr).map(|(gv, yv)| gv * yv).sum::<f64>() / l as f64;
                    for idx in 0..l {
                        da[ch * l + idx] += inv * (gr[idx] - g_mean - yr[idx] * gy_mean);
                    }
                }
            }
        }
        Op::Conv1d { x, w, b, stride, pad_left } => {
            let (cin, l) = (lo[x.0].value.shape[0], lo[x.0].value.shape[1]);
            let (cout, k) = (lo[w.0].value.shape[0], lo[w.0].value.shape[2]);
            let lout = node.value.shape[1];
            let xdata = lo[x.0].value.data.clone();
            let wdata = lo[w.0].value.data.clone();
            if lo[x.0].needs_grad {
                if let Some(dx) = grad_buf(lo, *x) {
                    for co in 0..cout {
                        for t in 0..lout {
                            let gv = g[co * lout + t];
                            if gv == 0.0 {
                                continue;
                            }
                            let start = (t * stride) as isize - *pad_left as isize;
                            for ci in 0..cin {
                                for kk in 0..k {
                                    let idx = start + kk as isize;
                                    if idx >= 0 && (idx as usize) < l {
                                        dx[ci * l + idx as usize] +=
                                            gv * wdata[(co * cin + ci) * k + kk];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if lo[w.0].needs_grad {
                if let Some(dw) = grad_buf(lo, *w) {
                    for co in 0..cout {
                        for t in 0..lout {
                            let gv = g[co * lout + t];
                            if gv == 0.0 {
                                continue;
                            }
                            let start = (t * stride) as isize - *pad_left as isize;
                            for ci in 0..cin {
                                for kk in 0..k {
                                    let idx = start + kk as isize;
                                    if idx >= 0 && (idx as usize) < l {
                                        dw[(co * cin + ci) * k + kk] +=
                                            gv * xdata[ci * l + idx as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if let Some(db) = grad_buf(lo, *b) {
                for co in 0..cout {
                    for t in 0..lout {
                        db[co] += g[co * lout + t];
                    }
                }
            }
        }
        Op::Sum { a } => {
            if let Some(da) = grad_buf(lo, *a) {
                for d in da.iter_mut() {
                    *d += g[0];
                }
            }
        }
        Op::Mean { a } => {
            let n = lo[a.0].value.numel() as f64;
            if let Some(da) = grad_buf(lo, *a) {
                for d in da.iter_mut() {
                    *d += g[0] / n;
                }
            }
        }
        Op::StackCols { parts } => {
            let t = parts.len();
            for (col, p) in parts.iter().enumerate() {
                if let Some(dp) = grad_buf(lo, *p) {
                    let c = dp.len();
                    for row in 0..c {
                        dp[row] += g[row * t + col];
                    }
                }
            }
        }
        Op::NormalizeRows { a } => {
            let xdata = lo[a.0].value.data.clone();
            if let Some(da) = grad_buf(lo, *a) {
                for (row, chunk) in xdata.chunks(4).enumerate() {
                    let upstream = [
                        g[row * 4],
                        g[row * 4 + 1],
                        g[row * 4 + 2],
                        g[row * 4 + 3],
                    ];
                    let dv = quat::normalize_grad(
                        [chunk[0], chunk[1], chunk[2], chunk[3]],
                        upstream,
                    );
                    for c in 0..4 {
                        da[row * 4 + c] += dv[c];
                    }
                }
            }
        }
        Op::Fk { quats, skeleton, mode, cache } => {
            let qs = rows_to_quats(&lo[quats.0].value.data);
            let d_positions: Vec<[f64; 3]> = g.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
            let dq = fk_backward(skeleton, &qs, cache, &d_positions, *mode);
            if let Some(da) = grad_buf(lo, *quats) {
                for (row, grad4) in dq.iter().enumerate() {
                    for c in 0..4 {
                        da[row * 4 + c] += grad4[c];
                    }
                }
            }
        }
        Op::TwistY { quats } => {
            let xdata = lo[quats.0].value.data.clone();
            if let Some(da) = grad_buf(lo, *quats) {
                for (row, chunk) in xdata.chunks(4).enumerate() {
                    let dq = quat::twist_angle_y_grad(Quat::new(chunk[0], chunk[1], chunk[2], chunk[3]));
                    for c in 0..4 {
                        da[row * 4 + c] += g[row] * dq[c];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff, max_rel_err, FD_STEP};
    use crate::kinematics::Skeleton;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Builds the op under test on a fresh tape. Inputs arrive as leaves
    /// with gradients enabled.
    type Build = dyn Fn(&mut Tape, &[Node]) -> Node;

    /// Finite-difference check of one op: a random linear functional of
    /// the output is differentiated with respect to every input element.
    fn check_op(seed: u64, shapes: &[&[usize]], ranges: &[(f64, f64)], build: &Build, tol: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor> = shapes
            .iter()
            .zip(ranges)
            .map(|(shape, (lo, hi))| {
                let numel = shape.iter().product();
                let data = (0..numel).map(|_| rng.gen_range(*lo..*hi)).collect();
                Tensor::from_vec(shape, data).unwrap()
            })
            .collect();
        let upstream: Vec<f64> = {
            // One probe evaluation to learn the output size.
            let mut tape = Tape::new();
            let nodes: Vec<Node> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
            let out = build(&mut tape, &nodes);
            let n = tape.value(out).numel();
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        let eval = |flat: &[f64]| -> (f64, Vec<f64>) {
            let mut tape = Tape::new();
            let mut offset = 0;
            let mut nodes = Vec::new();
            for t in &inputs {
                let mut leaf = t.clone();
                leaf.data.copy_from_slice(&flat[offset..offset + t.numel()]);
                offset += t.numel();
                nodes.push(tape.leaf(leaf, true));
            }
            let out = build(&mut tape, &nodes);
            let shape = tape.value(out).shape.clone();
            let u = tape.constant(Tensor { shape, data: upstream.clone() });
            let prod = tape.mul(out, u).unwrap();
            let loss = tape.sum(prod);
            let value = tape.value(loss).data[0];
            tape.backward(loss).unwrap();
            let grads = nodes
                .iter()
                .map(|n| tape.grad_tensor(*n).data)
                .collect::<Vec<_>>()
                .concat();
            (value, grads)
        };
        let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data.clone()).collect();
        let (_, analytic) = eval(&flat);
        let numeric = finite_diff(|x| eval(x).0, &flat, FD_STEP);
        let err = max_rel_err(&analytic, &numeric, 1e-5);
        assert!(err < tol, "op gradcheck failed: rel err {err:e}\nanalytic {analytic:?}\nnumeric {numeric:?}");
    }

    #[test]
    fn matmul_grads() {
        check_op(1, &[&[3, 4], &[4, 2]], &[(-1.0, 1.0), (-1.0, 1.0)],
            &|t, n| t.matmul(n[0], n[1]).unwrap(), 1e-5);
        check_op(2, &[&[4], &[4, 3]], &[(-1.0, 1.0), (-1.0, 1.0)],
            &|t, n| t.matmul(n[0], n[1]).unwrap(), 1e-5);
    }

    #[test]
    fn elementwise_grads() {
        check_op(3, &[&[2, 3], &[2, 3]], &[(-1.0, 1.0), (-1.0, 1.0)],
            &|t, n| t.add(n[0], n[1]).unwrap(), 1e-5);
        check_op(4, &[&[2, 3], &[2, 3]], &[(-1.0, 1.0), (-1.0, 1.0)],
            &|t, n| t.sub(n[0], n[1]).unwrap(), 1e-5);
        check_op(5, &[&[2, 3], &[2, 3]], &[(-1.0, 1.0), (-1.0, 1.0)],
            &|t, n| t.mul(n[0], n[1]).unwrap(), 1e-5);
        check_op(6, &[&[3, 4], &[4]], &[(-1.0, 1.0), (-1.0, 1.0)],
            &|t, n| t.add_bias(n[0], n[1]).unwrap(), 1e-5);
        check_op(7, &[&[3, 5], &[3]], &[(-1.0, 1.0), (0.2, 1.5)],
            &|t, n| t.mul_chan(n[0], n[1]).unwrap(), 1e-5);
        check_op(8, &[&[3, 5], &[3]], &[(-1.0, 1.0), (-1.0, 1.0)],
            &|t, n| t.add_chan(n[0], n[1]).unwrap(), 1e-5);
        check_op(9, &[&[7]], &[(-1.0, 1.0)], &|t, n| t.scale(n[0], -2.5), 1e-5);
        check_op(10, &[&[7]], &[(-1.0, 1.0)], &|t, n| t.add_scalar(n[0], 3.0), 1e-5);
    }

    #[test]
    fn shape_op_grads() {
        check_op(11, &[&[2], &[3], &[4]], &[(-1.0, 1.0); 3],
            &|t, n| t.concat(n).unwrap(), 1e-5);
        check_op(12, &[&[2, 3], &[1, 3]], &[(-1.0, 1.0); 2],
            &|t, n| t.concat(n).unwrap(), 1e-5);
        check_op(13, &[&[6]], &[(-1.0, 1.0)],
            &|t, n| t.slice_rows(n[0], 1, 3).unwrap(), 1e-5);
        check_op(14, &[&[4, 3]], &[(-1.0, 1.0)],
            &|t, n| t.slice_rows(n[0], 1, 2).unwrap(), 1e-5);
        check_op(15, &[&[2, 6]], &[(-1.0, 1.0)],
            &|t, n| t.reshape(n[0], &[3, 4]).unwrap(), 1e-5);
        check_op(16, &[&[4], &[4], &[4]], &[(-1.0, 1.0); 3],
            &|t, n| t.stack_cols(n).unwrap(), 1e-5);
    }

    #[test]
    fn nonlinearity_grads() {
        check_op(17, &[&[9]], &[(-2.0, 2.0)], &|t, n| t.tanh(n[0]), 1e-5);
        check_op(18, &[&[9]], &[(-2.0, 2.0)], &|t, n| t.sigmoid(n[0]), 1e-5);
        // Keep samples away from the kink at zero.
        check_op(19, &[&[9]], &[(0.1, 2.0)], &|t, n| t.leaky_relu(n[0], 0.2), 1e-5);
        check_op(20, &[&[9]], &[(-2.0, -0.1)], &|t, n| t.leaky_relu(n[0], 0.2), 1e-5);
        check_op(21, &[&[9]], &[(0.1, 2.0)], &|t, n| t.relu(n[0]), 1e-5);
        check_op(22, &[&[9]], &[(-2.0, -0.1)], &|t, n| t.relu(n[0]), 1e-5);
        check_op(23, &[&[9]], &[(0.1, 2.0)], &|t, n| t.abs(n[0]), 1e-5);
        check_op(24, &[&[9]], &[(-2.0, 2.0)], &|t, n| t.square(n[0]), 1e-5);
        check_op(25, &[&[9]], &[(0.1, 2.0)], &|t, n| t.sqrt(n[0]), 1e-5);
        check_op(26, &[&[9]], &[(0.1, 3.0)], &|t, n| t.ln(n[0]), 1e-5);
        // Interior of the clamp window passes gradient unchanged...
        check_op(27, &[&[9]], &[(-0.9, 0.9)], &|t, n| t.clamp(n[0], -1.0, 1.0), 1e-5);
        // ...outside it the gradient is zero.
        check_op(28, &[&[9]], &[(1.1, 2.0)], &|t, n| t.clamp(n[0], -1.0, 1.0), 1e-5);
    }

    #[test]
    fn dropout_grads_and_statistics() {
        // Same internal seed on every evaluation keeps the mask fixed, so
        // finite differences see a deterministic function.
        check_op(29, &[&[40]], &[(-1.0, 1.0)], &|t, n| {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            t.dropout(n[0], 0.7, &mut rng)
        }, 1e-5);

        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(&[10_000], vec![1.0; 10_000]).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let y = tape.dropout(x, 0.7, &mut rng);
        let kept = tape.value(y).data.iter().filter(|v| **v != 0.0).count();
        assert!((kept as f64 / 10_000.0 - 0.7).abs() < 0.02);
        // Survivors are scaled by 1/keep.
        let survivor = tape.value(y).data.iter().find(|v| **v != 0.0).unwrap();
        assert!((survivor - 1.0 / 0.7).abs() < 1e-12);

        // Identical seeds produce identical masks.
        let mut t2 = Tape::new();
        let x2 = t2.constant(Tensor::from_vec(&[10_000], vec![1.0; 10_000]).unwrap());
        let mut rng2 = ChaCha8Rng::seed_from_u64(40);
        let y2 = t2.dropout(x2, 0.7, &mut rng2);
        assert_eq!(tape.value(y).data, t2.value(y2).data);
    }

    #[test]
    fn instance_norm_grads_and_moments() {
        check_op(30, &[&[3, 7]], &[(-2.0, 2.0)],
            &|t, n| t.instance_norm_1d(n[0], 1e-6).unwrap(), 1e-4);

        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let data: Vec<f64> = (0..4 * 16).map(|_| rng.gen_range(-3.0..5.0)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(&[4, 16], data).unwrap());
        let y = tape.instance_norm_1d(x, 1e-6).unwrap();
        for ch in 0..4 {
            let row = &tape.value(y).data[ch * 16..(ch + 1) * 16];
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-5, "channel mean {mean}");
            assert!((var - 1.0).abs() < 1e-5, "channel var {var}");
        }
    }

    #[test]
    fn conv1d_grads() {
        check_op(31, &[&[3, 8], &[2, 3, 4], &[2]], &[(-1.0, 1.0); 3],
            &|t, n| t.conv1d(n[0], n[1], n[2], 2, Padding::Same).unwrap(), 1e-5);
        check_op(32, &[&[2, 6], &[1, 2, 4], &[1]], &[(-1.0, 1.0); 3],
            &|t, n| t.conv1d(n[0], n[1], n[2], 1, Padding::Valid).unwrap(), 1e-5);
        check_op(33, &[&[2, 9], &[2, 2, 4], &[2]], &[(-1.0, 1.0); 3],
            &|t, n| t.conv1d(n[0], n[1], n[2], 2, Padding::Valid).unwrap(), 1e-5);
    }

    #[test]
    fn conv1d_known_values_and_lengths() {
        // x = [1,2,3], w = [1,1], valid stride 1: sliding sums.
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let w = tape.constant(Tensor::from_vec(&[1, 1, 2], vec![1.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::from_vec(&[1], vec![0.0]).unwrap());
        let y = tape.conv1d(x, w, b, 1, Padding::Valid).unwrap();
        assert_eq!(tape.value(y).data, vec![3.0, 5.0]);

        // Stride-2 same padding halves lengths, rounding up: the
        // discriminator pyramid 60 -> 30 -> 15 -> 8 -> 4, then a valid
        // kernel-4 conv collapses to 1.
        let mut lens = vec![60usize];
        let mut cur = 60usize;
        for _ in 0..4 {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::zeros(&[1, cur]));
            let w = tape.constant(Tensor::zeros(&[1, 1, 4]));
            let b = tape.constant(Tensor::zeros(&[1]));
            let y = tape.conv1d(x, w, b, 2, Padding::Same).unwrap();
            cur = tape.value(y).shape[1];
            lens.push(cur);
        }
        assert_eq!(lens, vec![60, 30, 15, 8, 4]);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 4]));
        let w = tape.constant(Tensor::zeros(&[1, 1, 4]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv1d(x, w, b, 1, Padding::Valid).unwrap();
        assert_eq!(tape.value(y).shape, vec![1, 1]);
    }

    #[test]
    fn reduction_grads() {
        check_op(34, &[&[3, 4]], &[(-1.0, 1.0)], &|t, n| t.sum(n[0]), 1e-5);
        check_op(35, &[&[3, 4]], &[(-1.0, 1.0)], &|t, n| t.mean(n[0]), 1e-5);
    }

    #[test]
    fn quaternion_op_grads() {
        // Rows bounded away from zero norm: scalar component >= 0.5.
        check_op(36, &[&[3, 4]], &[(0.5, 1.2)],
            &|t, n| t.normalize_rows(n[0]).unwrap(), 1e-4);
        // Twist stays away from gimbal lock for these magnitudes.
        check_op(37, &[&[3, 4]], &[(-0.3, 0.3)], &|t, n| {
            let q = t.normalize_rows(n[0]).unwrap();
            t.twist_y(q).unwrap()
        }, 1e-4);
    }

    #[test]
    fn fk_op_grads() {
        let skel = Rc::new(
            Skeleton::new(
                "chain4",
                vec![
                    ("r".into(), None),
                    ("a".into(), Some(0)),
                    ("b".into(), Some(1)),
                    ("c".into(), Some(1)),
                ],
                vec![
                    [0.0, 0.0, 0.0],
                    [0.3, 1.0, 0.0],
                    [0.0, 2.0, 0.4],
                    [-0.8, 1.2, 0.0],
                ],
            )
            .unwrap(),
        );
        for mode in [Composition::Hierarchical, Composition::PerJointWorld] {
            let s = Rc::clone(&skel);
            check_op(38, &[&[4, 4]], &[(0.4, 1.0)], &move |t, n| {
                let q = t.normalize_rows(n[0]).unwrap();
                t.fk(q, Rc::clone(&s), mode).unwrap()
            }, 1e-4);
        }
    }

    #[test]
    fn backward_can_run_only_once_and_needs_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap(), true);
        let y = tape.square(x);
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::BackwardConsumed)));

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap(), true);
        let y = tape.square(x);
        assert!(matches!(tape.backward(y), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn matmul_error_mentions_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 5]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap(), true);
        let c = tape.constant(Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap());
        let y = tape.mul(x, c).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0, 4.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn gradients_accumulate_across_reuse() {
        // f = sum(x * x) via two separate uses of the same leaf.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2], vec![3.0, -2.0]).unwrap(), true);
        let y = tape.mul(x, x).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0, -4.0]);
    }
}
