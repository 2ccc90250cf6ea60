//! Append-only computation graph with eager forward evaluation.
//!
//! Every builder method validates shapes, computes the forward value
//! immediately, and records the operation so a later [`Graph::gradient`] pass
//! can replay the chain rule. Gradient passes append ordinary catalog nodes,
//! which is what makes second-order derivatives (gradients of gradients)
//! possible.

use super::kernels::eval_op;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Operator catalog. `Step` (the relu derivative), `ConvDx` and `ConvDk` (the
/// convolution adjoints) are the closure of the catalog under
/// differentiation: they appear in gradient expressions so that those
/// expressions can be differentiated again.
#[derive(Clone, Debug)]
pub(crate) enum Op {
    Input(String),
    Const,
    Add,
    Sub,
    Mul,
    Div,
    Matmul,
    Conv1d { stride: usize },
    ConvDx { stride: usize, input_len: usize },
    ConvDk { stride: usize, window: usize },
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Relu,
    Step,
    Pow { exponent: f64 },
    Sum { axis: Option<usize> },
    Mean { axis: Option<usize> },
    Max { axis: Option<usize> },
    Softmax,
    LogSumExp { axis: Option<usize> },
    Concat { axis: usize },
    Slice { axis: usize, start: usize, stop: usize },
    Transpose,
    Broadcast { shape: Vec<usize> },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Const => "const",
            Op::Add => "add",
            Op::Sub => "subtract",
            Op::Mul => "multiply",
            Op::Div => "divide",
            Op::Matmul => "matmul",
            Op::Conv1d { .. } => "conv1d",
            Op::ConvDx { .. } => "conv1d_dx",
            Op::ConvDk { .. } => "conv1d_dk",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Relu => "relu",
            Op::Step => "step",
            Op::Pow { .. } => "power",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Max { .. } => "max",
            Op::Softmax => "softmax",
            Op::LogSumExp { .. } => "logsumexp",
            Op::Concat { .. } => "concatenate",
            Op::Slice { .. } => "slice",
            Op::Transpose => "transpose",
            Op::Broadcast { .. } => "broadcast",
        }
    }
}

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) inputs: Vec<Var>,
    pub(crate) value: Tensor,
}

/// Single-writer computation graph. Construction and evaluation are eager;
/// node order is topological by construction.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op, inputs: Vec<Var>, value: Tensor) -> Var {
        debug_assert!(
            value.all_finite() || matches!(op, Op::Input(_) | Op::Const),
            "non-finite result from `{}`",
            op.name()
        );
        self.nodes.push(Node { op, inputs, value });
        Var(self.nodes.len() - 1)
    }

    fn apply(&mut self, op: Op, inputs: Vec<Var>) -> Result<Var> {
        let tensors: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let value = eval_op(&op, &tensors)?;
        Ok(self.push(op, inputs, value))
    }

    // ---- leaves ----------------------------------------------------------

    /// Named differentiable leaf. Names are the handle used by
    /// [`Graph::evaluate`] to substitute fresh values.
    pub fn input(&mut self, name: &str, value: Tensor) -> Var {
        self.push(Op::Input(name.to_string()), vec![], value)
    }

    /// Non-differentiable leaf: gradients never flow into constants.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Const, vec![], value)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Var {
        self.constant(Tensor::zeros(shape))
    }

    // ---- elementwise binary ---------------------------------------------

    fn binary(&mut self, op: Op, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.align(op.name(), a, b)?;
        self.apply(op, vec![a, b])
    }

    /// Insert broadcast nodes so both operands share a shape.
    fn align(&mut self, op: &'static str, a: Var, b: Var) -> Result<(Var, Var)> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa == sb {
            return Ok((a, b));
        }
        let target = broadcast_target(op, &sa, &sb)?;
        let a = if sa == target { a } else { self.broadcast(a, &target)? };
        let b = if sb == target { b } else { self.broadcast(b, &target)? };
        Ok((a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Div, a, b)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        let minus_one = self.scalar(-1.0);
        self.mul(x, minus_one)
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = self.scalar(c);
        self.mul(x, c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = self.scalar(c);
        self.add(x, c)
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("incompatible shapes {sa:?} x {sb:?}")));
        }
        self.apply(Op::Matmul, vec![a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(Error::shape("transpose", format!("need rank 2, got {:?}", self.shape(x))));
        }
        self.apply(Op::Transpose, vec![x])
    }

    /// Valid cross-correlation of `x: [T, Ci]` with kernel `k: [Co, Ci, W]`.
    pub fn conv1d(&mut self, x: Var, k: Var, stride: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x), self.shape(k));
        if sx.len() != 2 || sk.len() != 3 || sx[1] != sk[1] {
            return Err(Error::shape("conv1d", format!("incompatible shapes {sx:?} * {sk:?}")));
        }
        if stride == 0 {
            return Err(Error::Contract("conv1d stride must be positive".into()));
        }
        if sx[0] < sk[2] {
            return Err(Error::shape(
                "conv1d",
                format!("input length {} shorter than window {}", sx[0], sk[2]),
            ));
        }
        self.apply(Op::Conv1d { stride }, vec![x, k])
    }

    pub(crate) fn conv_dx(&mut self, g: Var, k: Var, stride: usize, input_len: usize) -> Result<Var> {
        self.apply(Op::ConvDx { stride, input_len }, vec![g, k])
    }

    pub(crate) fn conv_dk(&mut self, x: Var, g: Var, stride: usize, window: usize) -> Result<Var> {
        self.apply(Op::ConvDk { stride, window }, vec![x, g])
    }

    // ---- elementwise unary -------------------------------------------------

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Exp, vec![x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Log, vec![x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Tanh, vec![x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Sigmoid, vec![x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Relu, vec![x])
    }

    /// Heaviside step with `step(0) = 0`; the derivative of relu. Gradients do
    /// not flow through it (its own derivative is taken as 0 everywhere).
    pub fn step(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Step, vec![x])
    }

    pub fn pow(&mut self, x: Var, exponent: f64) -> Result<Var> {
        self.apply(Op::Pow { exponent }, vec![x])
    }

    // ---- reductions --------------------------------------------------------

    fn reduction(&mut self, op: Op, x: Var, axis: Option<usize>) -> Result<Var> {
        if let Some(ax) = axis {
            if ax >= self.shape(x).len() {
                return Err(Error::shape(
                    op.name(),
                    format!("axis {ax} out of range for shape {:?}", self.shape(x)),
                ));
            }
        }
        self.apply(op, vec![x])
    }

    /// Sum over one axis (keeping it as size 1) or over all elements (`None`,
    /// producing a scalar). The same convention applies to `mean`, `max` and
    /// `logsumexp`.
    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduction(Op::Sum { axis }, x, axis)
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduction(Op::Mean { axis }, x, axis)
    }

    pub fn max(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduction(Op::Max { axis }, x, axis)
    }

    pub fn logsumexp(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduction(Op::LogSumExp { axis }, x, axis)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).is_empty() {
            return Err(Error::shape("softmax", "rank must be at least 1".into()));
        }
        self.apply(Op::Softmax, vec![x])
    }

    // ---- structure ----------------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concatenate", "no inputs".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concatenate", format!("axis {axis} out of range")));
        }
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape(
                    "concatenate",
                    format!("shape {s:?} incompatible with {first:?} along axis {axis}"),
                ));
            }
        }
        self.apply(Op::Concat { axis }, parts.to_vec())
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, stop: usize) -> Result<Var> {
        let s = self.shape(x);
        if axis >= s.len() || start >= stop || stop > s[axis] {
            return Err(Error::shape(
                "slice",
                format!("range {start}..{stop} on axis {axis} of shape {s:?}"),
            ));
        }
        self.apply(Op::Slice { axis, start, stop }, vec![x])
    }

    pub fn broadcast(&mut self, x: Var, target: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s != target {
            let ok = s.is_empty()
                || (s.len() == target.len()
                    && s.iter().zip(target).all(|(&a, &b)| a == b || a == 1));
            if !ok {
                return Err(Error::shape(
                    "broadcast",
                    format!("cannot broadcast {s:?} to {target:?}"),
                ));
            }
        }
        self.apply(Op::Broadcast { shape: target.to_vec() }, vec![x])
    }

    // ---- compositions -------------------------------------------------------

    /// Numerically stable `log(exp(a) + exp(b))`, elementwise.
    pub fn logaddexp(&mut self, a: Var, b: Var) -> Result<Var> {
        // max(a, b) = b + relu(a - b), stable for large negative sentinels
        let d = self.sub(a, b)?;
        let r = self.relu(d)?;
        let m = self.add(b, r)?;
        let ea = self.sub(a, m)?;
        let ea = self.exp(ea)?;
        let eb = self.sub(b, m)?;
        let eb = self.exp(eb)?;
        let s = self.add(ea, eb)?;
        let l = self.log(s)?;
        self.add(m, l)
    }

    /// `x - logsumexp(x)` along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        if rank == 0 {
            return Err(Error::shape("logsumexp", "rank must be at least 1".into()));
        }
        let lse = self.logsumexp(x, Some(rank - 1))?;
        self.sub(x, lse)
    }

    // ---- re-evaluation --------------------------------------------------------

    /// Substitute named input values and recompute every node in order.
    /// Inputs not mentioned keep their previous values. Deterministic:
    /// identical substitutions give bit-identical node values.
    pub fn evaluate(&mut self, inputs: &[(&str, Tensor)], outputs: &[Var]) -> Result<Vec<Tensor>> {
        for i in 0..self.nodes.len() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            match &node.op {
                Op::Input(name) => {
                    if let Some((_, t)) = inputs.iter().find(|(n, _)| n == name) {
                        if t.shape() != node.value.shape() {
                            return Err(Error::shape(
                                "evaluate",
                                format!(
                                    "input `{name}` has shape {:?}, expected {:?}",
                                    t.shape(),
                                    node.value.shape()
                                ),
                            ));
                        }
                        node.value = t.clone();
                    }
                }
                Op::Const => {}
                op => {
                    let tensors: Vec<&Tensor> =
                        node.inputs.iter().map(|v| &before[v.0].value).collect();
                    node.value = eval_op(op, &tensors)?;
                }
            }
        }
        Ok(outputs.iter().map(|&v| self.value(v).clone()).collect())
    }
}

fn broadcast_target(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.is_empty() {
        return Ok(b.to_vec());
    }
    if b.is_empty() {
        return Ok(a.to_vec());
    }
    if a.len() != b.len() {
        return Err(Error::shape(op, format!("rank mismatch {a:?} vs {b:?}")));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            if x == y || x == 1 || y == 1 {
                Ok(x.max(y))
            } else {
                Err(Error::shape(op, format!("incompatible shapes {a:?} vs {b:?}")))
            }
        })
        .collect()
}
