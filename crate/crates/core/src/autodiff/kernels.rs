//! Forward evaluation kernels for the operator catalog.
//!
//! Shape validation happens in the graph builders; kernels only enforce
//! numeric-domain constraints (log positivity, division by zero, fractional
//! powers of negatives) because those depend on runtime values.

use super::graph::Op;
use super::tensor::{strides_of, Tensor};
use crate::error::{Error, Result};

pub(super) fn eval_op(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    match op {
        Op::Input(_) | Op::Const => unreachable!("leaves are never re-evaluated"),
        Op::Add => elementwise_binary(inputs[0], inputs[1], |a, b| a + b),
        Op::Sub => elementwise_binary(inputs[0], inputs[1], |a, b| a - b),
        Op::Mul => elementwise_binary(inputs[0], inputs[1], |a, b| a * b),
        Op::Div => {
            if inputs[1].data().iter().any(|&b| b == 0.0) {
                return Err(Error::domain("divide", "division by zero"));
            }
            elementwise_binary(inputs[0], inputs[1], |a, b| a / b)
        }
        Op::Matmul => matmul(inputs[0], inputs[1]),
        Op::Conv1d { stride } => conv1d(inputs[0], inputs[1], *stride),
        Op::ConvDx { stride, input_len } => conv_dx(inputs[0], inputs[1], *stride, *input_len),
        Op::ConvDk { stride, window } => conv_dk(inputs[0], inputs[1], *stride, *window),
        Op::Exp => elementwise_unary(inputs[0], f64::exp),
        Op::Log => {
            if inputs[0].data().iter().any(|&x| x <= 0.0) {
                return Err(Error::domain("log", "argument must be positive"));
            }
            elementwise_unary(inputs[0], f64::ln)
        }
        Op::Tanh => elementwise_unary(inputs[0], f64::tanh),
        Op::Sigmoid => elementwise_unary(inputs[0], sigmoid),
        Op::Relu => elementwise_unary(inputs[0], |x| if x > 0.0 { x } else { 0.0 }),
        Op::Step => elementwise_unary(inputs[0], |x| if x > 0.0 { 1.0 } else { 0.0 }),
        Op::Pow { exponent } => pow(inputs[0], *exponent),
        Op::Sum { axis } => reduce(inputs[0], *axis, ReduceKind::Sum),
        Op::Mean { axis } => reduce(inputs[0], *axis, ReduceKind::Mean),
        Op::Max { axis } => reduce(inputs[0], *axis, ReduceKind::Max),
        Op::Softmax => softmax(inputs[0]),
        Op::LogSumExp { axis } => reduce(inputs[0], *axis, ReduceKind::LogSumExp),
        Op::Concat { axis } => concat(inputs, *axis),
        Op::Slice { axis, start, stop } => slice(inputs[0], *axis, *start, *stop),
        Op::Transpose => transpose(inputs[0]),
        Op::Broadcast { shape } => broadcast(inputs[0], shape),
    }
}

fn elementwise_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

fn elementwise_unary(x: &Tensor, f: impl Fn(f64) -> f64) -> Result<Tensor> {
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise power with a fixed exponent.
///
/// Special cases at the origin: `0^0 = 1`, `0^c = 0` for any nonzero `c`
/// (including negative exponents, where the true limit diverges). Returning 0
/// there realizes the convention that the derivative of fractional powers at 0
/// is taken to be 0, keeping gradient-of-norm expressions finite when the norm
/// vanishes.
fn pow(x: &Tensor, c: f64) -> Result<Tensor> {
    if c.fract() != 0.0 && x.data().iter().any(|&v| v < 0.0) {
        return Err(Error::domain("power", "fractional power of a negative value"));
    }
    elementwise_unary(x, |v| {
        if v == 0.0 {
            if c == 0.0 {
                1.0
            } else {
                0.0
            }
        } else {
            v.powf(c)
        }
    })
}

fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &bd[kk * n..(kk + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Valid (unpadded) cross-correlation: x `[T, Ci]`, kernel `[Co, Ci, W]`,
/// output `[T', Co]` with `T' = (T - W) / stride + 1`.
fn conv1d(x: &Tensor, k: &Tensor, stride: usize) -> Result<Tensor> {
    let (t_in, ci) = (x.shape()[0], x.shape()[1]);
    let (co, w_len) = (k.shape()[0], k.shape()[2]);
    let t_out = (t_in - w_len) / stride + 1;
    let xd = x.data();
    let kd = k.data();
    let mut out = vec![0.0; t_out * co];
    for t in 0..t_out {
        let base = t * stride;
        for o in 0..co {
            let kblock = &kd[o * ci * w_len..(o + 1) * ci * w_len];
            let mut acc = 0.0;
            for w in 0..w_len {
                let xrow = &xd[(base + w) * ci..(base + w + 1) * ci];
                for i in 0..ci {
                    acc += xrow[i] * kblock[i * w_len + w];
                }
            }
            out[t * co + o] = acc;
        }
    }
    Tensor::new(vec![t_out, co], out)
}

/// Adjoint of [`conv1d`] with respect to the input: g `[T', Co]`, kernel
/// `[Co, Ci, W]`, output `[input_len, Ci]`.
fn conv_dx(g: &Tensor, k: &Tensor, stride: usize, input_len: usize) -> Result<Tensor> {
    let (t_out, co) = (g.shape()[0], g.shape()[1]);
    let (ci, w_len) = (k.shape()[1], k.shape()[2]);
    let gd = g.data();
    let kd = k.data();
    let mut out = vec![0.0; input_len * ci];
    for t in 0..t_out {
        let base = t * stride;
        for o in 0..co {
            let gv = gd[t * co + o];
            if gv == 0.0 {
                continue;
            }
            let kblock = &kd[o * ci * w_len..(o + 1) * ci * w_len];
            for w in 0..w_len {
                let orow = &mut out[(base + w) * ci..(base + w + 1) * ci];
                for i in 0..ci {
                    orow[i] += gv * kblock[i * w_len + w];
                }
            }
        }
    }
    Tensor::new(vec![input_len, ci], out)
}

/// Adjoint of [`conv1d`] with respect to the kernel: x `[T, Ci]`, g `[T', Co]`,
/// output `[Co, Ci, W]`.
fn conv_dk(x: &Tensor, g: &Tensor, stride: usize, window: usize) -> Result<Tensor> {
    let (_, ci) = (x.shape()[0], x.shape()[1]);
    let (t_out, co) = (g.shape()[0], g.shape()[1]);
    let xd = x.data();
    let gd = g.data();
    let mut out = vec![0.0; co * ci * window];
    for t in 0..t_out {
        let base = t * stride;
        for o in 0..co {
            let gv = gd[t * co + o];
            if gv == 0.0 {
                continue;
            }
            let oblock = &mut out[o * ci * window..(o + 1) * ci * window];
            for w in 0..window {
                let xrow = &xd[(base + w) * ci..(base + w + 1) * ci];
                for i in 0..ci {
                    oblock[i * window + w] += gv * xrow[i];
                }
            }
        }
    }
    Tensor::new(vec![co, ci, window], out)
}

enum ReduceKind {
    Sum,
    Mean,
    Max,
    LogSumExp,
}

/// Single-axis reduction keeping the reduced dimension as 1, or full reduction
/// to a scalar when `axis` is `None`.
fn reduce(x: &Tensor, axis: Option<usize>, kind: ReduceKind) -> Result<Tensor> {
    let (outer, mid, inner, out_shape) = match axis {
        None => (1, x.numel(), 1, vec![]),
        Some(ax) => {
            let shape = x.shape();
            let outer: usize = shape[..ax].iter().product();
            let inner: usize = shape[ax + 1..].iter().product();
            let mut out_shape = shape.to_vec();
            out_shape[ax] = 1;
            (outer, shape[ax], inner, out_shape)
        }
    };
    let xd = x.data();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let get = |m: usize| xd[(o * mid + m) * inner + i];
            out[o * inner + i] = match kind {
                ReduceKind::Sum => (0..mid).map(get).sum(),
                ReduceKind::Mean => (0..mid).map(get).sum::<f64>() / mid as f64,
                ReduceKind::Max => (0..mid).map(get).fold(f64::NEG_INFINITY, f64::max),
                ReduceKind::LogSumExp => {
                    let m = (0..mid).map(get).fold(f64::NEG_INFINITY, f64::max);
                    m + (0..mid).map(|j| (get(j) - m).exp()).sum::<f64>().ln()
                }
            };
        }
    }
    Tensor::new(out_shape, out)
}

/// Softmax along the last axis.
fn softmax(x: &Tensor) -> Result<Tensor> {
    let cols = *x.shape().last().unwrap();
    let rows = x.numel() / cols;
    let xd = x.data();
    let mut out = vec![0.0; x.numel()];
    for r in 0..rows {
        let row = &xd[r * cols..(r + 1) * cols];
        let orow = &mut out[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - m).exp();
            s += *o;
        }
        for o in orow.iter_mut() {
            *o /= s;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn concat(inputs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = inputs[0];
    let mut out_shape = first.shape().to_vec();
    out_shape[axis] = inputs.iter().map(|t| t.shape()[axis]).sum();
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(out_shape.iter().product());
    for o in 0..outer {
        for t in inputs {
            let block = t.shape()[axis] * inner;
            out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
        }
    }
    Tensor::new(out_shape, out)
}

fn slice(x: &Tensor, axis: usize, start: usize, stop: usize) -> Result<Tensor> {
    let shape = x.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mid = shape[axis];
    let mut out_shape = shape.to_vec();
    out_shape[axis] = stop - start;
    let mut out = Vec::with_capacity(outer * (stop - start) * inner);
    for o in 0..outer {
        let base = (o * mid + start) * inner;
        out.extend_from_slice(&x.data()[base..base + (stop - start) * inner]);
    }
    Tensor::new(out_shape, out)
}

fn transpose(x: &Tensor) -> Result<Tensor> {
    let (r, c) = (x.shape()[0], x.shape()[1]);
    let xd = x.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = xd[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out)
}

/// Expand an input to `target` shape. The input is either a scalar or has the
/// same rank as the target with every dimension equal or 1.
fn broadcast(x: &Tensor, target: &[usize]) -> Result<Tensor> {
    if x.is_scalar() {
        return Ok(Tensor::filled(target, x.data()[0]));
    }
    if x.shape() == target {
        return Ok(x.clone());
    }
    let rank = target.len();
    let in_strides = strides_of(x.shape());
    let bc_strides: Vec<usize> = (0..rank)
        .map(|ax| if x.shape()[ax] == 1 { 0 } else { in_strides[ax] })
        .collect();
    let numel: usize = target.iter().product();
    let mut out = vec![0.0; numel];
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    let xd = x.data();
    for o in out.iter_mut() {
        *o = xd[offset];
        // odometer increment over the target shape
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += bc_strides[ax];
            if idx[ax] < target[ax] {
                break;
            }
            offset -= idx[ax] * bc_strides[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(target.to_vec(), out)
}
