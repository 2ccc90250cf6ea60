//! Reverse-mode gradient pass.
//!
//! The pass walks the graph once in reverse construction order and appends
//! the chain-rule computation as ordinary catalog nodes. The returned
//! [`GradientMap`] therefore holds graph handles, not raw numbers: a gradient
//! expression can itself be differentiated by calling [`Graph::gradient`]
//! again, which is how the second-order gradient-penalty path is realized.

use super::graph::{Graph, Op, Var};
use crate::error::{Error, Result};

/// Gradients of one scalar output with respect to a set of nodes. Every
/// requested node has an entry whose shape matches the source tensor;
/// non-ancestors map to zero tensors.
pub struct GradientMap {
    entries: Vec<(Var, Var)>,
}

impl GradientMap {
    /// The node holding d(output)/d(`v`), if `v` was requested.
    pub fn grad(&self, v: Var) -> Option<Var> {
        self.entries.iter().find(|(w, _)| *w == v).map(|(_, g)| *g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, Var)> + '_ {
        self.entries.iter().copied()
    }
}

impl Graph {
    /// Reverse-mode gradients of a scalar `output` with respect to `wrt`.
    pub fn gradient(&mut self, output: Var, wrt: &[Var]) -> Result<GradientMap> {
        if !self.value(output).is_scalar() {
            return Err(Error::Contract(format!(
                "gradient requires a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        let n = output.0 + 1;
        let mut adjoint: Vec<Option<Var>> = vec![None; n];
        adjoint[output.0] = Some(self.scalar(1.0));

        for id in (0..n).rev() {
            let Some(g) = adjoint[id] else { continue };
            let (op, inputs) = {
                let node = &self.nodes[id];
                (node.op.clone(), node.inputs.clone())
            };
            self.backward(Var(id), &op, &inputs, g, &mut adjoint)?;
        }

        let mut entries = Vec::with_capacity(wrt.len());
        for &w in wrt {
            let g = match adjoint.get(w.0).copied().flatten() {
                Some(g) => g,
                None => self.zeros(&self.shape(w).to_vec()),
            };
            entries.push((w, g));
        }
        Ok(GradientMap { entries })
    }

    /// Accumulate `contrib` into the adjoint slot of `target`.
    fn accumulate(
        &mut self,
        adjoint: &mut [Option<Var>],
        target: Var,
        contrib: Var,
    ) -> Result<()> {
        adjoint[target.0] = Some(match adjoint[target.0] {
            None => contrib,
            Some(prev) => self.add(prev, contrib)?,
        });
        Ok(())
    }

    /// Append the chain-rule contributions of one node to its inputs.
    fn backward(
        &mut self,
        out: Var,
        op: &Op,
        inputs: &[Var],
        g: Var,
        adjoint: &mut [Option<Var>],
    ) -> Result<()> {
        match op {
            Op::Input(_) | Op::Const | Op::Step => {}
            Op::Add => {
                self.accumulate(adjoint, inputs[0], g)?;
                self.accumulate(adjoint, inputs[1], g)?;
            }
            Op::Sub => {
                self.accumulate(adjoint, inputs[0], g)?;
                let nb = self.neg(g)?;
                self.accumulate(adjoint, inputs[1], nb)?;
            }
            Op::Mul => {
                let da = self.mul(g, inputs[1])?;
                self.accumulate(adjoint, inputs[0], da)?;
                let db = self.mul(g, inputs[0])?;
                self.accumulate(adjoint, inputs[1], db)?;
            }
            Op::Div => {
                // d(a/b)/da = 1/b, d(a/b)/db = -(a/b)/b
                let da = self.div(g, inputs[1])?;
                self.accumulate(adjoint, inputs[0], da)?;
                let gy = self.mul(g, out)?;
                let q = self.div(gy, inputs[1])?;
                let db = self.neg(q)?;
                self.accumulate(adjoint, inputs[1], db)?;
            }
            Op::Matmul => {
                let bt = self.transpose(inputs[1])?;
                let da = self.matmul(g, bt)?;
                self.accumulate(adjoint, inputs[0], da)?;
                let at = self.transpose(inputs[0])?;
                let db = self.matmul(at, g)?;
                self.accumulate(adjoint, inputs[1], db)?;
            }
            Op::Conv1d { stride } => {
                let input_len = self.shape(inputs[0])[0];
                let window = self.shape(inputs[1])[2];
                let dx = self.conv_dx(g, inputs[1], *stride, input_len)?;
                self.accumulate(adjoint, inputs[0], dx)?;
                let dk = self.conv_dk(inputs[0], g, *stride, window)?;
                self.accumulate(adjoint, inputs[1], dk)?;
            }
            Op::ConvDx { stride, .. } => {
                // out = dx(g0, k); adjoint h flows back as conv(h, k) and dk(h, g0)
                let window = self.shape(inputs[1])[2];
                let dg = self.conv1d(g, inputs[1], *stride)?;
                self.accumulate(adjoint, inputs[0], dg)?;
                let dk = self.conv_dk(g, inputs[0], *stride, window)?;
                self.accumulate(adjoint, inputs[1], dk)?;
            }
            Op::ConvDk { stride, .. } => {
                // out = dk(x, g0); adjoint m flows back as dx(g0, m) and conv(x, m)
                let input_len = self.shape(inputs[0])[0];
                let dx = self.conv_dx(inputs[1], g, *stride, input_len)?;
                self.accumulate(adjoint, inputs[0], dx)?;
                let dg = self.conv1d(inputs[0], g, *stride)?;
                self.accumulate(adjoint, inputs[1], dg)?;
            }
            Op::Exp => {
                let dx = self.mul(g, out)?;
                self.accumulate(adjoint, inputs[0], dx)?;
            }
            Op::Log => {
                let dx = self.div(g, inputs[0])?;
                self.accumulate(adjoint, inputs[0], dx)?;
            }
            Op::Tanh => {
                // 1 - tanh^2
                let y2 = self.mul(out, out)?;
                let one = self.scalar(1.0);
                let d = self.sub(one, y2)?;
                let dx = self.mul(g, d)?;
                self.accumulate(adjoint, inputs[0], dx)?;
            }
            Op::Sigmoid => {
                // y(1 - y)
                let one = self.scalar(1.0);
                let om = self.sub(one, out)?;
                let d = self.mul(out, om)?;
                let dx = self.mul(g, d)?;
                self.accumulate(adjoint, inputs[0], dx)?;
            }
            Op::Relu => {
                let s = self.step(inputs[0])?;
                let dx = self.mul(g, s)?;
                self.accumulate(adjoint, inputs[0], dx)?;
            }
            Op::Pow { exponent } => {
                if *exponent != 0.0 {
                    let p = self.pow(inputs[0], exponent - 1.0)?;
                    let cp = self.mul_scalar(p, *exponent)?;
                    let dx = self.mul(g, cp)?;
                    self.accumulate(adjoint, inputs[0], dx)?;
                }
            }
            Op::Sum { .. } => {
                let target = self.shape(inputs[0]).to_vec();
                let dx = self.broadcast(g, &target)?;
                self.accumulate(adjoint, inputs[0], dx)?;
            }
            Op::Mean { .. } => {
                let target = self.shape(inputs[0]).to_vec();
                let scale = self.value(out).numel() as f64 / self.value(inputs[0]).numel() as f64;
                let b = self.broadcast(g, &target)?;
                let dx = self.mul_scalar(b, scale)?;
                self.accumulate(adjoint, inputs[0], dx)?;
            }
            Op::Max { .. } => {
                // indicator of attaining elements: 1 - step(max - x); ties all
                // receive gradient
                let target = self.shape(inputs[0]).to_vec();
                let bmax = self.broadcast(out, &target)?;
                let diff = self.sub(bmax, inputs[0])?;
                let s = self.step(diff)?;
                let one = self.scalar(1.0);
                let ind = self.sub(one, s)?;
                let bg = self.broadcast(g, &target)?;
                let dx = self.mul(bg, ind)?;
                self.accumulate(adjoint, inputs[0], dx)?;
            }
            Op::Softmax => {
                // y * (g - sum(g * y)) along the last axis
                let rank = self.shape(out).len();
                let gy = self.mul(g, out)?;
                let s = self.sum(gy, Some(rank - 1))?;
                let d = self.sub(g, s)?;
                let dx = self.mul(out, d)?;
                self.accumulate(adjoint, inputs[0], dx)?;
            }
            Op::LogSumExp { .. } => {
                // softmax weights: exp(x - lse)
                let target = self.shape(inputs[0]).to_vec();
                let b = self.broadcast(out, &target)?;
                let d = self.sub(inputs[0], b)?;
                let w = self.exp(d)?;
                let bg = self.broadcast(g, &target)?;
                let dx = self.mul(bg, w)?;
                self.accumulate(adjoint, inputs[0], dx)?;
            }
            Op::Concat { axis } => {
                let mut offset = 0;
                for &inp in inputs {
                    let len = self.shape(inp)[*axis];
                    let part = self.slice(g, *axis, offset, offset + len)?;
                    self.accumulate(adjoint, inp, part)?;
                    offset += len;
                }
            }
            Op::Slice { axis, start, stop } => {
                let src = self.shape(inputs[0]).to_vec();
                let mut parts = Vec::with_capacity(3);
                if *start > 0 {
                    let mut s = src.clone();
                    s[*axis] = *start;
                    parts.push(self.zeros(&s));
                }
                parts.push(g);
                if *stop < src[*axis] {
                    let mut s = src.clone();
                    s[*axis] = src[*axis] - stop;
                    parts.push(self.zeros(&s));
                }
                let dx = if parts.len() == 1 { g } else { self.concat(&parts, *axis)? };
                self.accumulate(adjoint, inputs[0], dx)?;
            }
            Op::Transpose => {
                let dx = self.transpose(g)?;
                self.accumulate(adjoint, inputs[0], dx)?;
            }
            Op::Broadcast { .. } => {
                let src = self.shape(inputs[0]).to_vec();
                let dx = if src.is_empty() {
                    self.sum(g, None)?
                } else {
                    let out_shape = self.shape(out).to_vec();
                    let mut acc = g;
                    for ax in 0..src.len() {
                        if src[ax] == 1 && out_shape[ax] != 1 {
                            acc = self.sum(acc, Some(ax))?;
                        }
                    }
                    acc
                };
                self.accumulate(adjoint, inputs[0], dx)?;
            }
        }
        Ok(())
    }
}
