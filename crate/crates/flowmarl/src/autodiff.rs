//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Nodes are appended in evaluation order, so reverse node order is already
//! a topological order for the backward sweep. Gradients accumulate only
//! into nodes reachable from trainable leaves; everything else is treated
//! as a constant, which is how targets and frozen networks are
//! gradient-blocked.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MinElem(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        offset: NodeId,
        normalized: Tensor,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(NodeId),
    SumAll(NodeId),
    ConcatCols(Vec<NodeId>),
    SliceCols {
        input: NodeId,
        start: usize,
        len: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Trainable leaf: gradients will be collected for it.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Frozen leaf: contributes values but never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = tensor::add_bias(self.value(x), self.value(bias))?;
        let rg = self.requires(x) || self.requires(bias);
        Ok(self.push(v, Op::AddBias(x, bias), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::zip(self.value(a), self.value(b), |x, y| x + y)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::zip(self.value(a), self.value(b), |x, y| x - y)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::zip(self.value(a), self.value(b), |x, y| x * y)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    /// Elementwise minimum; ties route gradient to the first argument.
    pub fn min_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::zip(self.value(a), self.value(b), f64::min)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(v, Op::MinElem(a, b), rg))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let v = self.value(x).map(|v| v * s);
        let rg = self.requires(x);
        self.push(v, Op::Scale(x, s), rg)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = tensor::unary(self.value(x), tensor::gelu);
        let rg = self.requires(x);
        self.push(v, Op::Gelu(x), rg)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, offset: NodeId) -> Result<NodeId> {
        let (normalized, inv_std) = tensor::layer_norm_rows(self.value(x))?;
        let scaled = tensor::add_bias(
            &{
                // row-wise gain
                let (m, n) = (normalized.rows(), normalized.cols());
                let g = self.value(gain).data();
                if g.len() != n {
                    return Err(Error::shape(
                        format!("gain of length {}", n),
                        format!("gain of length {}", g.len()),
                    ));
                }
                let mut out = normalized.clone();
                for r in 0..m {
                    let row = &mut out.data_mut()[r * n..(r + 1) * n];
                    for (o, &gv) in row.iter_mut().zip(g.iter()) {
                        *o *= gv;
                    }
                }
                out
            },
            self.value(offset),
        )?;
        let rg = self.requires(x) || self.requires(gain) || self.requires(offset);
        Ok(self.push(
            scaled,
            Op::LayerNorm {
                x,
                gain,
                offset,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let v = tensor::softmax_rows(self.value(x))?;
        let rg = self.requires(x);
        Ok(self.push(v, Op::SoftmaxRows(x), rg))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(tensor::sum_all(self.value(x)));
        let rg = self.requires(x);
        self.push(v, Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).len();
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat_cols: no inputs".into()));
        }
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(Error::shape(
                    format!("{} rows", rows),
                    format!("{} rows", t.rows()),
                ));
            }
            total += t.cols();
        }
        let mut out = vec![0.0; rows * total];
        let mut col = 0;
        for &p in parts {
            let t = self.value(p);
            let c = t.cols();
            for r in 0..rows {
                out[r * total + col..r * total + col + c].copy_from_slice(t.row(r));
            }
            col += c;
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            Tensor::new(vec![rows, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn slice_cols(&mut self, input: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let t = self.value(input);
        let (rows, cols) = (t.rows(), t.cols());
        if start + len > cols {
            return Err(Error::shape(
                format!("slice within {} cols", cols),
                format!("slice [{}, {})", start, start + len),
            ));
        }
        let mut out = vec![0.0; rows * len];
        for r in 0..rows {
            out[r * len..(r + 1) * len].copy_from_slice(&t.row(r)[start..start + len]);
        }
        let rg = self.requires(input);
        Ok(self.push(
            Tensor::new(vec![rows, len], out)?,
            Op::SliceCols { input, start, len },
            rg,
        ))
    }

    /// Squared Frobenius norm of (a - b), returned as a scalar node.
    pub fn squared_error(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.sum_all(sq))
    }

    /// Reverse sweep from a scalar loss node. Clears previous gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let grad = match self.grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(idx, &grad)?;
            self.grads[idx] = Some(grad);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, delta: &Tensor) -> Result<()> {
        if !self.nodes[id.0].requires_grad {
            return Ok(());
        }
        match &mut self.grads[id.0] {
            Some(g) => {
                for (o, &d) in g.data_mut().iter_mut().zip(delta.data()) {
                    *o += d;
                }
            }
            slot => *slot = Some(delta.clone()),
        }
        Ok(())
    }

    fn propagate(&mut self, idx: usize, grad: &Tensor) -> Result<()> {
        // Ops only reference earlier nodes, so borrows below never alias `idx`.
        enum Deltas {
            None,
            One(NodeId, Tensor),
            Two(NodeId, Tensor, NodeId, Tensor),
            Three(NodeId, Tensor, NodeId, Tensor, NodeId, Tensor),
            Many(Vec<(NodeId, Tensor)>),
        }
        let deltas = match &self.nodes[idx].op {
            Op::Leaf => Deltas::None,
            Op::MatMul(a, b) => {
                let da = tensor::matmul_a_bt(grad, self.value(*b))?;
                let db = tensor::matmul_at_b(self.value(*a), grad)?;
                Deltas::Two(*a, da, *b, db)
            }
            Op::AddBias(x, bias) => {
                let db = tensor::col_sums(grad)?;
                Deltas::Two(*x, grad.clone(), *bias, db)
            }
            Op::Add(a, b) => Deltas::Two(*a, grad.clone(), *b, grad.clone()),
            Op::Sub(a, b) => Deltas::Two(*a, grad.clone(), *b, grad.map(|v| -v)),
            Op::Mul(a, b) => {
                let da = tensor::zip(grad, self.value(*b), |g, y| g * y)?;
                let db = tensor::zip(grad, self.value(*a), |g, x| g * x)?;
                Deltas::Two(*a, da, *b, db)
            }
            Op::MinElem(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let da = {
                    let mut d = grad.clone();
                    for ((o, &x), &y) in d.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                        if x > y {
                            *o = 0.0;
                        }
                    }
                    d
                };
                let db = {
                    let mut d = grad.clone();
                    for ((o, &x), &y) in d.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                        if x <= y {
                            *o = 0.0;
                        }
                    }
                    d
                };
                Deltas::Two(*a, da, *b, db)
            }
            Op::Scale(x, s) => Deltas::One(*x, grad.map(|v| v * s)),
            Op::Gelu(x) => {
                let dx = tensor::zip(grad, self.value(*x), |g, v| g * tensor::gelu_grad(v))?;
                Deltas::One(*x, dx)
            }
            Op::LayerNorm {
                x,
                gain,
                offset,
                normalized,
                inv_std,
            } => {
                let (m, n) = (normalized.rows(), normalized.cols());
                let gd = self.value(*gain).data();
                let mut dx = Tensor::zeros(vec![m, n]);
                let mut dgain = vec![0.0; n];
                let mut doffset = vec![0.0; n];
                for r in 0..m {
                    let grow = grad.row(r);
                    let yrow = normalized.row(r);
                    // dy = grad * gain, then the usual normalization backward
                    let dy: Vec<f64> = grow.iter().zip(gd.iter()).map(|(&g, &gv)| g * gv).collect();
                    let mean_dy = dy.iter().sum::<f64>() / n as f64;
                    let mean_dy_y =
                        dy.iter().zip(yrow.iter()).map(|(&d, &y)| d * y).sum::<f64>() / n as f64;
                    let is = inv_std[r];
                    let out = &mut dx.data_mut()[r * n..(r + 1) * n];
                    for j in 0..n {
                        out[j] = is * (dy[j] - mean_dy - yrow[j] * mean_dy_y);
                        dgain[j] += grow[j] * yrow[j];
                        doffset[j] += grow[j];
                    }
                }
                Deltas::Three(
                    *x,
                    dx,
                    *gain,
                    Tensor::new(vec![n], dgain)?,
                    *offset,
                    Tensor::new(vec![n], doffset)?,
                )
            }
            Op::SoftmaxRows(x) => {
                let p = self.value(NodeId(idx)).clone();
                let (m, n) = (p.rows(), p.cols());
                let mut dx = Tensor::zeros(vec![m, n]);
                for r in 0..m {
                    let prow = p.row(r);
                    let grow = grad.row(r);
                    let dot: f64 = prow.iter().zip(grow.iter()).map(|(&a, &b)| a * b).sum();
                    let out = &mut dx.data_mut()[r * n..(r + 1) * n];
                    for j in 0..n {
                        out[j] = prow[j] * (grow[j] - dot);
                    }
                }
                Deltas::One(*x, dx)
            }
            Op::SumAll(x) => {
                let g = grad.item();
                Deltas::One(*x, Tensor::full(self.value(*x).shape().to_vec(), g))
            }
            Op::ConcatCols(parts) => {
                let rows = grad.rows();
                let total = grad.cols();
                let mut col = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let c = self.value(p).cols();
                    let mut d = vec![0.0; rows * c];
                    for r in 0..rows {
                        d[r * c..(r + 1) * c]
                            .copy_from_slice(&grad.row(r)[col..col + c]);
                    }
                    let _ = total;
                    out.push((p, Tensor::new(vec![rows, c], d)?));
                    col += c;
                }
                Deltas::Many(out)
            }
            Op::SliceCols { input, start, len } => {
                let t = self.value(*input);
                let (rows, cols) = (t.rows(), t.cols());
                let mut d = Tensor::zeros(vec![rows, cols]);
                for r in 0..rows {
                    d.data_mut()[r * cols + start..r * cols + start + len]
                        .copy_from_slice(grad.row(r));
                }
                Deltas::One(*input, d)
            }
        };
        match deltas {
            Deltas::None => {}
            Deltas::One(a, da) => self.accumulate(a, &da)?,
            Deltas::Two(a, da, b, db) => {
                self.accumulate(a, &da)?;
                self.accumulate(b, &db)?;
            }
            Deltas::Three(a, da, b, db, c, dc) => {
                self.accumulate(a, &da)?;
                self.accumulate(b, &db)?;
                self.accumulate(c, &dc)?;
            }
            Deltas::Many(list) => {
                for (id, d) in list {
                    self.accumulate(id, &d)?;
                }
            }
        }
        Ok(())
    }

    /// Gradient for a node after `backward`; zeros if it never received one.
    pub fn grad(&self, id: NodeId) -> Tensor {
        match self.grads.get(id.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.value(id).shape().to_vec()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_of_weight_gradient() {
        // loss = w^2 at w = 3 -> dloss/dw = 6
        let mut tape = Tape::new();
        let w = tape.param(Tensor::scalar(3.0));
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).item(), 6.0);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(5.0));
        let loss = tape.sum_all(c);
        tape.backward(loss).unwrap();
        let _ = w;
        assert_eq!(tape.grad(w).item(), 0.0);
    }

    #[test]
    fn non_scalar_loss_is_an_error() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        assert!(tape.backward(w).is_err());
    }

    #[test]
    fn matmul_gradient_matches_hand_result() {
        // loss = sum(A * x) with A trainable: dA = x broadcast per row
        let mut tape = Tape::new();
        let a = tape.param(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let x = tape.constant(Tensor::new(vec![2, 1], vec![5.0, 7.0]).unwrap());
        let y = tape.matmul(a, x).unwrap();
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).data(), &[5.0, 7.0, 5.0, 7.0]);
    }

    #[test]
    fn constants_block_gradient_flow() {
        // q(s) with s = f(w): constant net params must not appear in grads,
        // but gradient must still flow through them into w.
        let mut tape = Tape::new();
        let w = tape.param(Tensor::new(vec![1, 1], vec![2.0]).unwrap());
        let frozen = tape.constant(Tensor::new(vec![1, 1], vec![3.0]).unwrap());
        let h = tape.matmul(w, frozen).unwrap(); // h = 6
        let loss = tape.sum_all(h);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).data(), &[3.0]);
        assert_eq!(tape.grad(frozen).data(), &[0.0]);
    }

    #[test]
    fn slice_concat_roundtrip_gradients() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let a = tape.slice_cols(x, 0, 1).unwrap();
        let b = tape.slice_cols(x, 1, 2).unwrap();
        let back = tape.concat_cols(&[a, b]).unwrap();
        let sq = tape.mul(back, back).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        // d(sum x^2)/dx = 2x
        let g = tape.grad(x);
        for (gv, xv) in g.data().iter().zip([1.0, 2.0, 3.0, 4.0, 5.0, 6.0]) {
            assert!((gv - 2.0 * xv).abs() < 1e-12);
        }
    }
}
