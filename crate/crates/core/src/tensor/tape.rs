use rand::Rng;

use super::{gemm_into, Binary, Mode, Tensor, Unary};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Index of a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Constant,
    MatMul(NodeId, NodeId),
    Binary(Binary, NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Unary(Unary, NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    MeanPool(NodeId),
    ConcatCols(NodeId, NodeId),
    StackRows(Vec<NodeId>),
    SliceCols(NodeId, usize),
    SliceRows(NodeId, usize),
    Dropout(NodeId, Tensor<T>),
    Sum(NodeId),
    Mean(NodeId),
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    needs_grad: bool,
}

/// Records tensor operations in evaluation order for reverse accumulation.
///
/// Nodes only ever reference earlier nodes, so the node vector is already a
/// topological order and `backward` is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients indexed by node; `None` for nodes the loss does not depend on
/// through a differentiable path.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient for `id`, or zeros shaped like `like` when none flowed.
    pub fn get_or_zeros(&self, id: NodeId, like: &Tensor<T>) -> Tensor<T> {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.rows(), like.cols()))
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    /// A differentiable input (parameter).
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Constant, value, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        let g = self.needs(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), v, g))
    }

    pub fn binary(&mut self, a: NodeId, b: NodeId, kind: Binary) -> Result<NodeId> {
        let v = self.value(a).binary(self.value(b), kind)?;
        let g = self.needs(&[a, b]);
        Ok(self.push(Op::Binary(kind, a, b), v, g))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Binary::Mul)
    }

    /// `x + bias` with `bias` (`1 x n`) broadcast over the rows of `x`.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = self.value(x).add_row(self.value(bias))?;
        let g = self.needs(&[x, bias]);
        Ok(self.push(Op::AddRow(x, bias), v, g))
    }

    pub fn unary(&mut self, x: NodeId, kind: Unary) -> NodeId {
        let v = self.value(x).unary(kind);
        let g = self.needs(&[x]);
        self.push(Op::Unary(kind, x), v, g)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Unary::Relu)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Unary::Tanh)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: T) -> Result<NodeId> {
        let (v, xhat, inv_std) =
            self.value(x)
                .layer_norm_cached(self.value(gain), self.value(bias), eps)?;
        let g = self.needs(&[x, gain, bias]);
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            v,
            g,
        ))
    }

    pub fn mean_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).mean_pool()?;
        let g = self.needs(&[x]);
        Ok(self.push(Op::MeanPool(x), v, g))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).concat_cols(self.value(b))?;
        let g = self.needs(&[a, b]);
        Ok(self.push(Op::ConcatCols(a, b), v, g))
    }

    pub fn stack_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::stack_rows(&values)?;
        let g = self.needs(parts);
        Ok(self.push(Op::StackRows(parts.to_vec()), v, g))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(x).slice_cols(start, len)?;
        let g = self.needs(&[x]);
        Ok(self.push(Op::SliceCols(x, start), v, g))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(x).slice_rows(start, len)?;
        let g = self.needs(&[x]);
        Ok(self.push(Op::SliceRows(x, start), v, g))
    }

    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: NodeId,
        rate: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<NodeId> {
        let (v, mask) = self.value(x).dropout(rate, mode, rng)?;
        let g = self.needs(&[x]);
        Ok(self.push(Op::Dropout(x, mask), v, g))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        let g = self.needs(&[x]);
        self.push(Op::Sum(x), v, g)
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(x).mean()?);
        let g = self.needs(&[x]);
        Ok(self.push(Op::Mean(x), v, g))
    }

    /// Reverse accumulation from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.shape() != (1, 1) {
            return Err(Error::shape(format!(
                "backward from a {}x{} node; loss must be 1x1",
                root.value.rows(),
                root.value.cols()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        // Row slices scatter straight into the parent's gradient so that
        // per-frame slices of a long sequence stay linear in its length.
        if let Op::SliceRows(x, start) = &node.op {
            if self.nodes[x.0].needs_grad {
                let xv = self.value(*x);
                let slot = grads[x.0].get_or_insert_with(|| Tensor::zeros(xv.rows(), xv.cols()));
                let off = start * xv.cols();
                for (d, &v) in slot.data_mut()[off..off + g.len()].iter_mut().zip(g.data()) {
                    *d += v;
                }
            }
            return Ok(());
        }

        let mut send = |id: NodeId, contribution: Tensor<T>| -> Result<()> {
            if !self.nodes[id.0].needs_grad {
                return Ok(());
            }
            match &mut grads[id.0] {
                Some(acc) => acc.add_assign(&contribution),
                slot @ None => {
                    *slot = Some(contribution);
                    Ok(())
                }
            }
        };

        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].needs_grad {
                    let mut da = Tensor::zeros(av.rows(), av.cols());
                    gemm_into(g, false, bv, true, &mut da, false);
                    send(*a, da)?;
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = Tensor::zeros(bv.rows(), bv.cols());
                    gemm_into(av, true, g, false, &mut db, false);
                    send(*b, db)?;
                }
            }
            Op::Binary(kind, a, b) => match kind {
                Binary::Add => {
                    send(*a, g.clone())?;
                    send(*b, g.clone())?;
                }
                Binary::Sub => {
                    send(*a, g.clone())?;
                    send(*b, g.map(|v| -v))?;
                }
                Binary::Mul => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    send(*a, g.zip_with(bv, |gi, bi| gi * bi)?)?;
                    send(*b, g.zip_with(av, |gi, ai| gi * ai)?)?;
                }
            },
            Op::AddRow(x, bias) => {
                send(*x, g.clone())?;
                if self.nodes[bias.0].needs_grad {
                    let mut db = vec![T::zero(); g.cols()];
                    for r in 0..g.rows() {
                        for (acc, &v) in db.iter_mut().zip(g.row_slice(r)) {
                            *acc += v;
                        }
                    }
                    send(*bias, Tensor::row(db))?;
                }
            }
            Op::Unary(kind, x) => {
                let out = &node.value;
                let local = match kind {
                    Unary::Relu => g.zip_with(self.value(*x), |gi, xi| {
                        if xi > T::zero() {
                            gi
                        } else {
                            T::zero()
                        }
                    })?,
                    Unary::Sigmoid => g.zip_with(out, |gi, s| gi * s * (T::one() - s))?,
                    Unary::Tanh => g.zip_with(out, |gi, t| gi * (T::one() - t * t))?,
                };
                send(*x, local)?;
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = g.cols();
                let n = T::from_usize(d).unwrap();
                let gain_v = self.value(*gain);
                let mut dgain = vec![T::zero(); d];
                let mut dbias = vec![T::zero(); d];
                let mut dx = Tensor::zeros(g.rows(), d);
                for r in 0..g.rows() {
                    let gr = g.row_slice(r);
                    let hr = xhat.row_slice(r);
                    let mut sum_dh = T::zero();
                    let mut sum_dh_h = T::zero();
                    for c in 0..d {
                        dgain[c] += gr[c] * hr[c];
                        dbias[c] += gr[c];
                        let dh = gr[c] * gain_v.data()[c];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[c];
                    }
                    let k = inv_std[r] / n;
                    for c in 0..d {
                        let dh = gr[c] * gain_v.data()[c];
                        dx.data_mut()[r * d + c] = k * (n * dh - sum_dh - hr[c] * sum_dh_h);
                    }
                }
                send(*x, dx)?;
                send(*gain, Tensor::row(dgain))?;
                send(*bias, Tensor::row(dbias))?;
            }
            Op::MeanPool(x) => {
                let xv = self.value(*x);
                let n = T::from_usize(xv.rows()).unwrap();
                let scaled: Vec<T> = g.data().iter().map(|&v| v / n).collect();
                send(*x, Tensor::from_fn(xv.rows(), xv.cols(), |_, c| scaled[c]))?;
            }
            Op::ConcatCols(a, b) => {
                let p = self.value(*a).cols();
                let q = self.value(*b).cols();
                send(*a, g.slice_cols(0, p)?)?;
                send(*b, g.slice_cols(p, q)?)?;
            }
            Op::StackRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    send(p, g.slice_rows(start, rows)?)?;
                    start += rows;
                }
            }
            Op::SliceCols(x, start) => {
                let xv = self.value(*x);
                let (s, len) = (*start, g.cols());
                send(
                    *x,
                    Tensor::from_fn(xv.rows(), xv.cols(), |r, c| {
                        if c >= s && c < s + len {
                            g.get(r, c - s)
                        } else {
                            T::zero()
                        }
                    }),
                )?;
            }
            Op::SliceRows(..) => {}
            Op::Dropout(x, mask) => send(*x, g.zip_with(mask, |gi, m| gi * m)?)?,
            Op::Sum(x) => {
                let xv = self.value(*x);
                send(*x, Tensor::filled(xv.rows(), xv.cols(), g.data()[0]))?;
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let n = T::from_usize(xv.len()).unwrap();
                send(*x, Tensor::filled(xv.rows(), xv.cols(), g.data()[0] / n))?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_loss_has_unit_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let grads = tape.backward(x).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn reused_leaf_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.add(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::row(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_gradient_hand_case() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::row(vec![1.0, 2.0]));
        let b = tape.leaf(Tensor::new(2, 1, vec![3.0, 4.0]).unwrap());
        let p = tape.matmul(a, b).unwrap();
        let s = tape.sum(p);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[3.0, 4.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn mean_pool_distributes_evenly() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(4, 3, |r, c| (r + c) as f64));
        let m = tape.mean_pool(x).unwrap();
        let s = tape.sum(m);
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn concat_routes_gradient_by_columns() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::row(vec![1.0]));
        let b = tape.leaf(Tensor::row(vec![2.0, 3.0]));
        let c = tape.concat_cols(a, b).unwrap();
        let w = tape.constant(Tensor::row(vec![10.0, 20.0, 30.0]));
        let p = tape.mul(c, w).unwrap();
        let s = tape.sum(p);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[10.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[20.0, 30.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(5.0));
        let y = tape.mul(x, c).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[5.0]);
        assert!(grads.get(c).is_none());
    }
}
