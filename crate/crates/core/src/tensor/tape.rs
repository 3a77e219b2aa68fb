//! Reverse-mode autodiff over the raw kernels in [`super::ops`].
//!
//! Forward values are computed eagerly by the same kernel functions the
//! streaming path calls, so a traced forward and an untraced one produce
//! bitwise-identical numbers. The tape records one node per op; backward
//! walks nodes in reverse creation order, which fixes the gradient
//! accumulation order and keeps runs reproducible.

use super::ops;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::mask::BoolMask;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(usize);

enum OpRecord<T: Scalar> {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    AddBias { a: NodeId, bias: NodeId },
    Matmul(NodeId, NodeId),
    MatmulNT(NodeId, NodeId),
    Tanh(NodeId),
    Gelu(NodeId),
    Ln(NodeId),
    Sum(NodeId),
    Reshape(NodeId),
    SliceCols { a: NodeId, start: usize, len: usize },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    MaskedSoftmax { a: NodeId, mask: BoolMask },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    Conv1d { x: NodeId, kernel: NodeId },
    Embedding { table: NodeId, ids: Vec<usize> },
    LatticeAdd(NodeId, NodeId),
    /// Custom scalar-valued op whose input gradient was computed during the
    /// forward pass (e.g. the transducer loss).
    SavedGrad { input: NodeId, grad: Tensor<T> },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: OpRecord<T>,
    needs_grad: bool,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Per-node gradients from one backward pass. Nodes the root does not depend
/// on have no entry; callers that need a dense gradient substitute zeros.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor<T> {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor<T>, op: OpRecord<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    /// Tracked input: gradients flow back to it.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, OpRecord::Leaf, true)
    }

    /// Untracked input: data, positional tables, dropout masks.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, OpRecord::Leaf, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(v, OpRecord::Add(a, b), self.needs(&[a, b])))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push(v, OpRecord::Mul(a, b), self.needs(&[a, b])))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let v = ops::scale(self.value(a), c);
        self.push(v, OpRecord::Scale(a, c), self.needs(&[a]))
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = ops::add_bias(self.value(a), self.value(bias))?;
        Ok(self.push(v, OpRecord::AddBias { a, bias }, self.needs(&[a, bias])))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, OpRecord::Matmul(a, b), self.needs(&[a, b])))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(v, OpRecord::MatmulNT(a, b), self.needs(&[a, b])))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = ops::tanh(self.value(a));
        self.push(v, OpRecord::Tanh(a), self.needs(&[a]))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = ops::gelu(self.value(a));
        self.push(v, OpRecord::Gelu(a), self.needs(&[a]))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = ops::ln(self.value(a));
        self.push(v, OpRecord::Ln(a), self.needs(&[a]))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = ops::sum(self.value(a));
        self.push(v, OpRecord::Sum(a), self.needs(&[a]))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, OpRecord::Reshape(a), self.needs(&[a])))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = ops::slice_cols(self.value(a), start, len)?;
        Ok(self.push(v, OpRecord::SliceCols { a, start, len }, self.needs(&[a])))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = ops::concat_cols(&tensors)?;
        Ok(self.push(v, OpRecord::ConcatCols(parts.to_vec()), self.needs(parts)))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = ops::concat_rows(&tensors)?;
        Ok(self.push(v, OpRecord::ConcatRows(parts.to_vec()), self.needs(parts)))
    }

    pub fn masked_softmax(&mut self, a: NodeId, mask: &BoolMask) -> Result<NodeId> {
        let v = ops::masked_softmax(self.value(a), mask)?;
        let needs = self.needs(&[a]);
        Ok(self.push(v, OpRecord::MaskedSoftmax { a, mask: mask.clone() }, needs))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = ops::layer_norm(self.value(x), self.value(gain), self.value(bias))?;
        let needs = self.needs(&[x, gain, bias]);
        Ok(self.push(v, OpRecord::LayerNorm { x, gain, bias }, needs))
    }

    pub fn conv1d_causal(&mut self, x: NodeId, kernel: NodeId) -> Result<NodeId> {
        let v = ops::conv1d_causal(self.value(x), self.value(kernel))?;
        let needs = self.needs(&[x, kernel]);
        Ok(self.push(v, OpRecord::Conv1d { x, kernel }, needs))
    }

    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let v = ops::embedding(self.value(table), ids)?;
        let needs = self.needs(&[table]);
        Ok(self.push(v, OpRecord::Embedding { table, ids: ids.to_vec() }, needs))
    }

    pub fn lattice_add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::lattice_add(self.value(a), self.value(b))?;
        Ok(self.push(v, OpRecord::LatticeAdd(a, b), self.needs(&[a, b])))
    }

    /// Record a scalar whose gradient with respect to `input` was already
    /// computed by the caller. Backward scales it by the upstream gradient.
    pub fn saved_grad(&mut self, input: NodeId, value: T, grad: Tensor<T>) -> Result<NodeId> {
        if grad.shape() != self.value(input).shape() {
            return Err(Error::ShapeMismatch {
                op: "saved_grad",
                detail: format!("grad {:?} vs input {:?}", grad.shape(), self.value(input).shape()),
            });
        }
        let needs = self.needs(&[input]);
        Ok(self.push(Tensor::scalar(value), OpRecord::SavedGrad { input, grad }, needs))
    }

    /// Reverse pass from a scalar root. Returns one gradient per reachable
    /// tracked node; untracked subgraphs are skipped entirely.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<T>> {
        let root_shape = self.value(root).shape();
        if root_shape != [1] {
            return Err(Error::NonScalarRoot { shape: root_shape.to_vec() });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.push_back(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn push_back(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            OpRecord::Leaf => {}
            OpRecord::Add(a, b) => {
                self.acc(*a, g.clone(), grads);
                self.acc(*b, g.clone(), grads);
            }
            OpRecord::Mul(a, b) => {
                self.acc(*a, ops::mul(g, self.value(*b))?, grads);
                self.acc(*b, ops::mul(g, self.value(*a))?, grads);
            }
            OpRecord::Scale(a, c) => {
                self.acc(*a, ops::scale(g, *c), grads);
            }
            OpRecord::AddBias { a, bias } => {
                self.acc(*a, g.clone(), grads);
                let c = self.value(*bias).numel();
                let mut db = vec![T::zero(); c];
                for row in g.data().chunks_exact(c) {
                    for (d, &x) in db.iter_mut().zip(row) {
                        *d = *d + x;
                    }
                }
                self.acc(*bias, Tensor::new(vec![c], db)?, grads);
            }
            OpRecord::Matmul(a, b) => {
                self.acc(*a, ops::matmul_nt(g, self.value(*b))?, grads);
                self.acc(*b, ops::matmul_tn(self.value(*a), g)?, grads);
            }
            OpRecord::MatmulNT(a, b) => {
                self.acc(*a, ops::matmul(g, self.value(*b))?, grads);
                self.acc(*b, ops::matmul_tn(g, self.value(*a))?, grads);
            }
            OpRecord::Tanh(a) => {
                let y = &node.value;
                let dx = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gv, &yv)| gv * (T::one() - yv * yv))
                    .collect();
                self.acc(*a, Tensor::new(g.shape().to_vec(), dx)?, grads);
            }
            OpRecord::Gelu(a) => {
                let x = self.value(*a);
                let dx = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| gv * ops::gelu_grad_scalar(xv))
                    .collect();
                self.acc(*a, Tensor::new(g.shape().to_vec(), dx)?, grads);
            }
            OpRecord::Ln(a) => {
                let x = self.value(*a);
                let dx = g.data().iter().zip(x.data()).map(|(&gv, &xv)| gv / xv).collect();
                self.acc(*a, Tensor::new(g.shape().to_vec(), dx)?, grads);
            }
            OpRecord::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.acc(*a, Tensor::full(shape, g.item()), grads);
            }
            OpRecord::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.acc(*a, g.reshape(shape)?, grads);
            }
            OpRecord::SliceCols { a, start, len } => {
                let (r, c) = self.value(*a).dims2()?;
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + len].copy_from_slice(&g.data()[i * len..(i + 1) * len]);
                }
                self.acc(*a, Tensor::new(vec![r, c], dx)?, grads);
            }
            OpRecord::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).dims2()?.1;
                    if self.nodes[p.0].needs_grad {
                        self.acc(p, ops::slice_cols(g, start, w)?, grads);
                    }
                    start += w;
                }
            }
            OpRecord::ConcatRows(parts) => {
                let c = g.dims2()?.1;
                let mut start = 0;
                for &p in parts {
                    let r = self.value(p).dims2()?.0;
                    if self.nodes[p.0].needs_grad {
                        let slab = g.data()[start * c..(start + r) * c].to_vec();
                        self.acc(p, Tensor::new(vec![r, c], slab)?, grads);
                    }
                    start += r;
                }
            }
            OpRecord::MaskedSoftmax { a, .. } => {
                let y = &node.value;
                let cols = *y.shape().last().expect("softmax value is >= 2-d");
                let mut dx = Vec::with_capacity(y.numel());
                for (grow, yrow) in g.data().chunks_exact(cols).zip(y.data().chunks_exact(cols)) {
                    let mut dot = T::zero();
                    for (&gv, &yv) in grow.iter().zip(yrow) {
                        dot = dot + gv * yv;
                    }
                    for (&gv, &yv) in grow.iter().zip(yrow) {
                        dx.push(yv * (gv - dot));
                    }
                }
                self.acc(*a, Tensor::new(y.shape().to_vec(), dx)?, grads);
            }
            OpRecord::LayerNorm { x, gain, bias } => {
                let xv = self.value(*x);
                let gainv = self.value(*gain);
                let d = *xv.shape().last().expect("layer_norm value is >= 2-d");
                let dn = T::from_f64(d as f64);
                let eps = T::from_f64(1e-5);
                let mut dx = Vec::with_capacity(xv.numel());
                let mut dgain = vec![T::zero(); d];
                let mut dbias = vec![T::zero(); d];
                for (xrow, grow) in xv.data().chunks_exact(d).zip(g.data().chunks_exact(d)) {
                    let mut mean = T::zero();
                    for &v in xrow {
                        mean = mean + v;
                    }
                    mean = mean / dn;
                    let mut var = T::zero();
                    for &v in xrow {
                        let c = v - mean;
                        var = var + c * c;
                    }
                    var = var / dn;
                    let inv = (var + eps).sqrt().recip();
                    let xhat: Vec<T> = xrow.iter().map(|&v| (v - mean) * inv).collect();
                    let gy: Vec<T> = grow.iter().zip(gainv.data()).map(|(&gv, &w)| gv * w).collect();
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for (h, &gyv) in xhat.iter().zip(&gy) {
                        m1 = m1 + gyv;
                        m2 = m2 + gyv * *h;
                    }
                    m1 = m1 / dn;
                    m2 = m2 / dn;
                    for j in 0..d {
                        dx.push((gy[j] - m1 - xhat[j] * m2) * inv);
                        dgain[j] = dgain[j] + grow[j] * xhat[j];
                        dbias[j] = dbias[j] + grow[j];
                    }
                }
                self.acc(*x, Tensor::new(xv.shape().to_vec(), dx)?, grads);
                self.acc(*gain, Tensor::new(vec![d], dgain)?, grads);
                self.acc(*bias, Tensor::new(vec![d], dbias)?, grads);
            }
            OpRecord::Conv1d { x, kernel } => {
                let xv = self.value(*x);
                let kv = self.value(*kernel);
                let (t_len, d_in) = xv.dims2()?;
                let (k, d_out) = (kv.shape()[0], kv.shape()[2]);
                let mut dx = vec![T::zero(); t_len * d_in];
                let mut dw = vec![T::zero(); k * d_in * d_out];
                for t in 0..t_len {
                    let grow = &g.data()[t * d_out..(t + 1) * d_out];
                    for tap in 0..k {
                        let src = t as isize - (k as isize - 1) + tap as isize;
                        if src < 0 {
                            continue;
                        }
                        let src = src as usize;
                        let xrow = &xv.data()[src * d_in..(src + 1) * d_in];
                        for i in 0..d_in {
                            let krow = &kv.data()[(tap * d_in + i) * d_out..(tap * d_in + i + 1) * d_out];
                            let mut acc = T::zero();
                            for (&gv, &w) in grow.iter().zip(krow) {
                                acc = acc + gv * w;
                            }
                            dx[src * d_in + i] = dx[src * d_in + i] + acc;
                            let dwrow = &mut dw[(tap * d_in + i) * d_out..(tap * d_in + i + 1) * d_out];
                            for (dwv, &gv) in dwrow.iter_mut().zip(grow) {
                                *dwv = *dwv + xrow[i] * gv;
                            }
                        }
                    }
                }
                self.acc(*x, Tensor::new(vec![t_len, d_in], dx)?, grads);
                self.acc(*kernel, Tensor::new(vec![k, d_in, d_out], dw)?, grads);
            }
            OpRecord::Embedding { table, ids } => {
                let tv = self.value(*table);
                let (v, e) = tv.dims2()?;
                let mut dt = vec![T::zero(); v * e];
                for (row, &id) in ids.iter().enumerate() {
                    let grow = &g.data()[row * e..(row + 1) * e];
                    let trow = &mut dt[id * e..(id + 1) * e];
                    for (d, &gv) in trow.iter_mut().zip(grow) {
                        *d = *d + gv;
                    }
                }
                self.acc(*table, Tensor::new(vec![v, e], dt)?, grads);
            }
            OpRecord::LatticeAdd(a, b) => {
                let (t_len, h) = self.value(*a).dims2()?;
                let (u_len, _) = self.value(*b).dims2()?;
                let mut da = vec![T::zero(); t_len * h];
                let mut db = vec![T::zero(); u_len * h];
                for t in 0..t_len {
                    for u in 0..u_len {
                        let grow = &g.data()[(t * u_len + u) * h..(t * u_len + u + 1) * h];
                        for j in 0..h {
                            da[t * h + j] = da[t * h + j] + grow[j];
                            db[u * h + j] = db[u * h + j] + grow[j];
                        }
                    }
                }
                self.acc(*a, Tensor::new(vec![t_len, h], da)?, grads);
                self.acc(*b, Tensor::new(vec![u_len, h], db)?, grads);
            }
            OpRecord::SavedGrad { input, grad } => {
                let s = g.item();
                self.acc(*input, ops::scale(grad, s), grads);
            }
        }
        Ok(())
    }

    fn acc(&self, id: NodeId, delta: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => {
                for (a, &b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a = *a + b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    /// Recompute every non-leaf node from its recorded inputs and compare
    /// bitwise against the stored value. Catches any drift between tape ops
    /// and the raw kernels they are supposed to wrap.
    pub fn replay_check(&self) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            let recomputed = match &node.op {
                OpRecord::Leaf => continue,
                OpRecord::Add(a, b) => ops::add(self.value(*a), self.value(*b))?,
                OpRecord::Mul(a, b) => ops::mul(self.value(*a), self.value(*b))?,
                OpRecord::Scale(a, c) => ops::scale(self.value(*a), *c),
                OpRecord::AddBias { a, bias } => ops::add_bias(self.value(*a), self.value(*bias))?,
                OpRecord::Matmul(a, b) => ops::matmul(self.value(*a), self.value(*b))?,
                OpRecord::MatmulNT(a, b) => ops::matmul_nt(self.value(*a), self.value(*b))?,
                OpRecord::Tanh(a) => ops::tanh(self.value(*a)),
                OpRecord::Gelu(a) => ops::gelu(self.value(*a)),
                OpRecord::Ln(a) => ops::ln(self.value(*a)),
                OpRecord::Sum(a) => ops::sum(self.value(*a)),
                OpRecord::Reshape(a) => self.value(*a).reshape(node.value.shape().to_vec())?,
                OpRecord::SliceCols { a, start, len } => ops::slice_cols(self.value(*a), *start, *len)?,
                OpRecord::ConcatCols(parts) => {
                    let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
                    ops::concat_cols(&tensors)?
                }
                OpRecord::ConcatRows(parts) => {
                    let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
                    ops::concat_rows(&tensors)?
                }
                OpRecord::MaskedSoftmax { a, mask } => ops::masked_softmax(self.value(*a), mask)?,
                OpRecord::LayerNorm { x, gain, bias } => {
                    ops::layer_norm(self.value(*x), self.value(*gain), self.value(*bias))?
                }
                OpRecord::Conv1d { x, kernel } => ops::conv1d_causal(self.value(*x), self.value(*kernel))?,
                OpRecord::Embedding { table, ids } => ops::embedding(self.value(*table), ids)?,
                OpRecord::LatticeAdd(a, b) => ops::lattice_add(self.value(*a), self.value(*b))?,
                OpRecord::SavedGrad { .. } => continue,
            };
            if recomputed != node.value {
                return Err(Error::NonFinite { context: format!("replay mismatch at node {i}") });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck;
    use super::*;
    use rand::Rng;

    fn rand_tensor(rng: &mut impl Rng, shape: Vec<usize>) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
    }

    #[test]
    fn linear_sum_has_unit_gradients() {
        // f(x) = sum(x · w) with w = ones: df/dx[i,k] = cols of w = 2.
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![2, 3], vec![0.3f64, -1.0, 2.0, 0.5, 0.1, -0.7]).unwrap());
        let w = tape.constant(Tensor::full(vec![3, 2], 1.0f64));
        let y = tape.matmul(x, w).unwrap();
        let root = tape.sum(y);
        let grads = tape.backward(root).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&g| g == 2.0));
    }

    #[test]
    fn fan_out_accumulates() {
        // f(x) = sum(x ⊙ x): df/dx = 2x.
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![3], vec![1.0f64, -2.0, 0.5]).unwrap());
        let y = tape.mul(x, x).unwrap();
        let root = tape.sum(y);
        let grads = tape.backward(root).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::full(vec![2, 2], 1.0f64));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarRoot { .. })));
    }

    #[test]
    fn unused_param_has_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::full(vec![2], 1.0f64));
        let unused = tape.param(Tensor::full(vec![4], 3.0f64));
        let root = tape.sum(x);
        let grads = tape.backward(root).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.get_or_zeros(unused, &[4]).data(), &[0.0; 4]);
    }

    #[test]
    fn constant_subgraph_skipped() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::full(vec![2], 1.0f64));
        let c = tape.constant(Tensor::full(vec![2], 5.0f64));
        let y = tape.add(x, c).unwrap();
        let root = tape.sum(y);
        let grads = tape.backward(root).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0]);
    }

    // Finite-difference checks: each builds f as a closure over a flat input,
    // compares tape gradients against central differences.

    fn fd_check<F>(x0: &Tensor<f64>, tol: f64, f: F)
    where
        F: Fn(&mut Tape<f64>, NodeId) -> NodeId,
    {
        let analytic = {
            let mut tape = Tape::new();
            let x = tape.param(x0.clone());
            let root = f(&mut tape, x);
            tape.replay_check().unwrap();
            let grads = tape.backward(root).unwrap();
            grads.get(x).unwrap().clone()
        };
        let numeric = gradcheck::finite_diff_grad(x0, 1e-5, |xt| {
            let mut tape = Tape::new();
            let x = tape.param(xt.clone());
            let root = f(&mut tape, x);
            tape.value(root).item()
        });
        let err = gradcheck::max_rel_err(&analytic, &numeric);
        assert!(err <= tol, "max rel err {err}");
    }

    #[test]
    fn gradcheck_matmul_tanh() {
        let mut rng = crate::rng::Streams::from_root(11).stream("gc");
        let x0 = rand_tensor(&mut rng, vec![3, 4]);
        let w = rand_tensor(&mut rng, vec![4, 2]);
        fd_check(&x0, 1e-6, move |tape, x| {
            let wn = tape.constant(w.clone());
            let y = tape.matmul(x, wn).unwrap();
            let t = tape.tanh(y);
            tape.sum(t)
        });
    }

    #[test]
    fn gradcheck_gelu_ln_bias() {
        let mut rng = crate::rng::Streams::from_root(12).stream("gc");
        let x0 = rand_tensor(&mut rng, vec![2, 5]);
        let bias = rand_tensor(&mut rng, vec![5]);
        fd_check(&x0, 1e-6, move |tape, x| {
            let b = tape.constant(bias.clone());
            let xb = tape.add_bias(x, b).unwrap();
            let gl = tape.gelu(xb);
            // shift positive before ln
            let shifted = tape.scale(gl, 0.25);
            let offset = tape.constant(Tensor::full(vec![2, 5], 3.0f64));
            let pos = tape.add(shifted, offset).unwrap();
            let l = tape.ln(pos);
            tape.sum(l)
        });
    }

    #[test]
    fn gradcheck_masked_softmax() {
        use crate::mask::{build_mask, LeftContext, MaskSpec};
        let mut rng = crate::rng::Streams::from_root(13).stream("gc");
        let x0 = rand_tensor(&mut rng, vec![4, 4]);
        let spec = MaskSpec::new(2, LeftContext::Chunks(1), 1, 4).unwrap();
        let mask = build_mask(&spec);
        let probe = rand_tensor(&mut rng, vec![4, 4]);
        fd_check(&x0, 1e-6, move |tape, x| {
            let p = tape.masked_softmax(x, &mask).unwrap();
            let w = tape.constant(probe.clone());
            let weighted = tape.mul(p, w).unwrap();
            tape.sum(weighted)
        });
    }

    #[test]
    fn masked_scores_get_zero_gradient() {
        use crate::mask::{build_mask, LeftContext, MaskSpec};
        let mut rng = crate::rng::Streams::from_root(14).stream("gc");
        let x0 = rand_tensor(&mut rng, vec![4, 4]);
        let spec = MaskSpec::new(2, LeftContext::Chunks(0), 0, 4).unwrap();
        let mask = build_mask(&spec);
        let mut tape = Tape::new();
        let x = tape.param(x0);
        let p = tape.masked_softmax(x, &mask).unwrap();
        let root = tape.sum(p);
        let grads = tape.backward(root).unwrap();
        let gx = grads.get(x).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                if !mask.get(i, j) {
                    assert_eq!(gx.row(i)[j], 0.0, "({i},{j})");
                }
            }
        }
    }

    #[test]
    fn gradcheck_layer_norm_all_inputs() {
        let mut rng = crate::rng::Streams::from_root(15).stream("gc");
        let x0 = rand_tensor(&mut rng, vec![3, 6]);
        let gain0 = rand_tensor(&mut rng, vec![6]);
        let bias0 = rand_tensor(&mut rng, vec![6]);
        // x gradient
        {
            let (g, b) = (gain0.clone(), bias0.clone());
            fd_check(&x0, 1e-5, move |tape, x| {
                let gn = tape.constant(g.clone());
                let bn = tape.constant(b.clone());
                let y = tape.layer_norm(x, gn, bn).unwrap();
                let sq = tape.mul(y, y).unwrap();
                tape.sum(sq)
            });
        }
        // gain and bias gradients
        {
            let xc = x0.clone();
            let b = bias0.clone();
            fd_check(&gain0, 1e-6, move |tape, gain| {
                let xn = tape.constant(xc.clone());
                let bn = tape.constant(b.clone());
                let y = tape.layer_norm(xn, gain, bn).unwrap();
                let sq = tape.mul(y, y).unwrap();
                tape.sum(sq)
            });
        }
        {
            let xc = x0;
            let g = gain0;
            fd_check(&bias0, 1e-6, move |tape, bias| {
                let xn = tape.constant(xc.clone());
                let gn = tape.constant(g.clone());
                let y = tape.layer_norm(xn, gn, bias).unwrap();
                let sq = tape.mul(y, y).unwrap();
                tape.sum(sq)
            });
        }
    }

    #[test]
    fn gradcheck_conv1d_both_inputs() {
        let mut rng = crate::rng::Streams::from_root(16).stream("gc");
        let x0 = rand_tensor(&mut rng, vec![5, 3]);
        let k0 = rand_tensor(&mut rng, vec![2, 3, 4]);
        {
            let k = k0.clone();
            fd_check(&x0, 1e-6, move |tape, x| {
                let kn = tape.constant(k.clone());
                let y = tape.conv1d_causal(x, kn).unwrap();
                let t = tape.tanh(y);
                tape.sum(t)
            });
        }
        {
            let xc = x0;
            fd_check(&k0, 1e-6, move |tape, kernel| {
                let xn = tape.constant(xc.clone());
                let y = tape.conv1d_causal(xn, kernel).unwrap();
                let t = tape.tanh(y);
                tape.sum(t)
            });
        }
    }

    #[test]
    fn gradcheck_embedding_lattice_slice_concat() {
        let mut rng = crate::rng::Streams::from_root(17).stream("gc");
        let table0 = rand_tensor(&mut rng, vec![5, 4]);
        let enc = rand_tensor(&mut rng, vec![3, 4]);
        fd_check(&table0, 1e-6, move |tape, table| {
            let emb = tape.embedding(table, &[2, 0, 2]).unwrap();
            let e = tape.constant(enc.clone());
            let lat = tape.lattice_add(e, emb).unwrap();
            let left = tape.slice_cols(lat, 0, 2).unwrap();
            let right = tape.slice_cols(lat, 2, 2).unwrap();
            let glued = tape.concat_cols(&[left, right]).unwrap();
            let t = tape.tanh(glued);
            tape.sum(t)
        });
    }

    #[test]
    fn gradcheck_concat_rows() {
        let mut rng = crate::rng::Streams::from_root(18).stream("gc");
        let x0 = rand_tensor(&mut rng, vec![4, 3]);
        fd_check(&x0, 1e-6, |tape, x| {
            // Split rows via constants is awkward; instead duplicate x into two
            // row blocks and reduce, which still exercises ConcatRows backward.
            let glued = tape.concat_rows(&[x, x]).unwrap();
            let t = tape.gelu(glued);
            tape.sum(t)
        });
    }

    #[test]
    fn saved_grad_scales_by_upstream() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![2], vec![1.0f64, 2.0]).unwrap());
        let saved = Tensor::new(vec![2], vec![10.0f64, 20.0]).unwrap();
        let loss = tape.saved_grad(x, 7.0, saved).unwrap();
        let scaled = tape.scale(loss, 3.0);
        let grads = tape.backward(scaled).unwrap();
        assert_eq!(tape.value(scaled).item(), 21.0);
        assert_eq!(grads.get(x).unwrap().data(), &[30.0, 60.0]);
    }

    #[test]
    fn replay_detects_tampering() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::full(vec![2, 2], 1.0f64));
        let y = tape.tanh(x);
        let _ = tape.sum(y);
        tape.replay_check().unwrap();
        tape.nodes[1].value.data_mut()[0] = 99.0;
        assert!(tape.replay_check().is_err());
    }
}
