//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as it is evaluated. Node ids are
//! assigned in creation order, so they are already a topological order and
//! [`Graph::backward`] simply walks them in reverse, summing adjoints at
//! fan-out points.

mod check;
pub mod suite;

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{self, Mode};
use crate::tensor::{Scalar, Tensor};

pub use check::{grad_check, GradCheckReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafKind {
    /// Data; no gradient is computed for it.
    Constant,
    /// Trainable; gradients are returned by [`Graph::backward`].
    Parameter,
    /// Not trainable, but its gradient can be queried (used for Grad-CAM).
    Tracked,
}

#[derive(Clone, Debug)]
pub enum Op<T> {
    Leaf(LeafKind),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Relu(NodeId),
    MaxScalar(NodeId, T),
    Sum(NodeId),
    Mean {
        input: NodeId,
        axes: Vec<usize>,
    },
    Reshape(NodeId),
    MatMul(NodeId, NodeId),
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: usize,
    },
    DepthwiseConv2d {
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
    },
    AvgPool2d {
        input: NodeId,
        k: usize,
    },
    GlobalAvgPool(NodeId),
    Gwap {
        input: NodeId,
        kernel: NodeId,
    },
    Dense {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    /// The mask (already scaled by `1/(1-p)`) is fixed at record time.
    Dropout {
        input: NodeId,
        mask: Tensor<T>,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
    },
    /// Sum over the batch of one column of a `[n, k]` tensor.
    PickColumn {
        input: NodeId,
        column: usize,
    },
}

impl<T> Op<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::MaxScalar(..) => "max_scalar",
            Op::Sum(_) => "sum",
            Op::Mean { .. } => "reduce_mean",
            Op::Reshape(_) => "reshape",
            Op::MatMul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::DepthwiseConv2d { .. } => "depthwise_conv2d",
            Op::AvgPool2d { .. } => "avg_pool2d",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Gwap { .. } => "gwap",
            Op::Dense { .. } => "dense",
            Op::Dropout { .. } => "dropout",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::PickColumn { .. } => "pick_column",
        }
    }

    pub fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf(_) => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::MaxScalar(a, _)
            | Op::Sum(a)
            | Op::Reshape(a)
            | Op::GlobalAvgPool(a) => vec![*a],
            Op::Mean { input, .. }
            | Op::AvgPool2d { input, .. }
            | Op::Dropout { input, .. }
            | Op::PickColumn { input, .. } => vec![*input],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            Op::Conv2d {
                input, kernel, bias, ..
            }
            | Op::DepthwiseConv2d {
                input, kernel, bias, ..
            } => {
                let mut v = vec![*input, *kernel];
                v.extend(bias);
                v
            }
            Op::Gwap { input, kernel } => vec![*input, *kernel],
            Op::Dense { input, weight, bias } => vec![*input, *weight, *bias],
        }
    }
}

/// Every operation kind that has an adjoint, by name.
pub const DIFFERENTIABLE_OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "max_scalar",
    "sum",
    "reduce_mean",
    "reshape",
    "matmul",
    "conv2d",
    "depthwise_conv2d",
    "avg_pool2d",
    "global_avg_pool",
    "gwap",
    "dense",
    "dropout",
    "softmax_cross_entropy",
    "pick_column",
];

#[derive(Clone, Debug)]
pub struct Node<T> {
    pub id: NodeId,
    pub op: Op<T>,
    pub value: Tensor<T>,
    requires_grad: bool,
}

impl<T> Node<T> {
    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
}

/// Append-only operation record.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    fault: Option<String>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient of a scalar loss with respect to each requested node.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    map: HashMap<NodeId, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.map.get(&id)
    }

    /// Gradient for `id`, or an error if the node was not differentiated.
    pub fn expect(&self, id: NodeId) -> Result<&Tensor<T>> {
        self.map
            .get(&id)
            .ok_or_else(|| Error::contract(format!("no gradient recorded for node {}", id.0)))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node<T> {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn parameters(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Leaf(LeafKind::Parameter)))
            .map(|n| n.id)
            .collect()
    }

    /// Corrupt the adjoint of every op named `op` (scaled by 1.5). Used to
    /// prove that gradient checking detects a wrong backward rule.
    #[doc(hidden)]
    pub fn inject_adjoint_fault(&mut self, op: &str) {
        self.fault = Some(op.to_string());
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Result<NodeId> {
        let value = value.ensure_finite(op.name())?;
        let requires_grad = match &op {
            Op::Leaf(kind) => *kind != LeafKind::Constant,
            other => other.inputs().iter().any(|i| self.nodes[i.0].requires_grad),
        };
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            id,
            op,
            value,
            requires_grad,
        });
        Ok(id)
    }

    pub fn leaf(&mut self, kind: LeafKind, value: Tensor<T>) -> Result<NodeId> {
        self.push(Op::Leaf(kind), value)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.leaf(LeafKind::Constant, value)
    }

    pub fn parameter(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.leaf(LeafKind::Parameter, value)
    }

    pub fn tracked(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.leaf(LeafKind::Tracked, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        self.push(Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> Result<NodeId> {
        let v = self.value(a).scale(factor)?;
        self.push(Op::Scale(a, factor), v)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).relu();
        self.push(Op::Relu(a), v)
    }

    pub fn max_scalar(&mut self, a: NodeId, floor: T) -> Result<NodeId> {
        let v = self.value(a).max_scalar(floor);
        self.push(Op::MaxScalar(a, floor), v)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).sum_all());
        self.push(Op::Sum(a), v)
    }

    pub fn reduce_mean(&mut self, a: NodeId, axes: &[usize]) -> Result<NodeId> {
        let v = self.value(a).reduce_mean(axes)?;
        self.push(
            Op::Mean {
                input: a,
                axes: axes.to_vec(),
            },
            v,
        )
    }

    pub fn reshape(&mut self, a: NodeId, dims: impl Into<Vec<usize>>) -> Result<NodeId> {
        let v = self.value(a).reshape(dims)?;
        self.push(Op::Reshape(a), v)
    }

    /// `[n, ...] -> [n, prod(...)]`
    pub fn flatten(&mut self, a: NodeId) -> Result<NodeId> {
        let dims = self.value(a).dims();
        let n = *dims.first().ok_or_else(|| Error::shape("flatten of a scalar"))?;
        let rest: usize = dims[1..].iter().product();
        self.reshape(a, [n, rest])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul(a, b), v)
    }

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, bias: Option<NodeId>, stride: usize) -> Result<NodeId> {
        let v = nn::conv2d_forward(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            stride,
        )?;
        self.push(
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
            },
            v,
        )
    }

    pub fn depthwise_conv2d(&mut self, input: NodeId, kernel: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let v = nn::depthwise_conv2d_forward(self.value(input), self.value(kernel), bias.map(|b| self.value(b)))?;
        self.push(Op::DepthwiseConv2d { input, kernel, bias }, v)
    }

    pub fn avg_pool2d(&mut self, input: NodeId, k: usize) -> Result<NodeId> {
        let v = nn::avg_pool2d_forward(self.value(input), k)?;
        self.push(Op::AvgPool2d { input, k }, v)
    }

    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let v = nn::global_avg_pool_forward(self.value(input))?;
        self.push(Op::GlobalAvgPool(input), v)
    }

    pub fn gwap(&mut self, input: NodeId, kernel: NodeId) -> Result<NodeId> {
        let v = nn::gwap_forward(self.value(input), self.value(kernel))?;
        self.push(Op::Gwap { input, kernel }, v)
    }

    pub fn dense(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = nn::dense_forward(self.value(input), self.value(weight), self.value(bias))?;
        self.push(Op::Dense { input, weight, bias }, v)
    }

    pub fn dropout<R: Rng + ?Sized>(&mut self, input: NodeId, p: f64, mode: Mode, rng: &mut R) -> Result<NodeId> {
        let mask = nn::dropout_mask(self.value(input).dims(), p, mode, rng)?;
        let v = self.value(input).mul(&mask)?;
        self.push(Op::Dropout { input, mask }, v)
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let loss = nn::softmax_cross_entropy(self.value(logits), labels)?;
        self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            Tensor::scalar(loss),
        )
    }

    pub fn pick_column(&mut self, input: NodeId, column: usize) -> Result<NodeId> {
        let x = self.value(input);
        let &[_, k] = x.dims() else {
            return Err(Error::shape(format!("pick_column of {}", x.shape())));
        };
        if column >= k {
            return Err(Error::shape(format!("column {column} out of range for width {k}")));
        }
        let mut acc = T::zero();
        for row in x.data().chunks(k) {
            acc += row[column];
        }
        self.push(Op::PickColumn { input, column }, Tensor::scalar(acc))
    }

    /// Gradients of `loss` with respect to every trainable parameter.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let grads = self.propagate(loss)?;
        let map = self
            .nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Leaf(LeafKind::Parameter)))
            .map(|n| {
                let g = grads[n.id.0].clone().unwrap_or_else(|| n.value.zeros_like());
                (n.id, g)
            })
            .collect();
        Ok(Gradients { map })
    }

    /// Gradients of `loss` with respect to arbitrary nodes. Nodes that do not
    /// influence the loss get zeros; constants are rejected.
    pub fn gradients_for(&self, loss: NodeId, wrt: &[NodeId]) -> Result<Gradients<T>> {
        let grads = self.propagate(loss)?;
        let mut map = HashMap::new();
        for &id in wrt {
            let node = &self.nodes[id.0];
            if !node.requires_grad {
                return Err(Error::contract(format!(
                    "node {} ({}) does not carry gradients",
                    id.0,
                    node.op.name()
                )));
            }
            let g = grads[id.0].clone().unwrap_or_else(|| node.value.zeros_like());
            map.insert(id, g);
        }
        Ok(Gradients { map })
    }

    fn propagate(&self, loss: NodeId) -> Result<Vec<Option<Tensor<T>>>> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, node {} has shape {}",
                loss.0,
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(root.value.dims().to_vec(), T::one())?);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let mut contributions = self.adjoint(node, &upstream)?;
            if self.fault.as_deref() == Some(node.op.name()) {
                for (_, g) in contributions.iter_mut().take(1) {
                    *g = g.scale(T::of(1.5))?;
                }
            }
            for (input, g) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
            grads[idx] = Some(upstream);
        }
        Ok(grads)
    }

    /// Adjoint of one node: `(input, d loss / d input)` pairs.
    fn adjoint(&self, node: &Node<T>, dy: &Tensor<T>) -> Result<Vec<(NodeId, Tensor<T>)>> {
        let v = |id: NodeId| &self.nodes[id.0].value;
        Ok(match &node.op {
            Op::Leaf(_) => vec![],
            Op::Add(a, b) => vec![(*a, unbroadcast(dy, v(*a))?), (*b, unbroadcast(dy, v(*b))?)],
            Op::Sub(a, b) => vec![
                (*a, unbroadcast(dy, v(*a))?),
                (*b, unbroadcast(&dy.scale(-T::one())?, v(*b))?),
            ],
            Op::Mul(a, b) => {
                let da = dy.mul(v(*b))?;
                let db = dy.mul(v(*a))?;
                vec![(*a, unbroadcast(&da, v(*a))?), (*b, unbroadcast(&db, v(*b))?)]
            }
            Op::Scale(a, f) => vec![(*a, dy.scale(*f)?)],
            Op::Relu(a) => {
                let x = v(*a);
                let g = Tensor::new(
                    x.dims().to_vec(),
                    x.data()
                        .iter()
                        .zip(dy.data())
                        .map(|(&xi, &gi)| if xi > T::zero() { gi } else { T::zero() })
                        .collect(),
                )?;
                vec![(*a, g)]
            }
            Op::MaxScalar(a, floor) => {
                let x = v(*a);
                let g = Tensor::new(
                    x.dims().to_vec(),
                    x.data()
                        .iter()
                        .zip(dy.data())
                        .map(|(&xi, &gi)| if xi > *floor { gi } else { T::zero() })
                        .collect(),
                )?;
                vec![(*a, g)]
            }
            Op::Sum(a) => {
                let g = dy.item()?;
                vec![(*a, Tensor::full(v(*a).dims().to_vec(), g)?)]
            }
            Op::Mean { input, axes } => vec![(*input, mean_adjoint(v(*input), axes, dy)?)],
            Op::Reshape(a) => vec![(*a, dy.reshape(v(*a).dims().to_vec())?)],
            Op::MatMul(a, b) => vec![
                (*a, dy.matmul(&v(*b).transpose2()?)?),
                (*b, v(*a).transpose2()?.matmul(dy)?),
            ],
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
            } => {
                let (dx, dk, db) = nn::conv2d_backward(v(*input), v(*kernel), *stride, dy)?;
                let mut out = vec![(*input, dx), (*kernel, dk)];
                if let Some(b) = bias {
                    out.push((*b, db));
                }
                out
            }
            Op::DepthwiseConv2d { input, kernel, bias } => {
                let (dx, dk, db) = nn::depthwise_conv2d_backward(v(*input), v(*kernel), dy)?;
                let mut out = vec![(*input, dx), (*kernel, dk)];
                if let Some(b) = bias {
                    out.push((*b, db));
                }
                out
            }
            Op::AvgPool2d { input, k } => {
                vec![(*input, nn::avg_pool2d_backward(v(*input).dims(), *k, dy)?)]
            }
            Op::GlobalAvgPool(input) => {
                vec![(*input, nn::global_avg_pool_backward(v(*input).dims(), dy)?)]
            }
            Op::Gwap { input, kernel } => {
                let (dx, dk) = nn::gwap_backward(v(*input), v(*kernel), dy)?;
                vec![(*input, dx), (*kernel, dk)]
            }
            Op::Dense { input, weight, bias } => {
                let (dx, dw, db) = nn::dense_backward(v(*input), v(*weight), dy)?;
                vec![(*input, dx), (*weight, dw), (*bias, db)]
            }
            Op::Dropout { input, mask } => vec![(*input, dy.mul(mask)?)],
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let g = nn::softmax_cross_entropy_backward(v(*logits), labels)?;
                vec![(*logits, g.scale(dy.item()?)?)]
            }
            Op::PickColumn { input, column } => {
                let x = v(*input);
                let k = x.dims()[1];
                let mut g = x.zeros_like();
                let s = dy.item()?;
                for row in g.data_mut().chunks_mut(k) {
                    row[*column] = s;
                }
                vec![(*input, g)]
            }
        })
    }
}

/// Reduce a gradient back to the shape of an operand that was scalar-broadcast.
fn unbroadcast<T: Scalar>(g: &Tensor<T>, operand: &Tensor<T>) -> Result<Tensor<T>> {
    if g.shape() == operand.shape() {
        Ok(g.clone())
    } else if operand.len() == 1 {
        Tensor::new(operand.dims().to_vec(), vec![g.sum_all()])
    } else {
        Err(Error::shape(format!(
            "cannot reduce gradient {} to operand {}",
            g.shape(),
            operand.shape()
        )))
    }
}

fn mean_adjoint<T: Scalar>(x: &Tensor<T>, axes: &[usize], dy: &Tensor<T>) -> Result<Tensor<T>> {
    let dims = x.dims();
    let count: usize = axes.iter().map(|&a| dims[a]).product();
    let inv = T::one() / T::of(count as f64);
    let mut out = x.zeros_like();
    let mut index = vec![0usize; dims.len()];
    for slot in out.data_mut() {
        let mut o = 0;
        for (axis, &i) in index.iter().enumerate() {
            if !axes.contains(&axis) {
                o = o * dims[axis] + i;
            }
        }
        *slot = dy.data()[o] * inv;
        for axis in (0..dims.len()).rev() {
            index[axis] += 1;
            if index[axis] < dims[axis] {
                break;
            }
            index[axis] = 0;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(dims.to_vec(), data).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let w = g.parameter(t(&[3], &[0.2, -1.0, 4.0])).unwrap();
        let s = g.sum(w).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.expect(w).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let w = g.parameter(t(&[2], &[1.0, 2.0])).unwrap();
        let sq = g.mul(w, w).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.expect(w).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn disconnected_parameter_gets_zeros() {
        let mut g = Graph::new();
        let w = g.parameter(t(&[2], &[1.0, 2.0])).unwrap();
        let c = g.constant(t(&[], &[5.0])).unwrap();
        let loss = g.scale(c, 2.0).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.expect(w).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let w = g.parameter(t(&[2], &[1.0, 2.0])).unwrap();
        let c = g.constant(t(&[2], &[3.0, 4.0])).unwrap();
        let p = g.mul(w, c).unwrap();
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.len(), 1);
        assert!(grads.get(c).is_none());
        assert!(g.gradients_for(s, &[c]).is_err());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let w = g.parameter(t(&[2], &[1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(w) + sum(3 w) -> grad 4
        let mut g = Graph::new();
        let w = g.parameter(t(&[2], &[1.0, -2.0])).unwrap();
        let a = g.sum(w).unwrap();
        let w3 = g.scale(w, 3.0).unwrap();
        let b = g.sum(w3).unwrap();
        let l = g.add(a, b).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.expect(w).unwrap().data(), &[4.0, 4.0]);
    }

    #[test]
    fn backward_is_repeatable() {
        let mut g = Graph::new();
        let w = g.parameter(t(&[3], &[0.5, -0.25, 2.0])).unwrap();
        let r = g.relu(w).unwrap();
        let sq = g.mul(r, w).unwrap();
        let s = g.sum(sq).unwrap();
        assert_eq!(g.backward(s).unwrap(), g.backward(s).unwrap());
    }

    #[test]
    fn scalar_broadcast_gradient_sums() {
        let mut g = Graph::new();
        let w = g.parameter(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let b = g.parameter(t(&[], &[0.5])).unwrap();
        let y = g.mul(w, b).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.expect(b).unwrap().data(), &[6.0]);
        assert_eq!(grads.expect(w).unwrap().data(), &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn tracked_leaf_gradient() {
        let mut g = Graph::new();
        let x = g.tracked(t(&[1, 2], &[1.0, 2.0])).unwrap();
        let w = g.parameter(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let y = g.matmul(x, w).unwrap();
        let l = g.pick_column(y, 1).unwrap();
        let grads = g.gradients_for(l, &[x]).unwrap();
        assert_eq!(grads.expect(x).unwrap().data(), &[2.0, 4.0]);
        assert!(g.backward(l).unwrap().get(x).is_none());
    }

    #[test]
    fn non_finite_values_are_errors() {
        let mut g = Graph::<f64>::new();
        assert!(matches!(g.constant(t(&[1], &[f64::NAN])), Err(Error::Numeric(_))));
    }
}
