//! Tape of recorded operations and the reverse sweep over it.

use std::cell::{Cell, RefCell};

use crate::error::{Result, TensorError};
use crate::ops::{self, Op};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
}

impl Var {
    pub fn id(self) -> usize {
        self.id
    }
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    inputs: Vec<usize>,
    value: Option<Tensor<T>>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Append-only computation graph.
///
/// Nodes are pushed in execution order, so the node list is always a valid
/// topological order. Leaves hold parameters, inputs and constants; every
/// other node records the op and the indices of its inputs. Values of
/// intermediate nodes are the saved state for the backward pass and are
/// dropped by [`Graph::backward`]; use [`Graph::backward_retain`] to keep
/// them for another pass.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
    freed: Cell<bool>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: RefCell::new(Vec::new()), freed: Cell::new(false) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_freed(&self) -> bool {
        self.freed.get()
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op: Op::Leaf, inputs: Vec::new(), value: Some(value), requires_grad, grad: None });
        Var { id: nodes.len() - 1 }
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Result<Tensor<T>> {
        self.with_value(v, Tensor::clone)
    }

    /// Borrows a node's value without cloning it.
    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor<T>) -> R) -> Result<R> {
        let nodes = self.nodes.borrow();
        let node = nodes.get(v.id).ok_or_else(|| TensorError::invalid("unknown variable"))?;
        node.value.as_ref().map(f).ok_or(TensorError::GraphFreed)
    }

    pub fn shape(&self, v: Var) -> Result<Vec<usize>> {
        self.with_value(v, |t| t.shape().to_vec())
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> Result<T> {
        self.with_value(v, Tensor::item)?
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow().get(v.id).is_some_and(|n| n.requires_grad)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.nodes.borrow().get(v.id).and_then(|n| n.grad.clone())
    }

    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    /// Tag of the op that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes.borrow().get(v.id).map_or("unknown", |n| n.op.name())
    }

    /// Input ids of the node producing `v`.
    pub fn inputs_of(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow().get(v.id).map(|n| n.inputs.clone()).unwrap_or_default()
    }

    fn push(&self, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        let (value, requires_grad) = {
            let nodes = self.nodes.borrow();
            let mut values = Vec::with_capacity(inputs.len());
            let mut requires_grad = false;
            for v in inputs {
                let node = nodes.get(v.id).ok_or_else(|| TensorError::invalid("unknown variable"))?;
                values.push(node.value.as_ref().ok_or(TensorError::GraphFreed)?);
                requires_grad |= node.requires_grad;
            }
            (ops::forward(&op, &values)?, requires_grad)
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            inputs: inputs.iter().map(|v| v.id).collect(),
            value: Some(value),
            requires_grad,
            grad: None,
        });
        Ok(Var { id: nodes.len() - 1 })
    }

    /// `input` C_in×H×W, `weights` C_out×C_in×k×k, `bias` C_out.
    pub fn conv2d(&self, input: Var, weights: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        self.push(Op::Conv2d { stride, padding }, &[input, weights, bias])
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        self.push(Op::Relu, &[x])
    }

    /// Per-pixel cosine similarity between C×H×W features and a C-vector.
    pub fn cosine_map(&self, features: Var, prototype: Var) -> Result<Var> {
        self.push(Op::CosineMap, &[features, prototype])
    }

    /// Two-way softmax over (t·fg, t·bg), stacked as 2×H×W.
    pub fn fgbg_softmax(&self, fg_sim: Var, bg_sim: Var, temperature: T) -> Result<Var> {
        self.push(Op::FgBgSoftmax { temperature }, &[fg_sim, bg_sim])
    }

    /// Mean binary cross entropy against a constant (possibly soft) target.
    pub fn bce_loss(&self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        self.push(Op::Bce { target: target.clone() }, &[pred])
    }

    /// Σ_p F[:,p]·m[p] / max(Σ_p m[p], ε).
    pub fn masked_avg(&self, features: Var, mask: Var) -> Result<Var> {
        self.push(Op::MaskedAvg, &[features, mask])
    }

    /// Slice along the leading dimension.
    pub fn channel(&self, x: Var, index: usize) -> Result<Var> {
        self.push(Op::Channel { index }, &[x])
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add, &[a, b])
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub, &[a, b])
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul, &[a, b])
    }

    pub fn affine(&self, x: Var, scale: T, shift: T) -> Result<Var> {
        self.push(Op::Affine { scale, shift }, &[x])
    }

    pub fn scale(&self, x: Var, factor: T) -> Result<Var> {
        self.affine(x, factor, T::zero())
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&self, x: Var, factor: &Tensor<T>) -> Result<Var> {
        self.push(Op::MulConst { factor: factor.clone() }, &[x])
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        self.push(Op::Sum, &[x])
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        self.push(Op::Mean, &[x])
    }

    /// Sum of several same-shaped values; `None` for an empty list.
    pub fn add_all(&self, vars: &[Var]) -> Result<Option<Var>> {
        let Some((&first, rest)) = vars.split_first() else { return Ok(None) };
        let mut acc = first;
        for &v in rest {
            acc = self.add(acc, v)?;
        }
        Ok(Some(acc))
    }

    /// Reverse sweep from a scalar, then frees intermediate state.
    pub fn backward(&self, loss: Var) -> Result<()> {
        self.sweep(loss)?;
        self.free();
        Ok(())
    }

    /// Reverse sweep that keeps the graph for further passes.
    ///
    /// Gradients accumulate into leaves across calls until [`Graph::zero_grad`].
    pub fn backward_retain(&self, loss: Var) -> Result<()> {
        self.sweep(loss)
    }

    fn sweep(&self, loss: Var) -> Result<()> {
        if self.freed.get() {
            return Err(TensorError::GraphFreed);
        }
        let mut nodes = self.nodes.borrow_mut();
        let root = nodes.get(loss.id).ok_or_else(|| TensorError::invalid("unknown variable"))?;
        let root_value = root.value.as_ref().ok_or(TensorError::GraphFreed)?;
        if root_value.numel() != 1 {
            return Err(TensorError::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                root_value.shape()
            )));
        }
        let mut pending: Vec<Option<Tensor<T>>> = vec![None; loss.id + 1];
        pending[loss.id] = Some(Tensor::full(root_value.shape(), T::one()));

        for id in (0..=loss.id).rev() {
            let Some(gout) = pending[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let node = &mut nodes[id];
                match node.grad.as_mut() {
                    Some(g) => g.add_assign(&gout),
                    None => node.grad = Some(gout),
                }
                continue;
            }
            let inputs: Vec<&Tensor<T>> = node
                .inputs
                .iter()
                .map(|&i| nodes[i].value.as_ref().ok_or(TensorError::GraphFreed))
                .collect::<Result<_>>()?;
            let needs: Vec<bool> = node.inputs.iter().map(|&i| nodes[i].requires_grad).collect();
            let output = node.value.as_ref().ok_or(TensorError::GraphFreed)?;
            let grads = ops::backward(&node.op, &inputs, output, &gout, &needs)?;
            let input_ids = node.inputs.clone();
            for (i, g) in input_ids.into_iter().zip(grads) {
                let Some(g) = g else { continue };
                match pending[i].as_mut() {
                    Some(acc) => acc.add_assign(&g),
                    None => pending[i] = Some(g),
                }
            }
        }
        Ok(())
    }

    fn free(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            if !matches!(node.op, Op::Leaf) {
                node.op = Op::Freed;
                node.value = None;
            }
        }
        self.freed.set(true);
    }

    /// Recomputes every non-leaf node from the leaves and reports whether
    /// each recomputed value is bit-identical to the recorded one.
    pub fn replay_matches(&self) -> Result<bool> {
        if self.freed.get() {
            return Err(TensorError::GraphFreed);
        }
        let nodes = self.nodes.borrow();
        let mut replayed: Vec<Option<Tensor<T>>> = Vec::with_capacity(nodes.len());
        for node in nodes.iter() {
            let value = match node.op {
                Op::Leaf => node.value.clone(),
                _ => {
                    let inputs: Vec<&Tensor<T>> = node
                        .inputs
                        .iter()
                        .map(|&i| replayed[i].as_ref().ok_or(TensorError::GraphFreed))
                        .collect::<Result<_>>()?;
                    let v = ops::forward(&node.op, &inputs)?;
                    let recorded = node.value.as_ref().ok_or(TensorError::GraphFreed)?;
                    let same = v.shape() == recorded.shape()
                        && v.data().iter().zip(recorded.data()).all(|(a, b)| a.to_bits_eq(b));
                    if !same {
                        return Ok(false);
                    }
                    Some(v)
                }
            };
            replayed.push(value);
        }
        Ok(true)
    }

    /// Checks that every node's inputs precede it.
    pub fn is_topologically_ordered(&self) -> bool {
        self.nodes.borrow().iter().enumerate().all(|(id, n)| n.inputs.iter().all(|&i| i < id))
    }
}

trait BitsEq {
    fn to_bits_eq(&self, other: &Self) -> bool;
}

impl<T: Real> BitsEq for T {
    fn to_bits_eq(&self, other: &Self) -> bool {
        // NaN payloads aside, equal bit patterns are what replay promises.
        self.to_f64c().to_bits() == other.to_f64c().to_bits()
    }
}
