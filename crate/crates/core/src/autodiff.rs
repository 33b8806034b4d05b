//! Reverse-mode gradient tape.
//!
//! Every forward op appends a node holding its output value, the handles of
//! its inputs and a backward rule. Nodes are only ever appended, so creation
//! order is a topological order and reverse creation order is a valid
//! backward schedule.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    index: usize,
    tape: u64,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({}@{})", self.index, self.tape)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Conv2d,
    MaxPool2x2,
    MaxUnpool2x2,
    UpsampleNearest2x,
    ConcatChannels,
    BatchNorm2d,
    Relu,
    Sigmoid,
    AddScaled,
    Sum,
    WeightedSum,
    Custom(&'static str),
}

/// Backward rule of one node: maps the output gradient to one optional
/// gradient per input (in input order).
pub trait Backward<T: Float> {
    fn backward(
        &self,
        grad_out: &Tensor<T>,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>>;
}

impl<T, F> Backward<T> for F
where
    T: Float,
    F: Fn(&Tensor<T>, &[&Tensor<T>], &Tensor<T>) -> Vec<Option<Tensor<T>>>,
{
    fn backward(
        &self,
        grad_out: &Tensor<T>,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>> {
        self(grad_out, inputs, output)
    }
}

struct Node<T: Float> {
    kind: OpKind,
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    inputs: Vec<Var>,
    rule: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BackwardStats {
    /// Nodes whose backward rule ran (or leaves that received a gradient).
    pub visited: usize,
}

pub struct Tape<T: Float> {
    id: u64,
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), grad_enabled: true }
    }

    /// A tape that records values only; no backward rules are kept.
    pub fn no_grad() -> Self {
        Tape { grad_enabled: false, ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. `requires_grad` leaves accumulate gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        self.append(Node { kind: OpKind::Leaf, value, grad: None, inputs: Vec::new(), rule: None, requires_grad })
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Records the output of an op. The rule is dropped when no input needs
    /// a gradient.
    pub fn push(
        &mut self,
        kind: OpKind,
        value: Tensor<T>,
        inputs: &[Var],
        rule: impl Backward<T> + 'static,
    ) -> Var {
        for v in inputs {
            self.check(*v);
        }
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.index].requires_grad);
        let rule: Option<Box<dyn Backward<T>>> = if requires_grad { Some(Box::new(rule)) } else { None };
        self.append(Node { kind, value, grad: None, inputs: inputs.to_vec(), rule, requires_grad })
    }

    fn append(&mut self, node: Node<T>) -> Var {
        self.nodes.push(node);
        Var { index: self.nodes.len() - 1, tape: self.id }
    }

    fn check(&self, v: Var) {
        assert_eq!(v.tape, self.id, "{v:?} belongs to a different tape");
    }

    fn owns(&self, v: Var) -> bool {
        v.tape == self.id && v.index < self.nodes.len()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.check(v);
        &self.nodes[v.index].value
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.check(v);
        self.nodes[v.index].kind
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.check(v);
        self.nodes[v.index].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.check(v);
        self.nodes[v.index].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.check(v);
        self.nodes[v.index].grad.take()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Back-propagates from a scalar root with seed gradient 1.
    pub fn backward(&mut self, root: Var) -> Result<BackwardStats> {
        if !self.owns(root) {
            return Err(Error::Usage(format!("{root:?} is not recorded on this tape")));
        }
        let shape = self.nodes[root.index].value.shape();
        if shape.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {shape}; use backward_with"
            )));
        }
        self.backward_with(root, Tensor::ones(shape))
    }

    pub fn backward_with(&mut self, root: Var, seed: Tensor<T>) -> Result<BackwardStats> {
        if !self.owns(root) {
            return Err(Error::Usage(format!("{root:?} is not recorded on this tape")));
        }
        let node = &self.nodes[root.index];
        if !node.requires_grad {
            return Err(Error::Usage("backward called on a value with no gradient path".into()));
        }
        if seed.shape() != node.value.shape() {
            return Err(Error::Shape(format!(
                "seed shape {} does not match root shape {}",
                seed.shape(),
                node.value.shape()
            )));
        }
        accumulate(&mut self.nodes[root.index].grad, seed);

        let mut stats = BackwardStats::default();
        for i in (0..=root.index).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            let Some(grad) = node.grad.as_ref() else { continue };
            stats.visited += 1;
            let Some(rule) = node.rule.as_ref() else { continue };

            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|v| &before[v.index].value).collect();
            let grads = rule.backward(grad, &inputs, &node.value);
            debug_assert_eq!(grads.len(), node.inputs.len(), "{:?} returned wrong arity", node.kind);
            drop(inputs);

            for (v, g) in node.inputs.iter().zip(grads) {
                let target = &mut before[v.index];
                if let Some(g) = g {
                    if target.requires_grad {
                        debug_assert_eq!(g.shape(), target.value.shape(), "{:?} grad shape", node.kind);
                        accumulate(&mut target.grad, g);
                    }
                }
            }
            // intermediate gradients are not needed once propagated
            node.grad = None;
        }
        Ok(stats)
    }
}

fn accumulate<T: Float>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;

    #[test]
    fn backward_of_sum_is_all_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn([1, 2, 2, 2], |i| i as f64 - 3.0), true);
        let s = ops::sum(&mut tape, x);
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn([1, 1, 3, 3], |i| i as f64), true);
        let y = ops::add_scaled(&mut tape, x, x, 1.0).unwrap();
        let s = ops::sum(&mut tape, y);
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 2.0));
    }

    #[test]
    fn backward_without_gradient_path_is_usage_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones([1, 1, 1, 1]));
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));

        let mut other = Tape::<f32>::new();
        let y = other.leaf(Tensor::ones([1, 1, 1, 1]), true);
        assert!(matches!(tape.backward(y), Err(Error::Usage(_))));
    }

    #[test]
    fn non_scalar_root_needs_seed() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones([1, 1, 2, 2]), true);
        let y = ops::relu(&mut tape, x);
        assert!(tape.backward(y).is_err());
        tape.backward_with(y, Tensor::full([1, 1, 2, 2], 3.0)).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[3.0; 4]);
    }

    #[test]
    fn each_node_visited_once_and_rerun_is_identical() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn([1, 1, 4, 4], |i| (i as f64 * 0.37).sin()), true);
        let a = ops::relu(&mut tape, x);
        let b = ops::sigmoid(&mut tape, x);
        let c = ops::add_scaled(&mut tape, a, b, 0.5).unwrap();
        let s = ops::sum(&mut tape, c);
        let stats = tape.backward(s).unwrap();
        assert_eq!(stats.visited, tape.len());
        let first = tape.grad(x).unwrap().clone();
        tape.zero_grads();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &first);
    }

    #[test]
    fn no_grad_tape_keeps_no_rules() {
        let mut tape = Tape::<f32>::no_grad();
        let x = tape.leaf(Tensor::ones([1, 1, 2, 2]), true);
        assert!(!tape.requires_grad(x));
        let s = ops::sum(&mut tape, x);
        assert!(tape.backward(s).is_err());
    }
}
