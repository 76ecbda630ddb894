//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation on a [`Var`] produces a new node that remembers its parents
//! and a closure computing the vector-Jacobian product. Nodes whose inputs do not
//! require gradients are stored as plain constants, so inference builds no graph.
//! [`Var::backward`] records the reachable nodes into a [`Tape`] in topological
//! order and walks it in reverse.

mod ops;

use std::cell::Cell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use ops::{Padding, TopkMode};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static CHECKED: Cell<bool> = const { Cell::new(false) };
    static MACS: Cell<u64> = const { Cell::new(0) };
}

/// Enable NaN/Inf detection on every operation output for the current thread.
pub fn set_checked(on: bool) {
    CHECKED.with(|c| c.set(on));
}

pub fn is_checked() -> bool {
    CHECKED.with(|c| c.get())
}

pub(crate) fn count_macs(n: u64) {
    MACS.with(|c| c.set(c.get() + n));
}

/// Run `f` and return the multiply-accumulates performed by matmul and conv
/// forward passes on this thread.
pub fn measure_macs<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = MACS.with(|c| c.get());
    let r = f();
    let after = MACS.with(|c| c.get());
    (r, after - before)
}

/// Vector-Jacobian product: `(grad_out, parents, out_value) -> grad per parent`.
/// Entries for parents that do not require gradients may be `None`.
pub type BackwardFn<T> = dyn Fn(&Tensor<T>, &[Var<T>], &Tensor<T>) -> Vec<Option<Tensor<T>>>;

struct Node<T: Scalar> {
    id: u64,
    op: &'static str,
    value: Tensor<T>,
    requires_grad: bool,
    parents: Vec<Var<T>>,
    backward: Option<Box<BackwardFn<T>>>,
}

/// A tensor participating in differentiation. Cloning is cheap.
pub struct Var<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({}, {:?})", self.0.id, self.0.op, self.0.value)
    }
}

impl<T: Scalar> Var<T> {
    fn leaf(value: Tensor<T>, requires_grad: bool) -> Self {
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            op: "leaf",
            value,
            requires_grad,
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// A leaf that receives a gradient.
    pub fn param(value: Tensor<T>) -> Self {
        Self::leaf(value, true)
    }

    /// A leaf that does not receive a gradient.
    pub fn constant(value: Tensor<T>) -> Self {
        Self::leaf(value, false)
    }

    /// Build a node from an already computed value. This is how every operation in
    /// this module is defined; it is public so callers can add their own.
    pub fn custom(
        op: &'static str,
        parents: Vec<Var<T>>,
        value: Tensor<T>,
        backward: impl Fn(&Tensor<T>, &[Var<T>], &Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Result<Self> {
        if is_checked() {
            value.check_finite(op)?;
        }
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let (parents, backward): (_, Option<Box<BackwardFn<T>>>) = if requires_grad {
            (parents, Some(Box::new(backward)))
        } else {
            (Vec::new(), None)
        };
        Ok(Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            op,
            value,
            requires_grad,
            parents,
            backward,
        })))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn op(&self) -> &'static str {
        self.0.op
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }

    /// Gradients of this scalar with respect to every reachable leaf.
    pub fn backward(&self) -> Result<Gradients<T>> {
        Tape::record(self).backward(self)
    }
}

/// The reachable part of a graph, in topological order (parents first).
pub struct Tape<T: Scalar> {
    nodes: Vec<Var<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn record(root: &Var<T>) -> Self {
        let mut seen = std::collections::HashSet::new();
        let mut nodes = Vec::new();
        let mut stack = vec![root.clone()];
        while let Some(v) = stack.pop() {
            if !v.requires_grad() || !seen.insert(v.id()) {
                continue;
            }
            stack.extend(v.0.parents.iter().cloned());
            nodes.push(v);
        }
        // ids are handed out at construction, so a parent always has a smaller id
        nodes.sort_by_key(|v| v.id());
        Self { nodes }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn ops(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.nodes.iter().map(|v| v.op())
    }

    pub fn backward(&self, root: &Var<T>) -> Result<Gradients<T>> {
        if root.value().len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape()
            )));
        }
        let mut pending: HashMap<u64, Tensor<T>> = HashMap::new();
        let mut leaves = HashMap::new();
        if !root.requires_grad() {
            return Ok(Gradients { grads: leaves });
        }
        pending.insert(root.id(), Tensor::full(root.shape().to_vec(), T::one())?);
        for node in self.nodes.iter().rev() {
            let Some(grad) = pending.remove(&node.id()) else {
                continue;
            };
            let Some(backward) = &node.0.backward else {
                leaves.insert(node.id(), grad);
                continue;
            };
            let parent_grads = backward(&grad, &node.0.parents, node.value());
            for (parent, g) in node.0.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !parent.requires_grad() {
                    continue;
                }
                debug_assert_eq!(g.shape(), parent.shape(), "gradient shape for {}", node.op());
                match pending.get_mut(&parent.id()) {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += *b;
                        }
                    }
                    None => {
                        pending.insert(parent.id(), g);
                    }
                }
            }
        }
        Ok(Gradients { grads: leaves })
    }
}

/// Leaf gradients keyed by node id.
pub struct Gradients<T: Scalar> {
    grads: HashMap<u64, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        self.grads.get(&var.id())
    }

    /// Gradient for `var`, zeros when it was not reached.
    pub fn wrt(&self, var: &Var<T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::full(var.shape().to_vec(), T::zero()).unwrap())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
