//! Reverse-mode gradient tape.
//!
//! Every differentiable op appends a node holding its forward value and a
//! closure mapping the upstream gradient to gradients for each parent.
//! Nodes are appended after their parents, so reverse insertion order is a
//! valid topological order for the backward sweep.

use std::cell::Cell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Maps the upstream gradient to one optional gradient per parent. The flag
/// slice says which parents actually need a gradient.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    kind: &'static str,
    value: Rc<Tensor<T>>,
    parents: Vec<Var>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

thread_local! {
    static CORRUPT: Cell<Option<&'static str>> = const { Cell::new(None) };
}

/// Test hook: while set, gradients leaving nodes of the named op kind are
/// scaled by 1.1. Used to prove the gradient checker catches broken rules.
pub fn set_backward_corruption(kind: Option<&'static str>) {
    CORRUPT.with(|c| c.set(kind));
}

/// A gradient tape. One tape per thread; frozen-model inference can use a
/// tape with gradients disabled, which records values only.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that never records backward rules.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
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

    /// Tracked leaf (parameter or input we want gradients for).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let requires_grad = self.grad_enabled;
        self.push_node("leaf", Rc::new(value), Vec::new(), None, requires_grad)
    }

    /// Untracked input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_node("const", Rc::new(value), Vec::new(), None, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.dims()
    }

    pub(crate) fn shared(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn kind(&self, v: Var) -> &'static str {
        self.nodes[v.0].kind
    }

    /// Appends an op node. The backward closure is built lazily so that
    /// untracked subgraphs never capture saved activations.
    pub(crate) fn push<F>(
        &mut self,
        kind: &'static str,
        value: Tensor<T>,
        parents: Vec<Var>,
        make_backward: F,
    ) -> Var
    where
        F: FnOnce() -> BackwardFn<T>,
    {
        let requires_grad =
            self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let backward = requires_grad.then(make_backward);
        self.push_node(kind, Rc::new(value), parents, backward, requires_grad)
    }

    fn push_node(
        &mut self,
        kind: &'static str,
        value: Rc<Tensor<T>>,
        parents: Vec<Var>,
        backward: Option<BackwardFn<T>>,
        requires_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            kind,
            value,
            parents,
            backward,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Propagates `d root / d node` to every tracked node reachable from
    /// `root`. `root` must hold exactly one element.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let root_node = self
            .nodes
            .get(root.0)
            .ok_or_else(|| Error::Usage(format!("unknown node {}", root.0)))?;
        if root_node.value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward root must be scalar, got dims {:?}",
                root_node.value.dims()
            )));
        }
        let corrupt = CORRUPT.with(|c| c.get());
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(root_node.value.dims(), T::one()));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            if let Some(p) = node.parents.iter().find(|p| p.0 >= idx) {
                return Err(Error::Internal(format!(
                    "cycle on tape: node {idx} ({}) depends on node {}",
                    node.kind, p.0
                )));
            }
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|p| self.nodes[p.0].requires_grad)
                .collect();
            let parent_grads = backward(&upstream, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((p, g), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let Some(mut g) = g else { continue };
                if !need {
                    continue;
                }
                if corrupt == Some(node.kind) {
                    g = g.map(|v| v * T::lit(1.1));
                }
                debug_assert_eq!(g.dims(), self.nodes[p.0].value.dims(), "{}", node.kind);
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, or zeros of the leaf's dims if it did not
    /// influence the root.
    pub fn wrt(&self, graph: &Graph<T>, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.dims(v)))
    }

    pub fn take(&mut self, graph: &Graph<T>, v: Var) -> Tensor<T> {
        self.grads
            .get_mut(v.0)
            .and_then(Option::take)
            .unwrap_or_else(|| Tensor::zeros(graph.dims(v)))
    }
}
