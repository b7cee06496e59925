//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so the tape is acyclic by
//! construction and a reverse sweep over indices is a valid topological
//! order. Gradients flowing into the same node from several consumers are
//! summed.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use super::array::NdArray;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Local vector-Jacobian product of one recorded operation.
pub trait BackwardRule<T: Real>: Send + Sync {
    /// Returns one gradient per parent, `None` where `needs[i]` is false.
    fn backward(
        &self,
        parents: &[&NdArray<T>],
        output: &NdArray<T>,
        grad: &NdArray<T>,
        needs: &[bool],
    ) -> Vec<Option<NdArray<T>>>;
}

struct Node<T: Real> {
    value: NdArray<T>,
    parents: Vec<Var>,
    rule: Option<Box<dyn BackwardRule<T>>>,
    requires_grad: bool,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: NdArray<T>) -> Var {
        self.push(value, Vec::new(), None, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: NdArray<T>) -> Var {
        self.push(value, Vec::new(), None, false)
    }

    pub fn value(&self, v: Var) -> &NdArray<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an operation with a caller-supplied backward rule.
    pub fn custom(&mut self, parents: &[Var], value: NdArray<T>, rule: impl BackwardRule<T> + 'static) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let rule: Option<Box<dyn BackwardRule<T>>> = if requires_grad { Some(Box::new(rule)) } else { None };
        self.push(value, parents.to_vec(), rule, requires_grad)
    }

    fn push(
        &mut self,
        value: NdArray<T>,
        parents: Vec<Var>,
        rule: Option<Box<dyn BackwardRule<T>>>,
        requires_grad: bool,
    ) -> Var {
        self.nodes.push(Node { value, parents, rule, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Gradient of a scalar node with respect to every leaf.
    pub fn backward(&self, out: Var) -> Result<Grads<T>> {
        let value = self.value(out);
        if value.len() != 1 {
            return Err(Error::shape("backward", "output length", 1, value.len()));
        }
        self.backward_seeded(vec![(out, NdArray::ones(value.shape()))])
    }

    /// Reverse sweep starting from explicit upstream gradients.
    pub fn backward_seeded(&self, seeds: Vec<(Var, NdArray<T>)>) -> Result<Grads<T>> {
        let mut grads: Vec<Option<NdArray<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut start = 0;
        for (v, g) in seeds {
            if g.shape() != self.value(v).shape() {
                return Err(Error::shape("backward", "seed length", self.value(v).len(), g.len()));
            }
            accumulate(&mut grads[v.0], g);
            start = start.max(v.0 + 1);
        }
        for i in (0..start).rev() {
            let node = &self.nodes[i];
            let Some(rule) = node.rule.as_ref() else {
                continue;
            };
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let parents: Vec<&NdArray<T>> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let needs: Vec<bool> = node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect();
            let local = rule.backward(&parents, &node.value, &grad, &needs);
            debug_assert_eq!(local.len(), node.parents.len());
            for (p, g) in node.parents.iter().zip(local) {
                if let Some(g) = g {
                    debug_assert_eq!(g.shape(), self.nodes[p.0].value.shape());
                    if self.nodes[p.0].requires_grad {
                        accumulate(&mut grads[p.0], g);
                    }
                }
            }
        }
        Ok(Grads { grads })
    }
}

fn accumulate<T: Real>(slot: &mut Option<NdArray<T>>, g: NdArray<T>) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Gradients of leaves after a reverse sweep.
pub struct Grads<T> {
    grads: Vec<Option<NdArray<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&NdArray<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<NdArray<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
