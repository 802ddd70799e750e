//! Reverse-mode autodiff tape.
//!
//! Nodes are appended in forward order, so walking the node list backwards is
//! a reverse topological order. Each differentiable node stores a backward
//! closure that reads saved forward values through [`Values`] and adds its
//! parents' gradient contributions into a [`GradStore`]. Untracked nodes
//! (constants, and anything derived only from constants) carry no closure, so
//! inference episodes pay no gradient bookkeeping.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// Read-only view of forward values, passed to backward closures.
pub struct Values<'a> {
    nodes: &'a [Node],
}

impl<'a> Values<'a> {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }
}

/// Backward closure: (saved values, upstream gradient of this node, sink).
pub type BackwardFn = Box<dyn Fn(&Values<'_>, &[f32], &mut GradStore)>;

pub(crate) struct Node {
    value: Tensor,
    tracked: bool,
    back: Option<BackwardFn>,
}

/// Gradient buffers addressed by node id, allocated lazily.
#[derive(Debug)]
pub struct GradStore {
    grads: Vec<Option<Vec<f32>>>,
}

impl GradStore {
    fn new(len: usize) -> GradStore {
        let mut grads = Vec::with_capacity(len);
        grads.resize_with(len, || None);
        GradStore { grads }
    }

    /// Mutable gradient buffer for `id`, zero-initialized on first touch.
    pub fn slot(&mut self, id: NodeId, len: usize) -> &mut [f32] {
        self.grads[id.0].get_or_insert_with(|| vec![0.0; len])
    }

    /// Accumulates `contribution` into the gradient of `id`.
    pub fn add(&mut self, id: NodeId, contribution: &[f32]) {
        let slot = self.slot(id, contribution.len());
        for (s, &c) in slot.iter_mut().zip(contribution) {
            *s += c;
        }
    }

    pub fn get(&self, id: NodeId) -> Option<&[f32]> {
        self.grads[id.0].as_deref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Vec<f32>> {
        self.grads[id.0].take()
    }
}

/// Forward-value recorder and reverse-mode differentiator.
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn is_tracked(&self, id: NodeId) -> bool {
        self.nodes[id.0].tracked
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push_node(value, true, None)
    }

    /// Records a non-differentiable input; nothing derived solely from
    /// constants records backward closures.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_node(value, false, None)
    }

    /// Id the next pushed node will get. Backward closures that need their
    /// own output value capture this before pushing.
    pub fn next_id(&self) -> NodeId {
        NodeId(self.nodes.len())
    }

    /// Records an operation result. `tracked` should be true when any parent
    /// is tracked; `back` is dropped for untracked nodes.
    pub fn push_custom(&mut self, value: Tensor, tracked: bool, back: Option<BackwardFn>) -> NodeId {
        let back = if tracked { back } else { None };
        self.push_node(value, tracked, back)
    }

    fn push_node(&mut self, value: Tensor, tracked: bool, back: Option<BackwardFn>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, tracked, back });
        id
    }

    pub(crate) fn any_tracked(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.is_tracked(*id))
    }

    /// Reverse pass from a scalar loss node. Returns per-node gradients;
    /// query the ids of interest (typically parameter leaves).
    pub fn backward(&self, loss: NodeId) -> Result<GradStore> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        if !loss_value.data()[0].is_finite() {
            return Err(Error::numeric(format!(
                "backward from non-finite loss {}",
                loss_value.data()[0]
            )));
        }
        let mut grads = GradStore::new(self.nodes.len());
        grads.add(loss, &[1.0]);
        let values = Values { nodes: &self.nodes };
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if node.back.is_none() {
                continue;
            }
            // Taking the buffer out lets closures borrow the store mutably;
            // parents always precede their children, so no closure touches
            // its own slot.
            let Some(upstream) = grads.grads[idx].take() else { continue };
            if let Some(back) = &node.back {
                back(&values, &upstream, &mut grads);
            }
            grads.grads[idx] = Some(upstream);
        }
        Ok(grads)
    }
}
