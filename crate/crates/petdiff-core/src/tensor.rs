//! Minimal reverse-mode automatic differentiation over dense n-dimensional
//! f32 arrays.
//!
//! A [`Tape`] records every differentiable operation as an append-only node
//! list; creation order is a topological order, so [`backward`] walks node ids
//! in reverse. Backward rules are themselves expressed through the public
//! tensor ops, so when `retain_graph` is set the backward pass is recorded on
//! the same tape and its results can be differentiated again (reverse over
//! reverse). That is what the gradient penalty's second-order path uses.
//!
//! Tensors are cheap handles: the value buffer is shared behind an `Arc`, and
//! an optional `(tape, node)` pair links the tensor into the active graph.
//! Constants carry no node and produce no recording. All operations are
//! single-threaded and bit-deterministic for fixed inputs.

mod conv;
mod ops;

pub use ops::Op;

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::sync::Arc;

use thiserror::Error;

pub type NodeId = usize;

/// Gradients keyed by the leaf node id they belong to (see [`Tape::watch`]).
pub type GradMap = HashMap<NodeId, Tensor>;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected scalar tensor, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },
    #[error("{op}: invalid argument: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("tensor has no tape node; it is a constant")]
    NoNode,
    #[error("tensors belong to different tapes")]
    TapeMismatch,
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Saved operand inside a tape node: value buffer plus the producing node id
/// (None for constants). Holding the id instead of a full tensor avoids an
/// `Rc` cycle between the tape and its nodes.
#[derive(Clone)]
pub(crate) struct Saved {
    pub shape: Vec<usize>,
    pub data: Arc<Vec<f32>>,
    pub id: Option<NodeId>,
}

pub(crate) struct TapeNode {
    pub op: Op,
    pub inputs: Vec<Saved>,
    pub out_shape: Vec<usize>,
    pub out_data: Arc<Vec<f32>>,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<TapeNode>,
    paused: bool,
}

/// Append-only operation record enabling reverse-mode differentiation.
#[derive(Clone, Default)]
pub struct Tape(Rc<RefCell<TapeInner>>);

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.0.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a tensor as a differentiable leaf on this tape and returns
    /// the watched handle. Gradients are reported under the handle's node id.
    pub fn watch(&self, t: &Tensor) -> Tensor {
        let out_data = t.data.clone();
        let id = self.push(TapeNode {
            op: Op::Watch,
            inputs: vec![],
            out_shape: t.shape.clone(),
            out_data: out_data.clone(),
        });
        Tensor {
            shape: t.shape.clone(),
            data: out_data,
            node: Some((self.clone(), id)),
        }
    }

    fn push(&self, node: TapeNode) -> NodeId {
        let mut inner = self.0.borrow_mut();
        inner.nodes.push(node);
        inner.nodes.len() - 1
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    pub(crate) fn record(
        &self,
        op: Op,
        inputs: Vec<Saved>,
        out_shape: Vec<usize>,
        out_data: Vec<f32>,
    ) -> Tensor {
        let out_data = Arc::new(out_data);
        if self.0.borrow().paused || inputs.iter().all(|s| s.id.is_none()) {
            return Tensor {
                shape: out_shape,
                data: out_data,
                node: None,
            };
        }
        let id = self.push(TapeNode {
            op,
            inputs,
            out_shape: out_shape.clone(),
            out_data: out_data.clone(),
        });
        Tensor {
            shape: out_shape,
            data: out_data,
            node: Some((self.clone(), id)),
        }
    }

    fn set_paused(&self, paused: bool) {
        self.0.borrow_mut().paused = paused;
    }

    fn reattach(&self, s: &Saved) -> Tensor {
        Tensor {
            shape: s.shape.clone(),
            data: s.data.clone(),
            node: s.id.map(|id| (self.clone(), id)),
        }
    }
}

/// Dense n-dimensional f32 array, optionally linked into a tape.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
    node: Option<(Tape, NodeId)>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("node", &self.node.as_ref().map(|(_, id)| *id))
            .finish()
    }
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            node: None,
        }
    }

    pub fn scalar(v: f32) -> Self {
        Self::from_vec(&[], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f32) -> Self {
        Self::from_vec(shape, vec![v; shape.iter().product()])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.data.as_ref().clone()
    }

    /// Scalar value; panics if the tensor has more than one element.
    pub fn item(&self) -> f32 {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn node_id(&self) -> Option<NodeId> {
        self.node.as_ref().map(|(_, id)| *id)
    }

    pub fn tape(&self) -> Option<&Tape> {
        self.node.as_ref().map(|(t, _)| t)
    }

    /// Same values, no tape link.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }

    pub(crate) fn saved(&self) -> Saved {
        Saved {
            shape: self.shape.clone(),
            data: self.data.clone(),
            id: self.node_id(),
        }
    }

    /// Tape shared by `self` and `others`, if any tensor carries one.
    /// Errors when two distinct tapes are mixed.
    pub(crate) fn common_tape(parts: &[&Tensor]) -> Result<Option<Tape>> {
        let mut found: Option<Tape> = None;
        for p in parts {
            if let Some((tape, _)) = &p.node {
                match &found {
                    None => found = Some(tape.clone()),
                    Some(t) if t.same_tape(tape) => {}
                    Some(_) => return Err(TensorError::TapeMismatch),
                }
            }
        }
        Ok(found)
    }
}

/// Reverse-mode gradients of a scalar `root` with respect to every watched
/// leaf reachable from it. With `retain_graph`, the backward computation is
/// itself recorded so the returned gradients are differentiable.
pub fn backward(root: &Tensor, retain_graph: bool) -> Result<GradMap> {
    if root.len() != 1 {
        return Err(TensorError::NotScalar {
            op: "backward",
            shape: root.shape.clone(),
        });
    }
    let (tape, root_id) = root.node.clone().ok_or(TensorError::NoNode)?;
    if !retain_graph {
        tape.set_paused(true);
    }
    let result = backward_inner(&tape, root_id, root.shape.clone());
    if !retain_graph {
        tape.set_paused(false);
    }
    result
}

fn backward_inner(tape: &Tape, root_id: NodeId, root_shape: Vec<usize>) -> Result<GradMap> {
    let mut pending: Vec<Option<Tensor>> = Vec::new();
    pending.resize(root_id + 1, None);
    pending[root_id] = Some(Tensor::ones(&root_shape));
    let mut leaves = GradMap::new();

    for id in (0..=root_id).rev() {
        let Some(grad) = pending[id].take() else {
            continue;
        };
        // Clone the node's op and operands out of the tape so the borrow is
        // released before backward rules record new nodes on it.
        let (op, inputs) = {
            let inner = tape.0.borrow();
            let node = &inner.nodes[id];
            if matches!(node.op, Op::Watch) {
                drop(inner);
                leaves.insert(id, grad);
                continue;
            }
            (node.op.clone(), node.inputs.clone())
        };
        let out = {
            let inner = tape.0.borrow();
            Saved {
                shape: inner.nodes[id].out_shape.clone(),
                data: inner.nodes[id].out_data.clone(),
                id: Some(id),
            }
        };
        let operands: Vec<Tensor> = inputs.iter().map(|s| tape.reattach(s)).collect();
        let out_t = tape.reattach(&out);
        let input_grads = op.backward(&grad, &operands, &out_t)?;
        debug_assert_eq!(input_grads.len(), inputs.len());
        for (slot, g) in inputs.iter().zip(input_grads) {
            let (Some(src), Some(g)) = (slot.id, g) else {
                continue;
            };
            debug_assert_eq!(g.shape(), &slot.shape[..], "grad shape for {:?}", op);
            pending[src] = Some(match pending[src].take() {
                Some(acc) => acc.add(&g)?,
                None => g,
            });
        }
    }
    Ok(leaves)
}
