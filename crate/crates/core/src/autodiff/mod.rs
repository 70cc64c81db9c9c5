//! Minimal dense-tensor reverse-mode differentiation.
//!
//! A [`Tape`] owns every tensor created during a forward pass. Ops append
//! nodes and return [`TensorId`] handles; [`Tape::backward`] walks the nodes
//! in reverse creation order (reverse topological by construction) and
//! accumulates gradients into every `requires_grad` tensor. 32-bit floats
//! throughout.
//!
//! Training code builds a fresh tape per sample, copies parameters in as
//! leaves, and reads gradients back out; see [`params::ParamStore`].

mod adam;
mod ops;
pub mod params;
mod schedule;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use ops::{dropout_key, dropout_mask};
pub use schedule::{lr_schedule, ScheduleConfig, ScheduleKind};

use crate::error::{Error, Result};

/// Handle to a tensor on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Matmul { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    AddRow { a: TensorId, row: TensorId },
    Mul { a: TensorId, b: TensorId },
    Affine { a: TensorId, mul: f32 },
    Relu { a: TensorId },
    Gelu { a: TensorId },
    Sigmoid { a: TensorId },
    Softmax { a: TensorId, axis: usize },
    Log { a: TensorId },
    Clamp { a: TensorId, lo: f32, hi: f32 },
    LayerNorm { a: TensorId, gamma: TensorId, beta: TensorId, eps: f32 },
    Dropout { a: TensorId, mask: Vec<f32> },
    Concat { parts: Vec<TensorId>, axis: usize },
    SliceRows { a: TensorId, start: usize },
    SliceCols { a: TensorId, start: usize },
    Sum { a: TensorId },
    Mean { a: TensorId },
    Transpose { a: TensorId },
    Reshape { a: TensorId },
    SpatialMean { a: TensorId },
    Conv3 { input: TensorId, weight: TensorId, bias: TensorId },
    Conv3T { input: TensorId, weight: TensorId, bias: TensorId },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
    op: Op,
}

/// Records a forward computation and differentiates it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f32>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node { shape, data, grad: None, requires_grad, op });
        TensorId(self.nodes.len() - 1)
    }

    fn needs_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Insert a constant (non-differentiable) tensor.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f32>) -> TensorId {
        self.push(shape, data, false, Op::Leaf)
    }

    /// Insert a differentiable leaf (parameter copy or input under test).
    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<f32>) -> TensorId {
        self.push(shape, data, true, Op::Leaf)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[f32] {
        &self.nodes[id.0].data
    }

    /// Gradient of the last `backward` call w.r.t. `id`, if it required grad.
    pub fn grad(&self, id: TensorId) -> Option<&[f32]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn value(&self, id: TensorId) -> f32 {
        debug_assert_eq!(numel(&self.nodes[id.0].shape), 1);
        self.nodes[id.0].data[0]
    }

    fn dims2(&self, id: TensorId, ctx: &str) -> Result<(usize, usize)> {
        let s = &self.nodes[id.0].shape;
        if s.len() != 2 {
            return Err(Error::Shape(format!("{ctx}: expected rank-2 tensor, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// Populate gradients of every `requires_grad` tensor reachable from the
    /// scalar `loss`. Accumulation is additive across fan-out.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if numel(&self.nodes[loss.0].shape) != 1 {
            return Err(Error::Shape(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        for node in &mut self.nodes {
            node.grad = if node.requires_grad {
                Some(vec![0.0; node.data.len()])
            } else {
                None
            };
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(()); // nothing depends on a parameter
        }
        self.nodes[loss.0].grad.as_mut().unwrap()[0] = 1.0;

        for i in (0..=loss.0).rev() {
            if self.nodes[i].requires_grad && !matches!(self.nodes[i].op, Op::Leaf) {
                self.backward_node(i);
            }
        }
        Ok(())
    }
}
