//! Dense f64 arrays with reverse-mode automatic differentiation.
//!
//! Every tensor is an immutable node in a define-by-run graph. Ops record
//! their inputs; `Tensor::backward` walks the graph once in reverse
//! topological order and returns a map from node id to gradient, so the
//! tensors themselves stay shareable across threads.

mod ops;

pub mod fd;

pub use fd::finite_difference_check;
pub(crate) use ops::{ctc_nll, logaddexp};

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use ops::Op;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Additive mask surrogate for minus infinity; exp(x - max) underflows to
/// exactly 0.0 for any realistic unmasked max.
pub const MASK_FILL: f64 = -1e30;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: non-finite input rejected")]
    NonFiniteInput { op: &'static str },
    #[error("{op}: {detail}")]
    InvalidValue { op: &'static str, detail: String },
    #[error("{op}: index {index} out of range for size {size}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        size: usize,
    },
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    op: Option<Op>,
    requires_grad: bool,
}

/// Handle to one graph node. Cloning is cheap and the underlying node is
/// immutable, so handles can be shared freely across threads.
#[derive(Clone)]
pub struct Tensor {
    node: Arc<Node>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.node.id)
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn make(shape: Vec<usize>, data: Vec<f64>, op: Option<Op>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            node: Arc::new(Node {
                id: fresh_id(),
                shape,
                data: Arc::new(data),
                op,
                requires_grad,
            }),
        }
    }

    /// Constant tensor; never receives a gradient.
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "from_vec",
                detail: format!("shape {:?} does not hold {} values", shape, data.len()),
            });
        }
        Ok(Tensor::make(shape.to_vec(), data, None, false))
    }

    /// Leaf tensor that participates in backward.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::from_vec(data, shape)?;
        Ok(Tensor {
            node: Arc::new(Node {
                id: t.node.id,
                shape: t.node.shape.clone(),
                data: Arc::clone(&t.node.data),
                op: None,
                requires_grad: true,
            }),
        })
    }

    pub fn scalar_const(v: f64) -> Tensor {
        Tensor::make(vec![1], vec![v], None, false)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::make(shape.to_vec(), vec![0.0; n], None, false)
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.node.data
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Value of a single-element tensor. Panics otherwise.
    pub fn scalar(&self) -> f64 {
        assert!(
            self.numel() == 1,
            "scalar() on tensor of shape {:?}",
            self.shape()
        );
        self.node.data[0]
    }

    /// Same data, no history: gradients stop here.
    pub fn detach(&self) -> Tensor {
        Tensor {
            node: Arc::new(Node {
                id: fresh_id(),
                shape: self.node.shape.clone(),
                data: Arc::clone(&self.node.data),
                op: None,
                requires_grad: false,
            }),
        }
    }

    /// Fresh leaf sharing this tensor's storage, tracked for gradients.
    /// Used by the parameter store when rebuilding leaves after an update.
    pub fn as_param_leaf(&self) -> Tensor {
        Tensor {
            node: Arc::new(Node {
                id: fresh_id(),
                shape: self.node.shape.clone(),
                data: Arc::clone(&self.node.data),
                op: None,
                requires_grad: true,
            }),
        }
    }

    /// Reverse-mode sweep from a scalar loss. Visits each reachable node
    /// exactly once; fan-out sums naturally through accumulation.
    pub fn backward(&self) -> Result<Gradients> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape().to_vec()));
        }
        let order = topo_order(self);
        let mut map: HashMap<u64, Vec<f64>> = HashMap::new();
        map.insert(self.id(), vec![1.0]);
        for t in order.iter().rev() {
            let Some(g) = (if t.node.op.is_some() {
                map.remove(&t.id())
            } else {
                map.get(&t.id()).cloned()
            }) else {
                continue;
            };
            if let Some(op) = t.node.op.as_ref() {
                let mut acc = GradAcc { map: &mut map };
                op.backward(t, &g, &mut acc);
            }
        }
        Ok(Gradients { map })
    }
}

fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(op) = t.node.op.as_ref() {
            for p in op.parents() {
                if p.requires_grad() && !visited.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
    }
    order
}

/// Result of a backward sweep: gradient per reachable node id. Leaves that
/// never appear were unreachable from the loss and have an implicit zero
/// gradient.
#[derive(Debug)]
pub struct Gradients {
    map: HashMap<u64, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        self.map.get(&t.id()).map(|v| v.as_slice())
    }

    /// Gradient of `t`, zero-filled when unreachable.
    pub fn get_or_zero(&self, t: &Tensor) -> Vec<f64> {
        self.map
            .get(&t.id())
            .cloned()
            .unwrap_or_else(|| vec![0.0; t.numel()])
    }

    pub fn contains(&self, t: &Tensor) -> bool {
        self.map.contains_key(&t.id())
    }
}

pub(crate) struct GradAcc<'a> {
    map: &'a mut HashMap<u64, Vec<f64>>,
}

impl GradAcc<'_> {
    /// Accumulation slot for a parent, or None when the parent does not
    /// track gradients.
    fn slot(&mut self, p: &Tensor) -> Option<&mut [f64]> {
        if !p.requires_grad() {
            return None;
        }
        Some(
            self.map
                .entry(p.id())
                .or_insert_with(|| vec![0.0; p.numel()])
                .as_mut_slice(),
        )
    }
}
