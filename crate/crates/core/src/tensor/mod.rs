//! Dense fp32 tensors on a reverse-mode gradient tape.
//!
//! Design notes, in brief:
//!
//! * A `Tape` is an append-only list of nodes. Node ids grow monotonically
//!   and every op's parents were recorded before it, so ids are already a
//!   topological order; `backward` is one reverse sweep with no explicit
//!   sort. Gradient accumulation order is therefore fixed by construction,
//!   which is what makes whole training runs bit-reproducible.
//! * Tensors are immutable value handles (`Arc` data). An untracked tensor
//!   (node = None) flows through ops as a constant and never receives
//!   gradient; `detach` is just dropping the node.
//! * Trainable parameters live outside the tape in `Param` cells and are
//!   introduced per-tape via `Tape::leaf`, which reuses one node per
//!   parameter so a parameter used twice in one graph (G1 runs in both
//!   forward paths) accumulates both contributions.
//! * Each node's backward closure returns per-parent gradient buffers only
//!   for parents that are tracked; constants cost nothing.
//!
//! A tape is confined to one logical thread; kernels may parallelize rows
//! internally but each output element is produced by exactly one task with
//! a fixed in-element reduction order.

mod conv;
mod gemm;
mod norm;
mod ops;

pub use conv::{conv2d, conv_transpose2d, PadMode};
pub use norm::instance_norm2d;
pub use ops::{
    add, add_scalar, l1_diff, leaky_relu, log_sigmoid, log_softmax, mean, mul, mul_scalar, neg,
    nll_weighted, relu, sigmoid, sub, sum_all, tanh_op,
};

use crate::error::{Error, Result};
use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::Arc;

pub type NodeId = usize;

/// Gradient rule: maps the node's output gradient to (parent, contribution)
/// pairs. Contributions are dense buffers shaped like the parent.
type BackwardFn = Box<dyn Fn(&[f32]) -> Vec<(NodeId, Vec<f32>)>>;

struct Node {
    backward: Option<BackwardFn>, // None for leaves and constants
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
    /// Param identity (Rc pointer) -> leaf node, so one param = one node.
    param_nodes: HashMap<usize, NodeId>,
    /// Leaf node -> parameter whose grad buffer receives the result.
    sinks: HashMap<NodeId, Rc<Param>>,
    /// Nodes whose gradients the caller wants back (test instrumentation).
    watched: HashSet<NodeId>,
}

/// Reverse-mode gradient tape. Cheap to clone (shared handle).
#[derive(Clone, Default)]
pub struct Tape(Rc<RefCell<TapeInner>>);

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    fn same_as(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn push(&self, backward: Option<BackwardFn>) -> NodeId {
        let mut inner = self.0.borrow_mut();
        inner.nodes.push(Node { backward });
        inner.nodes.len() - 1
    }

    /// Introduce a trainable parameter. Reuses the existing node when the
    /// same parameter was already introduced on this tape.
    pub fn leaf(&self, p: &Rc<Param>) -> Tensor {
        let key = Rc::as_ptr(p) as usize;
        let id = {
            let existing = self.0.borrow().param_nodes.get(&key).copied();
            match existing {
                Some(id) => id,
                None => {
                    let id = self.push(None);
                    let mut inner = self.0.borrow_mut();
                    inner.param_nodes.insert(key, id);
                    inner.sinks.insert(id, Rc::clone(p));
                    id
                }
            }
        };
        Tensor {
            shape: p.shape.clone(),
            data: p.value(),
            node: Some((self.clone(), id)),
        }
    }

    /// Track an arbitrary tensor as a differentiable input whose gradient
    /// is returned by `backward`. Used by gradient checks.
    pub fn var(&self, t: &Tensor) -> Tensor {
        let id = self.push(None);
        self.0.borrow_mut().watched.insert(id);
        Tensor { shape: t.shape.clone(), data: Arc::clone(&t.data), node: Some((self.clone(), id)) }
    }

    /// Reverse sweep from a scalar root. Parameter gradients accumulate
    /// into their `Param` cells (repeated calls keep accumulating until
    /// the caller zeroes them); gradients of `var` tensors are returned.
    pub fn backward(&self, root: &Tensor) -> Result<VarGrads> {
        let (tape, rid) = root
            .node
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("backward root is not on the tape".into()))?;
        if !tape.same_as(self) {
            return Err(Error::InvalidArgument("backward root belongs to another tape".into()));
        }
        if root.len() != 1 {
            return Err(Error::shape("scalar root", format!("{:?}", root.shape)));
        }
        let inner = self.0.borrow();
        let mut grads: Vec<Option<Vec<f32>>> = (0..inner.nodes.len()).map(|_| None).collect();
        grads[*rid] = Some(vec![1.0]);
        let mut out = VarGrads(HashMap::new());
        for id in (0..=*rid).rev() {
            let Some(g) = grads[id].take() else { continue };
            if let Some(bw) = &inner.nodes[id].backward {
                for (pid, contrib) in bw(&g) {
                    debug_assert!(pid < id, "parents must precede children");
                    match &mut grads[pid] {
                        Some(acc) => {
                            for (a, c) in acc.iter_mut().zip(&contrib) {
                                *a += *c;
                            }
                        }
                        slot @ None => *slot = Some(contrib),
                    }
                }
            }
            if let Some(p) = inner.sinks.get(&id) {
                p.accumulate_grad(&g);
            }
            if inner.watched.contains(&id) {
                out.0.insert(id, g);
            }
        }
        Ok(out)
    }

    pub fn num_nodes(&self) -> usize {
        self.0.borrow().nodes.len()
    }
}

/// Gradients of watched (`Tape::var`) tensors keyed by their node.
pub struct VarGrads(HashMap<NodeId, Vec<f32>>);

impl VarGrads {
    pub fn of(&self, t: &Tensor) -> Option<&[f32]> {
        let (_, id) = t.node.as_ref()?;
        self.0.get(id).map(|v| v.as_slice())
    }
}

/// Immutable fp32 tensor handle, optionally attached to a tape node.
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
            .field("tracked", &self.node.is_some())
            .finish()
    }
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f32>) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if expect == 0 {
            return Err(Error::InvalidArgument(format!(
                "empty tensors are not supported (shape {:?})",
                shape
            )));
        }
        if data.len() != expect {
            return Err(Error::shape(
                format!("{} elements for shape {:?}", expect, shape),
                format!("{}", data.len()),
            ));
        }
        Ok(Tensor { shape, data: Arc::new(data), node: None })
    }

    /// Wrap an existing buffer without copying (e.g. a parameter's current
    /// value entering a graph as a constant).
    pub fn from_arc(shape: Vec<usize>, data: Arc<Vec<f32>>) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if expect == 0 || data.len() != expect {
            return Err(Error::shape(
                format!("{} elements for shape {:?}", expect, shape),
                format!("{}", data.len()),
            ));
        }
        Ok(Tensor { shape, data, node: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![0.0; n]).expect("nonempty")
    }

    pub fn full(shape: Vec<usize>, v: f32) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![v; n]).expect("nonempty")
    }

    /// Rank-0 scalar.
    pub fn scalar(v: f32) -> Tensor {
        Tensor { shape: vec![], data: Arc::new(vec![v]), node: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction forbids empty tensors
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Same values, off the tape.
    pub fn detach(&self) -> Tensor {
        Tensor { shape: self.shape.clone(), data: Arc::clone(&self.data), node: None }
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        if self.shape.len() != 4 {
            return Err(Error::shape("rank-4 NCHW tensor", format!("{:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1], self.shape[2], self.shape[3]))
    }

    pub(crate) fn tape_node(&self) -> Option<&(Tape, NodeId)> {
        self.node.as_ref()
    }

    /// Wrap an op result on the tape shared by the tracked inputs.
    /// `parents` lists the tracked inputs' node ids in the order the
    /// backward closure reports them.
    pub(crate) fn tracked(
        shape: Vec<usize>,
        data: Vec<f32>,
        tape: Option<Tape>,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        let node = match (tape, backward) {
            (Some(t), Some(bw)) => {
                let id = t.push(Some(bw));
                Some((t, id))
            }
            _ => None,
        };
        Tensor { shape, data: Arc::new(data), node }
    }
}

/// Picks the shared tape of tracked inputs, verifying they agree.
pub(crate) fn joint_tape(inputs: &[&Tensor]) -> Result<Option<Tape>> {
    let mut found: Option<Tape> = None;
    for t in inputs {
        if let Some((tape, _)) = &t.node {
            match &found {
                None => found = Some(tape.clone()),
                Some(f) if f.same_as(tape) => {}
                Some(_) => {
                    return Err(Error::InvalidArgument(
                        "op inputs belong to different tapes".into(),
                    ))
                }
            }
        }
    }
    Ok(found)
}

/// Trainable parameter: named fp32 buffer with a persistent gradient
/// accumulator. Lives across tapes; optimizer updates mutate the value.
pub struct Param {
    name: String,
    shape: Vec<usize>,
    value: RefCell<Arc<Vec<f32>>>,
    grad: RefCell<Vec<f32>>,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Rc<Param> {
        let n: usize = shape.iter().product();
        assert_eq!(n, data.len(), "param data must fill its shape");
        Rc::new(Param {
            name: name.into(),
            shape,
            grad: RefCell::new(vec![0.0; n]),
            value: RefCell::new(Arc::new(data)),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn value(&self) -> Arc<Vec<f32>> {
        Arc::clone(&self.value.borrow())
    }

    /// Current value as an untracked constant tensor (no copy).
    pub fn as_tensor(&self) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.value(), node: None }
    }

    pub fn set_value(&self, data: Vec<f32>) {
        assert_eq!(data.len(), self.len());
        *self.value.borrow_mut() = Arc::new(data);
    }

    pub fn grad_snapshot(&self) -> Vec<f32> {
        self.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        self.grad.borrow_mut().iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn accumulate_grad(&self, g: &[f32]) {
        let mut grad = self.grad.borrow_mut();
        assert_eq!(grad.len(), g.len());
        for (a, c) in grad.iter_mut().zip(g) {
            *a += *c;
        }
    }

    /// In-place update with read access to the current gradient.
    /// Copy-on-write: cheap when no live tape still references the value.
    pub fn update(&self, f: impl FnOnce(&mut [f32], &[f32])) {
        let grad = self.grad.borrow();
        let mut value = self.value.borrow_mut();
        let buf = Arc::make_mut(&mut value);
        f(buf.as_mut_slice(), &grad);
    }
}
