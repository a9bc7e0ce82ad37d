//! Reverse-mode tensor graph.
//!
//! A `Tensor` is a reference-counted node in an eagerly evaluated computation
//! DAG. Every operation records a backward closure that scatters the upstream
//! gradient into its parents; `backward()` walks the graph in reverse
//! topological order. Values live in a fixed row-major order so checkpoints
//! are portable.
//!
//! Single-threaded semantics: nodes are `Rc`-based and graphs must stay on
//! the thread that built them. Only leaf parameters are ever mutated in place
//! (by the optimizer); everything else is write-once.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::scalar::Real;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

pub(crate) type BackwardFn<F> = Box<dyn Fn(&[F])>;

pub(crate) struct Node<F: Real> {
    id: u64,
    shape: Vec<usize>,
    values: RefCell<Vec<F>>,
    grad: RefCell<Option<Vec<F>>>,
    trainable: Cell<bool>,
    /// For interior nodes: whether any ancestor leaf wants gradients.
    needs_grad: bool,
    parents: Vec<Tensor<F>>,
    backward: Option<BackwardFn<F>>,
}

/// N-dimensional real array with optional gradient, shared by handle.
pub struct Tensor<F: Real> {
    node: Rc<Node<F>>,
}

impl<F: Real> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl<F: Real> std::fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("trainable", &self.node.trainable.get())
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<F: Real> Tensor<F> {
    fn leaf(shape: Vec<usize>, values: Vec<F>, trainable: bool) -> Self {
        debug_assert_eq!(numel(&shape), values.len());
        Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                values: RefCell::new(values),
                grad: RefCell::new(None),
                trainable: Cell::new(trainable),
                needs_grad: false,
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    /// Constant (non-trainable) tensor from row-major values.
    pub fn from_vec(shape: Vec<usize>, values: Vec<F>) -> Result<Self> {
        if numel(&shape) != values.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} holds {} elements, got {}",
                shape,
                numel(&shape),
                values.len()
            )));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Dimension(format!("zero extent in shape {shape:?}")));
        }
        Ok(Self::leaf(shape, values, false))
    }

    /// Trainable leaf.
    pub fn parameter(shape: Vec<usize>, values: Vec<F>) -> Result<Self> {
        let t = Self::from_vec(shape, values)?;
        t.node.trainable.set(true);
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self::leaf(shape, vec![F::zero(); n], false)
    }

    pub fn scalar(v: F) -> Self {
        Self::leaf(vec![1], vec![v], false)
    }

    /// Interior node produced by an operation.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        values: Vec<F>,
        parents: Vec<Tensor<F>>,
        backward: BackwardFn<F>,
    ) -> Self {
        debug_assert_eq!(numel(&shape), values.len());
        let needs_grad = parents.iter().any(|p| p.requires_grad());
        Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                values: RefCell::new(values),
                grad: RefCell::new(None),
                trainable: Cell::new(false),
                needs_grad,
                parents,
                backward: if needs_grad { Some(backward) } else { None },
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn len(&self) -> usize {
        numel(&self.node.shape)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> Ref<'_, [F]> {
        Ref::map(self.node.values.borrow(), |v| v.as_slice())
    }

    pub fn to_vec(&self) -> Vec<F> {
        self.node.values.borrow().clone()
    }

    /// Scalar extraction; the tensor must hold exactly one element.
    pub fn item(&self) -> F {
        debug_assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.node.values.borrow()[0]
    }

    pub fn trainable(&self) -> bool {
        self.node.trainable.get()
    }

    /// Freeze or unfreeze a leaf. Effective for graphs built afterwards.
    pub fn set_trainable(&self, on: bool) {
        debug_assert!(self.node.parents.is_empty(), "only leaves can be (un)frozen");
        self.node.trainable.set(on);
    }

    pub fn requires_grad(&self) -> bool {
        if self.node.parents.is_empty() {
            self.node.trainable.get()
        } else {
            self.node.needs_grad
        }
    }

    pub fn grad(&self) -> Option<Vec<F>> {
        self.node.grad.borrow().clone()
    }

    pub fn has_grad(&self) -> bool {
        self.node.grad.borrow().is_some()
    }

    pub fn clear_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Accumulate into this node's gradient buffer, allocating zeros on first use.
    pub(crate) fn grad_mut<R>(&self, f: impl FnOnce(&mut [F]) -> R) -> R {
        let mut slot = self.node.grad.borrow_mut();
        let buf = slot.get_or_insert_with(|| vec![F::zero(); self.len()]);
        f(buf)
    }

    /// In-place value update for leaves (optimizer use).
    pub(crate) fn update_values(&self, f: impl FnOnce(&mut [F])) {
        f(&mut self.node.values.borrow_mut());
    }

    /// Cut the graph: same values, no history, never trainable.
    pub fn detach(&self) -> Tensor<F> {
        Self::leaf(self.node.shape.clone(), self.to_vec(), false)
    }

    /// Same data viewed under a new shape with an identical element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor<F>> {
        if numel(&shape) != self.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} ({} elems) into {:?}",
                self.shape(),
                self.len(),
                shape
            )));
        }
        let src = self.clone();
        Ok(Tensor::from_op(
            shape,
            self.to_vec(),
            vec![self.clone()],
            Box::new(move |g| {
                src.grad_mut(|dst| {
                    for (d, &u) in dst.iter_mut().zip(g) {
                        *d += u;
                    }
                });
            }),
        ))
    }

    /// Reverse-mode sweep from a scalar output. Leaf gradients accumulate
    /// until explicitly cleared.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::Dimension(format!(
                "backward() needs a scalar output, got shape {:?}",
                self.shape()
            )));
        }
        let order = self.topo_order();
        self.grad_mut(|g| g[0] = g[0] + F::one());
        for node in order.iter().rev() {
            if !node.requires_grad() {
                continue;
            }
            let Some(bw) = &node.node.backward else {
                continue;
            };
            let upstream = node.node.grad.borrow().clone();
            if let Some(upstream) = upstream {
                bw(&upstream);
            }
            // Interior gradients are transient; free them as we go.
            if !node.node.parents.is_empty() {
                *node.node.grad.borrow_mut() = None;
            }
        }
        Ok(())
    }

    /// Iterative post-order DFS over parents.
    fn topo_order(&self) -> Vec<Tensor<F>> {
        let mut order: Vec<Tensor<F>> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor<F>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.node.id);
        while let Some((t, next_child)) = stack.pop() {
            if next_child < t.node.parents.len() {
                let child = t.node.parents[next_child].clone();
                stack.push((t, next_child + 1));
                if visited.insert(child.node.id) {
                    stack.push((child, 0));
                }
            } else {
                order.push(t);
            }
        }
        order
    }
}

/// Elementwise helpers shared by the op implementations.
pub(crate) fn same_shape<F: Real>(a: &Tensor<F>, b: &Tensor<F>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}
