//! Dense row-major tensors with reverse-mode differentiation.
//!
//! Values are double precision and immutable once a tensor is built; the
//! gradient accumulator is the only interior-mutable state. Every operation
//! that involves a gradient-requiring input records a backward closure, so a
//! scalar loss can replay the chain rule with [`Tensor::backward`]. Reductions
//! keep a fixed summation order, which makes runs bit-reproducible for a
//! given seed.
//!
//! Cloning a tensor clones a handle, not the storage.

mod fd;
mod ops;

pub use fd::finite_diff_grad;

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

type BackwardFn = Box<dyn Fn(&[f64], &mut GradSink)>;

struct Inner {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// Handle to an immutable value array plus its place in the autodiff graph.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl Tensor {
    fn new_inner(
        shape: Vec<usize>,
        values: Vec<f64>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Tensor {
            inner: Rc::new(Inner {
                shape,
                values,
                requires_grad,
                grad: RefCell::new(None),
                parents,
                backward,
            }),
        }
    }

    /// Builds a constant (gradient-free) tensor from row-major values.
    pub fn from_vec(shape: impl Into<Vec<usize>>, values: Vec<f64>) -> Result<Tensor> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::InvalidShape {
                op: "from_vec",
                shape,
                reason: format!("expected {expected} values, got {}", values.len()),
            });
        }
        Ok(Tensor::new_inner(shape, values, false, Vec::new(), None))
    }

    /// Builds a trainable leaf from row-major values.
    pub fn param(shape: impl Into<Vec<usize>>, values: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::from_vec(shape, values)?;
        Ok(Tensor::new_inner(
            t.inner.shape.clone(),
            t.inner.values.clone(),
            true,
            Vec::new(),
            None,
        ))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
        let m = rows.len();
        let n = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidShape {
                op: "from_rows",
                shape: vec![m, n],
                reason: "ragged rows".into(),
            });
        }
        Tensor::from_vec(vec![m, n], rows.concat())
    }

    /// Rank-0 constant.
    pub fn scalar(v: f64) -> Tensor {
        Tensor::new_inner(Vec::new(), vec![v], false, Vec::new(), None)
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Tensor {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor::new_inner(shape, vec![0.0; n], false, Vec::new(), None)
    }

    pub fn filled(shape: impl Into<Vec<usize>>, v: f64) -> Tensor {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor::new_inner(shape, vec![v; n], false, Vec::new(), None)
    }

    /// n-by-n identity matrix.
    pub fn eye(n: usize) -> Tensor {
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            values[i * n + i] = 1.0;
        }
        Tensor::new_inner(vec![n, n], values, false, Vec::new(), None)
    }

    /// Copy of this tensor cut loose from the graph, gradient-free.
    pub fn detach(&self) -> Tensor {
        Tensor::new_inner(
            self.inner.shape.clone(),
            self.inner.values.clone(),
            false,
            Vec::new(),
            None,
        )
    }

    /// Leaf copy that participates in gradient accumulation.
    pub fn with_grad(&self) -> Tensor {
        Tensor::new_inner(
            self.inner.shape.clone(),
            self.inner.values.clone(),
            true,
            Vec::new(),
            None,
        )
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.inner.values
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Single stored value; the tensor must hold exactly one element.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.inner.values[0]
    }

    /// Row-major element of a rank-2 tensor.
    pub fn get2(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.inner.values[r * self.inner.shape[1] + c]
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.inner.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            _ => Err(Error::InvalidShape {
                op,
                shape: self.inner.shape.clone(),
                reason: "expected a rank-2 tensor".into(),
            }),
        }
    }

    /// Accumulated gradient, if any backward pass has reached this tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    /// Drops the accumulated gradient.
    pub fn clear_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    fn ptr(&self) -> *const Inner {
        Rc::as_ptr(&self.inner)
    }

    fn accumulate_grad(&self, g: &[f64]) {
        if !self.inner.requires_grad {
            return;
        }
        let mut slot = self.inner.grad.borrow_mut();
        let acc = slot.get_or_insert_with(|| vec![0.0; g.len()]);
        for (a, &v) in acc.iter_mut().zip(g) {
            *a += v;
        }
    }

    /// Reverse-mode pass from a scalar loss.
    ///
    /// Gradients of this pass are added into the accumulator of every
    /// gradient-requiring tensor reachable from the loss; repeated calls
    /// keep accumulating until [`Tensor::clear_grad`].
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.shape().to_vec(),
            });
        }
        // Post-order walk: parents come out before their consumers.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<*const Inner> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.ptr());
        while let Some((node, next_parent)) = stack.pop() {
            if next_parent < node.inner.parents.len() {
                let parent = node.inner.parents[next_parent].clone();
                stack.push((node, next_parent + 1));
                if parent.requires_grad() && visited.insert(parent.ptr()) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }
        let mut sink = GradSink::new();
        sink.seed(self, vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = sink.take(node) else { continue };
            if let Some(back) = &node.inner.backward {
                back(&g, &mut sink);
            }
            node.accumulate_grad(&g);
        }
        Ok(())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut d = f.debug_struct("Tensor");
        d.field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad);
        if self.numel() <= 16 {
            d.field("values", &self.inner.values);
        }
        d.finish()
    }
}

/// Per-pass gradient buffers, keyed by graph node.
///
/// Backward closures push contributions here instead of touching the
/// persistent accumulators directly, so a repeated backward over the same
/// graph adds exactly one more copy of the gradient.
pub struct GradSink {
    map: HashMap<*const Inner, Vec<f64>>,
}

impl GradSink {
    fn new() -> GradSink {
        GradSink {
            map: HashMap::new(),
        }
    }

    fn seed(&mut self, t: &Tensor, g: Vec<f64>) {
        self.map.insert(t.ptr(), g);
    }

    fn take(&mut self, t: &Tensor) -> Option<Vec<f64>> {
        self.map.remove(&t.ptr())
    }

    pub(crate) fn add(&mut self, t: &Tensor, contrib: &[f64]) {
        if !t.requires_grad() {
            return;
        }
        debug_assert_eq!(t.numel(), contrib.len());
        match self.map.get_mut(&t.ptr()) {
            Some(buf) => {
                for (a, &v) in buf.iter_mut().zip(contrib) {
                    *a += v;
                }
            }
            None => {
                self.map.insert(t.ptr(), contrib.to_vec());
            }
        }
    }
}

pub(crate) fn node_from_parents(
    shape: Vec<usize>,
    values: Vec<f64>,
    parents: Vec<Tensor>,
    backward: BackwardFn,
) -> Tensor {
    if parents.iter().any(Tensor::requires_grad) {
        Tensor::new_inner(shape, values, true, parents, Some(backward))
    } else {
        Tensor::new_inner(shape, values, false, Vec::new(), None)
    }
}
