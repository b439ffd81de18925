//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! The design is deliberately small: a [`Tensor`] is an immutable, reference-
//! counted buffer plus a shape, and every differentiable operation records a
//! node holding its parent tensors and a closure that maps the output
//! cotangent back to parent cotangents (a VJP). Calling [`Tensor::backward`]
//! on a scalar walks the graph in reverse topological order and accumulates
//! `dLoss/dLeaf` into every leaf that was created with gradient tracking.
//!
//! Two properties the rest of the crate leans on:
//!
//! * **Gradients accumulate additively.** A leaf used in several places (or in
//!   several backward passes before [`Tensor::zero_grad`]) receives the sum of
//!   all contributions — this is what makes gradient accumulation over bags a
//!   no-op to implement.
//! * **Graphs are only built when needed.** An operation whose inputs are all
//!   untracked constants produces another untracked constant, so evaluation
//!   and benchmarking pay nothing for autodiff.
//!
//! Buffers are flat `Vec`s in row-major order; there are no strides or views.
//! Shape juggling is done by explicit `reshape`/`permute`, which keeps every
//! kernel a straight loop over contiguous memory.

mod kernels;
mod ops;

pub use ops::cross_entropy;

use std::collections::{HashMap, HashSet};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Number of elements a shape describes.
pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for a shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Cotangents for each parent of an op, in parent order. `None` marks a
/// parent that does not need a gradient (untracked).
type ParentCotangents<T> = Vec<Option<Vec<T>>>;

/// VJP closure: `(output data, output cotangent) -> parent cotangents`.
type Vjp<T> = Box<dyn Fn(&[T], &[T]) -> ParentCotangents<T> + Send + Sync>;

enum Node<T: Scalar> {
    /// Not part of any gradient computation.
    Constant,
    /// Gradient-tracked input; accumulates `dLoss/dSelf` across backward passes.
    Leaf(Mutex<Option<Vec<T>>>),
    /// Result of a differentiable operation.
    Op { parents: Vec<Tensor<T>>, vjp: Vjp<T> },
}

struct Inner<T: Scalar> {
    data: Arc<Vec<T>>,
    shape: Vec<usize>,
    node: Node<T>,
}

/// Dense row-major tensor; cheap to clone (shared buffer).
pub struct Tensor<T: Scalar> {
    inner: Arc<Inner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let kind = match self.inner.node {
            Node::Constant => "constant",
            Node::Leaf(_) => "leaf",
            Node::Op { .. } => "op",
        };
        write!(f, "Tensor<{kind}>{:?}", self.inner.shape)
    }
}

impl<T: Scalar> Tensor<T> {
    fn from_parts(data: Vec<T>, shape: Vec<usize>, node: Node<T>) -> Self {
        debug_assert_eq!(data.len(), numel(&shape), "data/shape length mismatch");
        Tensor {
            inner: Arc::new(Inner {
                data: Arc::new(data),
                shape,
                node,
            }),
        }
    }

    /// Untracked tensor from a flat row-major buffer.
    pub fn constant(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if data.len() != numel(shape) {
            return Err(Error::shape(format!(
                "buffer of {} elements cannot take shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self::from_parts(data, shape.to_vec(), Node::Constant))
    }

    /// Gradient-tracked leaf (a parameter or an input under test).
    pub fn leaf(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if data.len() != numel(shape) {
            return Err(Error::shape(format!(
                "buffer of {} elements cannot take shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self::from_parts(
            data,
            shape.to_vec(),
            Node::Leaf(Mutex::new(None)),
        ))
    }

    /// All-zeros untracked tensor.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_parts(vec![T::ZERO; numel(shape)], shape.to_vec(), Node::Constant)
    }

    /// Rank-0 style scalar (shape `[1]`).
    pub fn scalar(x: T) -> Self {
        Self::from_parts(vec![x], vec![1], Node::Constant)
    }

    /// Internal: op output, degrading to a constant when nothing is tracked.
    pub(crate) fn op(
        data: Vec<T>,
        shape: Vec<usize>,
        parents: Vec<Tensor<T>>,
        vjp: impl Fn(&[T], &[T]) -> ParentCotangents<T> + Send + Sync + 'static,
    ) -> Self {
        if parents.iter().any(Tensor::is_tracked) {
            Self::from_parts(
                data,
                shape,
                Node::Op {
                    parents,
                    vjp: Box::new(vjp),
                },
            )
        } else {
            Self::from_parts(data, shape, Node::Constant)
        }
    }

    /// Internal: op output that shares an existing buffer (reshape).
    pub(crate) fn op_shared(
        data: Arc<Vec<T>>,
        shape: Vec<usize>,
        parents: Vec<Tensor<T>>,
        vjp: impl Fn(&[T], &[T]) -> ParentCotangents<T> + Send + Sync + 'static,
    ) -> Result<Self> {
        if data.len() != numel(&shape) {
            return Err(Error::shape(format!(
                "buffer of {} elements cannot take shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor {
            inner: Arc::new(Inner {
                data,
                shape,
                node: Node::Op {
                    parents,
                    vjp: Box::new(vjp),
                },
            }),
        })
    }

    /// Internal: untracked tensor sharing an existing buffer.
    pub(crate) fn constant_shared(data: Arc<Vec<T>>, shape: Vec<usize>) -> Result<Self> {
        if data.len() != numel(&shape) {
            return Err(Error::shape(format!(
                "buffer of {} elements cannot take shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor {
            inner: Arc::new(Inner {
                data,
                shape,
                node: Node::Constant,
            }),
        })
    }

    pub(crate) fn data_arc(&self) -> &Arc<Vec<T>> {
        &self.inner.data
    }

    /// Whether this tensor participates in gradient computation.
    pub fn is_tracked(&self) -> bool {
        !matches!(self.inner.node, Node::Constant)
    }

    /// Whether this tensor is a gradient-tracked leaf.
    pub fn is_leaf(&self) -> bool {
        matches!(self.inner.node, Node::Leaf(_))
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        self.inner.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.data.is_empty()
    }

    /// Flat row-major view of the data.
    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.len(), 1, "item() on non-scalar {:?}", self.shape());
        self.inner.data[0]
    }

    /// Untracked tensor sharing this buffer (cuts the graph).
    pub fn detach(&self) -> Self {
        Tensor {
            inner: Arc::new(Inner {
                data: Arc::clone(&self.inner.data),
                shape: self.inner.shape.clone(),
                node: Node::Constant,
            }),
        }
    }

    /// Copy of the data converted to another element type (untracked).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self
            .inner
            .data
            .iter()
            .map(|&x| U::from_f64(x.to_f64()))
            .collect();
        Tensor::from_parts(data, self.inner.shape.clone(), Node::Constant)
    }

    /// New leaf with the same shape and data transformed by `f`.
    ///
    /// This is how the optimizer produces updated parameters: the returned
    /// leaf starts with a clean (empty) gradient slot.
    pub fn leaf_map(&self, f: impl FnOnce(&mut [T])) -> Self {
        let mut data = self.inner.data.as_ref().clone();
        f(&mut data);
        Self::from_parts(data, self.inner.shape.clone(), Node::Leaf(Mutex::new(None)))
    }

    /// Accumulated gradient of a leaf, if any backward pass has reached it.
    pub fn grad(&self) -> Option<Vec<T>> {
        match &self.inner.node {
            Node::Leaf(g) => g.lock().expect("grad lock poisoned").clone(),
            _ => None,
        }
    }

    /// Clear the accumulated gradient of a leaf.
    pub fn zero_grad(&self) {
        if let Node::Leaf(g) = &self.inner.node {
            *g.lock().expect("grad lock poisoned") = None;
        }
    }

    fn accumulate_leaf_grad(&self, contribution: &[T]) {
        if let Node::Leaf(g) = &self.inner.node {
            let mut slot = g.lock().expect("grad lock poisoned");
            match slot.as_mut() {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contribution) {
                        *e += *c;
                    }
                }
                None => *slot = Some(contribution.to_vec()),
            }
        }
    }

    fn key(&self) -> *const Inner<T> {
        Arc::as_ptr(&self.inner)
    }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Accumulates `dLoss/dLeaf` into every tracked leaf reachable from
    /// `self`. Errors if `self` is not a single-element tensor.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }

        // Iterative post-order DFS for a reverse topological order. Only op
        // nodes are expanded; the traversal order is a pure function of the
        // graph structure, so backward is deterministic.
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut visited: HashSet<*const Inner<T>> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.key());
        while let Some((t, child)) = stack.pop() {
            let parents: &[Tensor<T>] = match &t.inner.node {
                Node::Op { parents, .. } => parents,
                _ => &[],
            };
            if child < parents.len() {
                stack.push((t.clone(), child + 1));
                let p = &parents[child];
                if p.is_tracked() && visited.insert(p.key()) {
                    stack.push((p.clone(), 0));
                }
            } else {
                order.push(t);
            }
        }

        let mut cotangents: HashMap<*const Inner<T>, Vec<T>> = HashMap::new();
        cotangents.insert(self.key(), vec![T::ONE]);

        for t in order.iter().rev() {
            let Some(cot) = cotangents.remove(&t.key()) else {
                continue;
            };
            match &t.inner.node {
                Node::Constant => {}
                Node::Leaf(_) => t.accumulate_leaf_grad(&cot),
                Node::Op { parents, vjp } => {
                    let parts = vjp(t.data(), &cot);
                    debug_assert_eq!(parts.len(), parents.len(), "vjp arity mismatch");
                    for (parent, part) in parents.iter().zip(parts) {
                        let Some(part) = part else { continue };
                        if !parent.is_tracked() {
                            continue;
                        }
                        debug_assert_eq!(part.len(), parent.len(), "vjp size mismatch");
                        match cotangents.entry(parent.key()) {
                            std::collections::hash_map::Entry::Occupied(mut e) => {
                                for (acc, c) in e.get_mut().iter_mut().zip(&part) {
                                    *acc += *c;
                                }
                            }
                            std::collections::hash_map::Entry::Vacant(e) => {
                                e.insert(part);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_shape_mismatch_is_an_error() {
        let err = Tensor::constant(vec![1.0f32, 2.0], &[3]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('2') && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn backward_requires_scalar() {
        let t = Tensor::<f32>::leaf(vec![1.0, 2.0], &[2]).unwrap();
        let err = t.backward().unwrap_err();
        assert!(err.to_string().contains("[2]"), "{err}");
    }

    #[test]
    fn grad_accumulates_across_backward_calls() {
        let x = Tensor::<f64>::leaf(vec![3.0], &[1]).unwrap();
        let y = x.scale(2.0);
        y.backward().unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn constants_build_no_graph() {
        let a = Tensor::<f32>::constant(vec![1.0, 2.0], &[2]).unwrap();
        let b = a.scale(3.0);
        assert!(!b.is_tracked());
    }

    #[test]
    fn detach_cuts_the_graph_but_shares_data() {
        let x = Tensor::<f64>::leaf(vec![1.0, 2.0], &[2]).unwrap();
        let d = x.detach();
        assert!(!d.is_tracked());
        assert_eq!(d.data(), x.data());
    }

    #[test]
    fn leaf_map_produces_fresh_leaf() {
        let x = Tensor::<f32>::leaf(vec![1.0, 2.0], &[2]).unwrap();
        let y = x.scale(1.0).sum_all();
        y.backward().unwrap();
        let updated = x.leaf_map(|d| d.iter_mut().for_each(|v| *v += 1.0));
        assert_eq!(updated.data(), &[2.0, 3.0]);
        assert!(updated.is_leaf());
        assert!(updated.grad().is_none());
    }

    #[test]
    fn diamond_graph_sums_both_paths() {
        // y = x*x + x  =>  dy/dx = 2x + 1 = 7 at x=3
        let x = Tensor::<f64>::leaf(vec![3.0], &[1]).unwrap();
        let y = x.mul(&x).unwrap().add(&x).unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![7.0]);
    }
}
