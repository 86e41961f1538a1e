//! Reverse-mode differentiable tensors.
//!
//! A [`Tensor`] is an immutable n-dimensional array plus an optional edge
//! into the computation graph that produced it. Ops build the graph
//! eagerly; [`Tensor::backward`] walks it in reverse topological order and
//! accumulates gradients into the leaves. Forward values are identical
//! whether or not any input records gradients: recording only attaches
//! bookkeeping, never changes arithmetic.
//!
//! Graphs are single-threaded (`Rc`); parallel workers each build their own
//! graph over shared read-only data (`Arc<Vec<E>>`).

mod adam;
mod element;
pub mod gradcheck;
mod ops;
mod params;
mod rng;
mod serialize;

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::Arc;

pub use adam::{Adam, AdamConfig};
pub use element::Element;
pub use ops::{attention, conv1d, dwconv1d, linear, Padding};
pub use params::{ParamStore, PlainTensor};
pub use rng::Rng;
pub use serialize::{read_named_tensors, write_named_tensors, NamedTensor, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::error::{Error, Result};

type BackFn<E> = Box<dyn Fn(&[E]) -> Vec<Option<Vec<E>>>>;

struct Node<E: Element> {
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
    grad: RefCell<Option<Vec<E>>>,
    /// Parents in the graph; empty for leaves and constants.
    parents: Vec<Tensor<E>>,
    /// Given the upstream gradient, returns one contribution per parent.
    backward: Option<BackFn<E>>,
    /// True if this node is a gradient-recording leaf.
    is_leaf: bool,
    /// True if a recording leaf is reachable from this node.
    requires_path: bool,
    /// Set once backward() has run with this node as the root.
    backward_ran: Cell<bool>,
}

pub struct Tensor<E: Element>(Rc<Node<E>>);

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<E: Element> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor(shape={:?}", self.0.shape)?;
        if self.numel() <= 8 {
            write!(f, ", data={:?}", &self.0.data[..])?;
        }
        write!(f, ")")
    }
}

pub(crate) fn check_len<E>(shape: &[usize], data: &[E]) -> Result<()> {
    let n: usize = shape.iter().product();
    if n != data.len() {
        return Err(Error::shape(
            "tensor",
            format!("shape {:?} implies {} elements, got {}", shape, n, data.len()),
        ));
    }
    Ok(())
}

impl<E: Element> Tensor<E> {
    /// Constant tensor (no gradient recording).
    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Self> {
        check_len(shape, &data)?;
        Ok(Tensor(Rc::new(Node {
            shape: shape.to_vec(),
            data: Arc::new(data),
            grad: RefCell::new(None),
            parents: Vec::new(),
            backward: None,
            is_leaf: false,
            requires_path: false,
            backward_ran: Cell::new(false),
        })))
    }

    /// Gradient-recording leaf.
    pub fn leaf(shape: &[usize], data: Vec<E>) -> Result<Self> {
        check_len(shape, &data)?;
        Ok(Tensor(Rc::new(Node {
            shape: shape.to_vec(),
            data: Arc::new(data),
            grad: RefCell::new(None),
            parents: Vec::new(),
            backward: None,
            is_leaf: true,
            requires_path: true,
            backward_ran: Cell::new(false),
        })))
    }

    /// Leaf (or constant) sharing already-allocated storage.
    pub fn from_shared(shape: &[usize], data: Arc<Vec<E>>, record_grad: bool) -> Result<Self> {
        check_len(shape, &data)?;
        Ok(Tensor(Rc::new(Node {
            shape: shape.to_vec(),
            data,
            grad: RefCell::new(None),
            parents: Vec::new(),
            backward: None,
            is_leaf: record_grad,
            requires_path: record_grad,
            backward_ran: Cell::new(false),
        })))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![E::zero(); n]).expect("consistent by construction")
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![E::of_f64(v); n]).expect("consistent by construction")
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::from_vec(&[1], vec![E::of_f64(v)]).expect("consistent by construction")
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        let data: Vec<E> = (0..n)
            .map(|_| E::of_f64(rng.normal_scaled(0.0, std)))
            .collect();
        Tensor::from_vec(shape, data).expect("consistent by construction")
    }

    /// Output of an op: `back` receives the upstream gradient and returns
    /// one optional contribution per parent. The edge is pruned when no
    /// parent can reach a recording leaf.
    pub(crate) fn from_op<F>(shape: Vec<usize>, data: Vec<E>, parents: Vec<Tensor<E>>, back: F) -> Self
    where
        F: Fn(&[E]) -> Vec<Option<Vec<E>>> + 'static,
    {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires = parents.iter().any(|p| p.0.requires_path);
        Tensor(Rc::new(Node {
            shape,
            data: Arc::new(data),
            grad: RefCell::new(None),
            parents: if requires { parents } else { Vec::new() },
            backward: if requires { Some(Box::new(back)) } else { None },
            is_leaf: false,
            requires_path: requires,
            backward_ran: Cell::new(false),
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.0.data
    }

    pub fn shared_data(&self) -> Arc<Vec<E>> {
        Arc::clone(&self.0.data)
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.0.data.to_vec()
    }

    pub fn item(&self) -> E {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.0.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_path
    }

    /// Gradient accumulated by the last `backward()`, if this is a leaf.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Cut the graph: same values, no parents, no recording.
    pub fn detach(&self) -> Tensor<E> {
        Tensor::from_shared(&self.0.shape, Arc::clone(&self.0.data), false)
            .expect("consistent by construction")
    }

    /// Reverse-mode gradient accumulation from a scalar loss. Rejects
    /// non-scalar roots and repeated calls on the same root without reset.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Invalid(format!(
                "backward() requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if self.0.backward_ran.get() {
            return Err(Error::Invalid(
                "backward() already ran for this loss; rebuild the graph or reset".into(),
            ));
        }

        // Iterative post-order DFS over the recording subgraph.
        let mut order: Vec<Tensor<E>> = Vec::new();
        let mut visited: HashMap<usize, ()> = HashMap::new();
        let mut stack: Vec<(Tensor<E>, usize)> = vec![(self.clone(), 0)];
        while let Some((node, child)) = stack.pop() {
            let key = Rc::as_ptr(&node.0) as usize;
            if child == 0 {
                if visited.contains_key(&key) {
                    continue;
                }
            }
            if child < node.0.parents.len() {
                let parent = node.0.parents[child].clone();
                stack.push((node, child + 1));
                if parent.0.requires_path
                    && !visited.contains_key(&(Rc::as_ptr(&parent.0) as usize))
                {
                    stack.push((parent, 0));
                }
            } else {
                visited.insert(key, ());
                order.push(node);
            }
        }

        *self.0.grad.borrow_mut() = Some(vec![E::one()]);
        for node in order.iter().rev() {
            let Some(back) = &node.0.backward else {
                continue;
            };
            // Take (and free) this node's accumulated gradient.
            let g = match node.0.grad.borrow_mut().take() {
                Some(g) => g,
                None => continue,
            };
            let contribs = back(&g);
            debug_assert_eq!(contribs.len(), node.0.parents.len());
            for (parent, contrib) in node.0.parents.iter().zip(contribs) {
                if !parent.0.requires_path {
                    continue;
                }
                let Some(c) = contrib else { continue };
                debug_assert_eq!(c.len(), parent.numel());
                let mut slot = parent.0.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&c) {
                            *a = *a + *b;
                        }
                    }
                    None => *slot = Some(c),
                }
            }
        }

        // Leaves that are reachable but received no flow still get zeros,
        // and every populated gradient must be finite.
        for node in &order {
            if node.0.is_leaf {
                let mut slot = node.0.grad.borrow_mut();
                if slot.is_none() {
                    *slot = Some(vec![E::zero(); node.numel()]);
                }
                if let Some(g) = slot.as_ref() {
                    if g.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Numeric(
                            "non-finite gradient produced by backward()".into(),
                        ));
                    }
                }
            }
        }

        self.0.backward_ran.set(true);
        Ok(())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn cast<F: Element>(&self) -> Tensor<F> {
        let data: Vec<F> = self.0.data.iter().map(|v| F::of_f64(v.as_f64())).collect();
        Tensor::from_vec(&self.0.shape, data).expect("consistent by construction")
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}
