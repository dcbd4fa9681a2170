use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::element::Element;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any graph nodes on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(u64);

impl TensorId {
    fn fresh() -> Self {
        TensorId(NEXT_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// Vector-Jacobian product of a recorded operation.
///
/// `backward` receives the operation inputs, its output and the gradient of
/// the loss with respect to that output, and returns one gradient per input
/// (`None` when the input does not require one).
pub trait BackwardOp<T: Element>: Send + Sync {
    fn name(&self) -> &'static str;

    fn backward(&self, inputs: &[Tensor<T>], output: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>>;
}

struct Node<T: Element> {
    inputs: Vec<Tensor<T>>,
    op: Box<dyn BackwardOp<T>>,
}

struct Inner<T: Element> {
    id: TensorId,
    data: Arc<Vec<T>>,
    shape: Vec<usize>,
    node: Option<Node<T>>,
    is_var: bool,
}

/// Immutable n-dimensional array with an optional autodiff history.
pub struct Tensor<T: Element = f32>(Arc<Inner<T>>);

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(self.0.clone())
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("dtype", &T::NAME)
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

impl<T: Element> Tensor<T> {
    fn build(data: Arc<Vec<T>>, shape: Vec<usize>, node: Option<Node<T>>, is_var: bool) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            numel,
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor(Arc::new(Inner {
            id: TensorId::fresh(),
            data,
            shape,
            node,
            is_var,
        }))
    }

    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Self {
        Self::build(Arc::new(data), shape.to_vec(), None, false)
    }

    /// A leaf whose gradient is collected by [`Tensor::backward`].
    pub fn new_var(data: Vec<T>, shape: &[usize]) -> Self {
        Self::build(Arc::new(data), shape.to_vec(), None, true)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(T::zero(), shape)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(T::one(), shape)
    }

    pub fn full(value: T, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_vec(vec![value; n], shape)
    }

    pub fn scalar(value: T) -> Self {
        Self::from_vec(vec![value], &[])
    }

    pub fn from_f64_slice(values: &[f64], shape: &[usize]) -> Self {
        Self::from_vec(values.iter().map(|&v| T::from_f64(v)).collect(), shape)
    }

    /// Result of an operation; the graph node is only kept when an input
    /// requires a gradient and recording is enabled.
    pub fn from_op(
        data: Vec<T>,
        shape: &[usize],
        inputs: Vec<Tensor<T>>,
        op: impl BackwardOp<T> + 'static,
    ) -> Self {
        let track = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        let node = track.then(|| Node {
            inputs,
            op: Box::new(op),
        });
        Self::build(Arc::new(data), shape.to_vec(), node, false)
    }

    /// Same as [`Tensor::from_op`] but sharing an existing buffer.
    pub(crate) fn from_op_shared(
        data: Arc<Vec<T>>,
        shape: &[usize],
        inputs: Vec<Tensor<T>>,
        op: impl BackwardOp<T> + 'static,
    ) -> Self {
        let track = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        let node = track.then(|| Node {
            inputs,
            op: Box::new(op),
        });
        Self::build(data, shape.to_vec(), node, false)
    }

    pub(crate) fn shared_data(&self) -> Arc<Vec<T>> {
        self.0.data.clone()
    }

    pub fn id(&self) -> TensorId {
        self.0.id
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

    pub fn dim(&self, axis: usize) -> usize {
        self.0.shape[axis]
    }

    /// Shape of a rank-4 tensor as `(n, c, h, w)`.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        let s = self.shape();
        assert_eq!(s.len(), 4, "expected a rank-4 tensor, got shape {s:?}");
        (s[0], s[1], s[2], s[3])
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.as_ref().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.iter().map(|v| v.as_f64()).collect()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn is_var(&self) -> bool {
        self.0.is_var
    }

    pub fn requires_grad(&self) -> bool {
        self.0.is_var || self.0.node.is_some()
    }

    /// Same values, no history.
    pub fn detach(&self) -> Self {
        if !self.requires_grad() {
            return self.clone();
        }
        Self::build(self.0.data.clone(), self.0.shape.clone(), None, false)
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| (*a - *b).abs().as_f64())
            .fold(0.0, f64::max)
    }

    /// Element-type conversion; the result is a fresh leaf.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor::from_vec(
            self.data().iter().map(|v| U::from_f64(v.as_f64())).collect(),
            self.shape(),
        )
    }

    /// Tensors reachable from `self` through recorded nodes, inputs before users.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.0.node {
                for input in &node.inputs {
                    if input.requires_grad() && !seen.contains(&input.id()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }

    /// Reverse-mode gradient of this scalar with respect to every reachable var.
    pub fn backward(&self) -> Gradients<T> {
        assert_eq!(
            self.numel(),
            1,
            "backward() needs a scalar, got shape {:?}",
            self.shape()
        );
        let mut result = Gradients::default();
        if !self.requires_grad() {
            return result;
        }
        let order = self.topo_order();
        let mut pending: HashMap<TensorId, Vec<T>> = HashMap::new();
        pending.insert(self.id(), vec![T::one()]);
        for t in order.iter().rev() {
            let Some(grad) = pending.remove(&t.id()) else {
                continue;
            };
            if t.0.is_var {
                result
                    .grads
                    .insert(t.id(), Tensor::from_vec(grad, t.shape()));
                continue;
            }
            let Some(node) = &t.0.node else { continue };
            let input_grads = node.op.backward(&node.inputs, t, &grad);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", node.op.name());
            for (input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !input.requires_grad() {
                    continue;
                }
                debug_assert_eq!(g.len(), input.numel(), "{} gradient size", node.op.name());
                match pending.get_mut(&input.id()) {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&g) {
                            *a += *v;
                        }
                    }
                    None => {
                        pending.insert(input.id(), g);
                    }
                }
            }
        }
        result
    }
}

/// Gradients of a scalar with respect to the vars it depends on.
pub struct Gradients<T: Element = f32> {
    grads: HashMap<TensorId, Tensor<T>>,
}

impl<T: Element> Default for Gradients<T> {
    fn default() -> Self {
        Gradients {
            grads: HashMap::new(),
        }
    }
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, t: &Tensor<T>) -> Option<&Tensor<T>> {
        self.grads.get(&t.id())
    }

    pub fn get_id(&self, id: TensorId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
