//! Dense rank-4 tensors with reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable `(batch, channels, height, width)` array.
//! Every op that touches a tensor with `requires_grad` records a backward
//! closure over its inputs; [`Tensor::backward`] walks that graph in reverse
//! topological order and accumulates gradients into the leaf tensors.

mod adam;
mod conv;
mod element;
mod ops;

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};

pub use adam::{Adam, AdamConfig, AdamState};
pub use conv::{conv2d, inject_conv_backward_fault, ConvWeights, Padding};
pub use element::Element;
pub use ops::{concat_channels, softmax_over_set, split_channels, PoolMode};

use crate::error::{Error, Result};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Backward rule for one recorded op.
pub(crate) trait GradFn<T: Element>: Send + Sync {
    fn inputs(&self) -> &[Tensor<T>];

    /// Gradient w.r.t. each input, given the op's output values and the
    /// gradient flowing into that output. `None` skips an input.
    fn backward(&self, output: &[T], grad: &[T]) -> Vec<Option<Vec<T>>>;
}

struct Node<T: Element> {
    shape: Shape,
    data: Vec<T>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    grad_fn: Option<Box<dyn GradFn<T>>>,
}

pub struct Tensor<T: Element = f32> {
    node: Arc<Node<T>>,
}

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            node: Arc::clone(&self.node),
        }
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("dtype", &T::NAME)
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if shape.n == 0 || shape.c == 0 || shape.h == 0 || shape.w == 0 {
            return Err(Error::shape(format!("empty dimension in {shape}")));
        }
        if data.len() != shape.numel() {
            return Err(Error::shape(format!(
                "{} values do not fill {shape}",
                data.len()
            )));
        }
        Ok(Self::leaf(shape, data, false))
    }

    /// A trainable leaf.
    pub fn parameter(shape: Shape, data: Vec<T>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        Ok(Self::leaf(t.node.shape, t.into_data(), true))
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Self::leaf(shape, vec![value; shape.numel()], false)
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Shape::scalar(), value)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Self::leaf(shape, data, false)
    }

    fn leaf(shape: Shape, data: Vec<T>, requires_grad: bool) -> Self {
        Tensor {
            node: Arc::new(Node {
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                grad_fn: None,
            }),
        }
    }

    /// Result of an op. The backward closure is kept only when some input
    /// needs a gradient, so inference builds no graph.
    pub(crate) fn from_op(shape: Shape, data: Vec<T>, grad_fn: Box<dyn GradFn<T>>) -> Self {
        debug_assert_eq!(data.len(), shape.numel());
        let requires_grad = grad_fn.inputs().iter().any(Tensor::requires_grad);
        Tensor {
            node: Arc::new(Node {
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                grad_fn: requires_grad.then_some(grad_fn),
            }),
        }
    }

    pub fn shape(&self) -> Shape {
        self.node.shape
    }

    pub fn data(&self) -> &[T] {
        &self.node.data
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.node.data[self.node.shape.index(n, c, h, w)]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.grad_fn.is_none()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        match self.node.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::shape(format!(
                "item() on non-scalar {}",
                self.node.shape
            ))),
        }
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.lock().expect("grad lock") = None;
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::leaf(self.node.shape, self.node.data.clone(), false)
    }

    pub fn into_data(self) -> Vec<T> {
        match Arc::try_unwrap(self.node) {
            Ok(node) => node.data,
            Err(shared) => shared.data.clone(),
        }
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        let data = self
            .node
            .data
            .iter()
            .map(|v| U::from_f64_lossy(v.as_f64()))
            .collect();
        Tensor::leaf(self.node.shape, data, self.node.requires_grad && self.is_leaf())
    }

    fn key(&self) -> *const Node<T> {
        Arc::as_ptr(&self.node)
    }

    /// Reverse-mode pass from a scalar. Leaves with `requires_grad`
    /// accumulate into their existing gradient; call [`Tensor::zero_grad`]
    /// between steps to start fresh.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got {}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let order = self.topological_order();
        let mut pending: HashMap<*const Node<T>, Vec<T>> = HashMap::new();
        pending.insert(self.key(), vec![T::one()]);

        for tensor in order.iter().rev() {
            let Some(grad) = pending.remove(&tensor.key()) else {
                continue;
            };
            match &tensor.node.grad_fn {
                None => {
                    let mut slot = tensor.node.grad.lock().expect("grad lock");
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, g)| *a = *a + *g),
                        None => *slot = Some(grad),
                    }
                }
                Some(grad_fn) => {
                    let input_grads = grad_fn.backward(&tensor.node.data, &grad);
                    debug_assert_eq!(input_grads.len(), grad_fn.inputs().len());
                    for (input, g) in grad_fn.inputs().iter().zip(input_grads) {
                        let Some(g) = g else { continue };
                        if !input.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(g.len(), input.numel());
                        match pending.get_mut(&input.key()) {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a = *a + *v),
                            None => {
                                pending.insert(input.key(), g);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Nodes reachable through `requires_grad` edges, inputs before outputs.
    fn topological_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.key()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(grad_fn) = &t.node.grad_fn {
                for input in grad_fn.inputs() {
                    if input.requires_grad() && !visited.contains(&input.key()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }
}
