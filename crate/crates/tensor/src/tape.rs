use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>, &mut Gradients<T>)>;

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// Wengert list of recorded operations.
///
/// Nodes are appended in creation order; [`Tape::backward`] walks them in
/// reverse exactly once. A node only keeps its backward closure when at least
/// one input requires a gradient, so inference passes store values only.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    /// Finite-value checking follows `debug_assertions`.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Appends the result of an operation over `inputs`.
    ///
    /// `backward` receives the output gradient through [`BackwardCtx`] and
    /// accumulates into input slots obtained from [`Gradients::slot`].
    pub fn record<F>(&mut self, op: &'static str, value: Tensor<T>, inputs: &[Var], backward: F) -> Result<Var>
    where
        F: Fn(&BackwardCtx<'_, T>, &mut Gradients<T>) + 'static,
    {
        if self.check_finite && !value.all_finite() {
            return Err(TensorError::NonFinite { op });
        }
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn<T>),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar(shape.to_vec()));
        }
        let mut grads = Gradients {
            slots: (0..self.nodes.len()).map(|_| None).collect(),
            numel: self.nodes.iter().map(|n| n.value.numel()).collect(),
            requires: self.nodes.iter().map(|n| n.requires_grad).collect(),
        };
        if !self.nodes[loss.0].requires_grad {
            return Ok(grads);
        }
        grads.slots[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads.slots[i].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                tape: self,
                out: Var(i),
                grad: &grad,
            };
            backward(&ctx, &mut grads);
        }
        Ok(grads)
    }
}

/// View handed to backward closures.
pub struct BackwardCtx<'a, T> {
    tape: &'a Tape<T>,
    out: Var,
    grad: &'a [T],
}

impl<T: Float> BackwardCtx<'_, T> {
    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }

    pub fn output(&self) -> &Tensor<T> {
        self.tape.value(self.out)
    }

    /// Gradient of the loss with respect to this node's output.
    pub fn grad(&self) -> &[T] {
        self.grad
    }
}

/// Gradient accumulators, one lazily allocated buffer per node.
pub struct Gradients<T> {
    slots: Vec<Option<Vec<T>>>,
    numel: Vec<usize>,
    requires: Vec<bool>,
}

impl<T: Float> Gradients<T> {
    /// Mutable accumulator for `v`, zero-filled on first use. `None` when the
    /// node does not require a gradient, so callers can skip the work.
    pub fn slot(&mut self, v: Var) -> Option<&mut [T]> {
        if !self.requires[v.0] {
            return None;
        }
        let n = self.numel[v.0];
        Some(self.slots[v.0].get_or_insert_with(|| vec![T::zero(); n]).as_mut_slice())
    }

    /// Adds `delta` elementwise into the accumulator of `v`.
    pub fn accumulate(&mut self, v: Var, delta: &[T]) {
        if let Some(g) = self.slot(v) {
            for (a, &d) in g.iter_mut().zip(delta) {
                *a += d;
            }
        }
    }

    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.slots[v.0].as_deref()
    }

    /// Gradient of `v`, or zeros when the loss does not reach it.
    pub fn get_or_zeros(&self, v: Var) -> Vec<T> {
        self.get(v)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); self.numel[v.0]])
    }
}
