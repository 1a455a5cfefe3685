//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Complex tensors are real tensors whose last axis has length 2 holding
//! interleaved `(re, im)` pairs. The gradient of a real loss with respect to
//! a complex entry `z` is stored the same way, as `(dL/d re, dL/d im)`.
//!
//! A [`Tape`] is an arena of nodes in execution order. Each operation node
//! keeps its parents and a closure that maps the upstream gradient to one
//! gradient per parent.

mod check;
mod complex;
mod ops;
mod optim;
mod params;

pub use check::{grad_check, GradCheckConfig, GradCheckReport, TensorCheck};
pub use ops::{sign_pos, BatchStats, BN_EPS, BN_MOMENTUM};
pub use optim::{Adam, PlateauScheduler};
pub use params::{Bound, ParamId, ParamSet};

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::linalg::C64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Row-major dense tensor. A scalar has shape `[]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return dim_err(format!("shape {shape:?} needs {len} values, got {}", data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    /// Complex tensor of logical shape `shape`; the stored shape gains a
    /// trailing axis of 2.
    pub fn from_complex(shape: &[usize], values: &[C64]) -> Result<Self> {
        let mut full = shape.to_vec();
        full.push(2);
        Tensor::new(full, to_interleaved(values))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_complex(&self) -> Vec<C64> {
        to_complex(&self.data)
    }
}

pub(crate) fn to_complex(v: &[f64]) -> Vec<C64> {
    v.chunks_exact(2).map(|p| C64::new(p[0], p[1])).collect()
}

pub(crate) fn to_interleaved(v: &[C64]) -> Vec<f64> {
    v.iter().flat_map(|z| [z.re, z.im]).collect()
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Maps `(upstream gradient, parent values)` to one gradient per parent.
pub type BackwardFn = Box<dyn Fn(&[f64], &[&Tensor]) -> Vec<Vec<f64>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    mode: Mode,
    consumed: bool,
}

impl Tape {
    pub fn new(mode: Mode) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            consumed: false,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an operation. The node requires a gradient when any parent
    /// does; otherwise `backward` is dropped.
    pub fn push_op(
        &mut self,
        value: Tensor,
        parents: &[Var],
        backward: impl Fn(&[f64], &[&Tensor]) -> Vec<Vec<f64>> + 'static,
    ) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Propagates gradients from the scalar `loss` to every node that
    /// requires one. A tape supports a single backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Autodiff("backward already ran on this tape".into()));
        }
        if self.nodes.is_empty() {
            return Err(Error::Autodiff("empty tape".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Autodiff(format!(
                "loss must be scalar, has shape {:?}",
                self.nodes[loss.0].value.shape
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = &node.backward else { continue };
            let (lower, upper) = grads.split_at_mut(i);
            let Some(upstream) = upper[0].as_ref() else { continue };
            let values: Vec<&Tensor> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let parent_grads = backward(upstream, &values);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                if !self.nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.len(), self.nodes[p].value.len());
                match &mut lower[p] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
            }
        }
        for node in &mut self.nodes {
            node.backward = None;
        }
        Ok(Gradients { grads })
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` when no gradient reached `v`.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut t = Tape::new(Mode::Train);
        let x = t.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap(), true);
        let s = t.sum_all(x);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn second_backward_is_an_error() {
        let mut t = Tape::new(Mode::Train);
        let x = t.leaf(Tensor::scalar(2.0), true);
        let y = t.mul(x, x).unwrap();
        t.backward(y).unwrap();
        assert!(matches!(t.backward(y), Err(Error::Autodiff(_))));
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut t = Tape::new(Mode::Train);
        let x = t.leaf(Tensor::zeros(vec![2]), true);
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn empty_tape_is_rejected() {
        let mut t = Tape::new(Mode::Train);
        assert!(t.backward(Var(0)).is_err());
    }

    #[test]
    fn shared_input_accumulates_both_paths() {
        // d/dx (x*x + 3x) = 2x + 3
        let mut t = Tape::new(Mode::Train);
        let x = t.leaf(Tensor::scalar(1.5), true);
        let sq = t.mul(x, x).unwrap();
        let lin = t.scale(x, 3.0);
        let y = t.add(sq, lin).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new(Mode::Train);
        let x = t.leaf(Tensor::scalar(1.0), true);
        let c = t.constant(Tensor::scalar(4.0));
        let y = t.mul(x, c).unwrap();
        let g = t.backward(y).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap(), &[4.0]);
    }
}
