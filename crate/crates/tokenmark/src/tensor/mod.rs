//! Dense fp32 tensors with reverse-mode autodiff.
//!
//! [`Tensor`] is plain row-major storage with an optional same-shape gradient
//! buffer. [`Param`] wraps a tensor in shared ownership so a training loop,
//! an autodiff [`Graph`] and an [`optim::Optimizer`] can all touch the same
//! values. Graphs are per-iteration tapes: bind parameters, record eager ops,
//! call [`Graph::backward`], then drop the graph and step the optimizer.

mod graph;
pub mod optim;

pub use graph::{Graph, NodeId};

use std::cell::{Ref, RefCell, RefMut};
use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("numeric fault in {op}: {detail}")]
    NumericFault { op: &'static str, detail: String },
    #[error("gradient missing for parameter '{0}' at optimizer step")]
    MissingGrad(String),
    #[error("invalid tensor construction: {0}")]
    BadConstruction(String),
}

pub type TensorResult<T> = Result<T, TensorError>;

// ── Tensor storage ──────────────────────────────────────────────────────────

/// Row-major fp32 tensor. At most two axes are used by the ops in this crate;
/// a 1-D tensor behaves as a single row where a matrix is expected.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n], grad: None }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> TensorResult<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::BadConstruction(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data, grad: None })
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn(rng: &mut impl Rng, shape: &[usize], std: f32) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal) * std).collect();
        Tensor { shape: shape.to_vec(), data, grad: None }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor { shape: vec![1], data: vec![v], grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// (rows, cols) view of the shape; 1-D tensors are single rows.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => panic!("tensor rank {} unsupported", self.shape.len()),
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// Add `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f32]) {
        assert_eq!(g.len(), self.data.len(), "gradient length mismatch");
        match &mut self.grad {
            Some(buf) => {
                for (b, v) in buf.iter_mut().zip(g) {
                    *b += v;
                }
            }
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn has_nan(&self) -> bool {
        self.data.iter().any(|v| !v.is_finite())
    }
}

// ── Shared parameters ───────────────────────────────────────────────────────

/// A named, trainable tensor with shared ownership. Cloning a `Param` aliases
/// the same storage; use [`Param::deep_clone`] for an independent copy.
#[derive(Clone)]
pub struct Param {
    name: Rc<str>,
    value: Rc<RefCell<Tensor>>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Param { name: Rc::from(name.into()), value: Rc::new(RefCell::new(value)) }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn borrow(&self) -> Ref<'_, Tensor> {
        self.value.borrow()
    }

    pub fn borrow_mut(&self) -> RefMut<'_, Tensor> {
        self.value.borrow_mut()
    }

    pub fn deep_clone(&self) -> Self {
        Param::new(self.name.to_string(), self.value.borrow().clone())
    }

    /// Copy values from another parameter of identical shape.
    pub fn copy_from(&self, other: &Param) {
        let src = other.borrow();
        let mut dst = self.borrow_mut();
        assert_eq!(dst.shape(), src.shape(), "copy_from shape mismatch on {}", self.name);
        dst.data_mut().copy_from_slice(src.data());
    }
}

impl std::fmt::Debug for Param {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Param({}, shape {:?})", self.name, self.value.borrow().shape())
    }
}

/// Ordered collection of parameters. Order is the contract: optimizers,
/// serializers and transport maps all iterate in this order.
#[derive(Clone, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new(params: Vec<Param>) -> Self {
        ParamSet { params }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn push(&mut self, p: Param) {
        self.params.push(p);
    }

    pub fn extend(&mut self, other: &ParamSet) {
        self.params.extend(other.params.iter().cloned());
    }

    pub fn clear_grads(&self) {
        for p in &self.params {
            p.borrow_mut().clear_grad();
        }
    }

    /// Total element count across all parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.borrow().numel()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_invariant() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn grad_accumulates_and_clears() {
        let mut t = Tensor::zeros(&[2]);
        t.accumulate_grad(&[1.0, 2.0]);
        t.accumulate_grad(&[0.5, 0.5]);
        assert_eq!(t.grad().unwrap(), &[1.5, 2.5]);
        t.clear_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn param_aliases_until_deep_clone() {
        let p = Param::new("w", Tensor::scalar(1.0));
        let alias = p.clone();
        alias.borrow_mut().data_mut()[0] = 5.0;
        assert_eq!(p.borrow().data()[0], 5.0);
        let copy = p.deep_clone();
        copy.borrow_mut().data_mut()[0] = 9.0;
        assert_eq!(p.borrow().data()[0], 5.0);
    }
}
