//! Dense tensors and the reverse-mode differentiation graph.

pub mod gemm;
pub mod graph;
pub mod param;

use std::sync::Arc;

use crate::error::TensorError;
use crate::rng::DetRng;
use crate::scalar::Scalar;

/// Dense row-major tensor. Cheap to clone (shared storage).
#[derive(Debug, Clone)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
    /// Default grad-tracking flag when this tensor is fed into a graph.
    pub requires_grad: bool,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data: Arc::new(data), requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![S::zero(); numel]), requires_grad: false }
    }

    pub fn filled(shape: Vec<usize>, v: S) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![v; numel]), requires_grad: false }
    }

    pub fn scalar(v: S) -> Self {
        Tensor { shape: vec![1], data: Arc::new(vec![v]), requires_grad: false }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> S) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(&mut f).collect();
        Tensor { shape, data: Arc::new(data), requires_grad: false }
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut DetRng) -> Self {
        Self::from_fn(shape, |_| S::from_f64(rng.normal() * std))
    }

    /// C-order identity matrix.
    pub fn eye(n: usize) -> Self {
        Self::from_fn(vec![n, n], |i| if i / n == i % n { S::one() } else { S::zero() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    /// Mutable access; clones the storage if shared.
    pub fn data_mut(&mut self) -> &mut [S] {
        Arc::<Vec<S>>::make_mut(&mut self.data).as_mut_slice()
    }

    pub(crate) fn storage(&self) -> &Arc<Vec<S>> {
        &self.data
    }

    pub(crate) fn from_storage(shape: Vec<usize>, data: Arc<Vec<S>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data, requires_grad: false }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(TensorError::ShapeMismatch(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        Ok(Tensor { shape, data: self.data.clone(), requires_grad: self.requires_grad })
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
            requires_grad: false,
        }
    }

    /// Max |a - b| over all elements.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a.into_f64() - b.into_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.into_f64()).collect()
    }
}
