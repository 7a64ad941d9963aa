//! Real-tensor engine: dense f64 tensors, a reverse-mode differentiation
//! graph, the neural building blocks (matmul, GeLU, layer norm, softmax,
//! embedding lookup), and the Adam optimizer.
//!
//! Everything is 64-bit and single-threaded by default so forward passes are
//! bit-identical across runs and platforms. Large matmuls may fan out across
//! disjoint output rows when the graph is built in parallel mode; that split
//! is also bit-exact.

mod adam;
mod gradcheck;
mod graph;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{grad_check, GradCheckSpec};
pub use graph::{AffineMap, Graph, VarId};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("embedding index {index} out of range for table with {rows} rows")]
    IndexOutOfRange { index: usize, rows: usize },
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    BadShape { len: usize, shape: Vec<usize> },
}

/// Dense row-major f64 tensor with optional gradient storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumericsError> {
        let n: usize = shape.iter().product();
        if shape.contains(&0) || n != data.len() {
            return Err(NumericsError::BadShape { len: data.len(), shape });
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n], requires_grad: false, grad: None }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![value; n], requires_grad: false, grad: None }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value], requires_grad: false, grad: None }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<f64>>) {
        if let Some(g) = &grad {
            assert_eq!(g.len(), self.data.len(), "grad shape must match data");
        }
        self.grad = grad;
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// (rows, cols) view: 1-D tensors are rows, scalars are 1x1.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => panic!("dims2 on tensor of rank {}", self.shape.len()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Exact-erf GeLU: 0.5 * x * (1 + erf(x / sqrt(2))).
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Derivative of the exact GeLU: Phi(x) + x * phi(x).
pub fn gelu_grad_scalar(x: f64) -> f64 {
    let phi_cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let phi_pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    phi_cdf + x * phi_pdf
}

/// Standalone matrix product (checked). The graph op is `Graph::matmul`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    let (m, n) = a.dims2();
    let (n2, p) = b.dims2();
    if n != n2 {
        return Err(NumericsError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * p];
    graph::matmul_kernel(crate::par::ExecMode::Sequential, a.data(), b.data(), &mut out, m, n, p);
    Tensor::new(vec![m, p], out)
}
