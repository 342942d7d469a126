//! Dense row-major f64 tensors.
//!
//! Values are immutable once recorded on a [`crate::graph::Graph`]; the only
//! sanctioned mutation outside the graph is an optimizer updating parameter
//! data between forward passes.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Errors from tensor construction and the ops recorded on a graph.
#[derive(Debug, Clone, PartialEq)]
pub enum NumericsError {
    /// Operand shapes are incompatible for the named op.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// Flat data length does not match the product of the shape.
    ShapeDataMismatch { shape: Vec<usize>, data_len: usize },
    /// A softmax row had every entry masked out.
    DegenerateRow { row: usize },
    /// `backward` was called on a non-scalar node.
    LossNotScalar { shape: Vec<usize> },
    /// An index (token id, column, row) is out of range.
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },
    /// A sequence is shorter than the op requires.
    TooShort {
        what: &'static str,
        len: usize,
        min: usize,
    },
    /// A token sequence exceeds the model's context limit.
    ContextOverflow { len: usize, max: usize },
    /// A blend weight fell outside `[0, 1]`.
    GateOutOfRange { alpha: f64 },
}

impl core::fmt::Display for NumericsError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            NumericsError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch between {lhs:?} and {rhs:?}")
            }
            NumericsError::ShapeDataMismatch { shape, data_len } => {
                write!(f, "shape {shape:?} does not match data length {data_len}")
            }
            NumericsError::DegenerateRow { row } => {
                write!(f, "softmax row {row} is fully masked")
            }
            NumericsError::LossNotScalar { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            NumericsError::IndexOutOfRange { what, index, limit } => {
                write!(f, "{what} {index} out of range (limit {limit})")
            }
            NumericsError::TooShort { what, len, min } => {
                write!(f, "{what} has length {len}, need at least {min}")
            }
            NumericsError::ContextOverflow { len, max } => {
                write!(f, "sequence length {len} exceeds max_seq_len {max}")
            }
            NumericsError::GateOutOfRange { alpha } => {
                write!(f, "blend weight {alpha} outside [0, 1]")
            }
        }
    }
}

impl core::error::Error for NumericsError {}

/// A dense tensor: row-major f64 data plus an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor from a shape and flat row-major data.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumericsError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NumericsError::ShapeDataMismatch {
                shape,
                data_len: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    /// A 1-element tensor.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Seeded Gaussian init, mean 0.
    pub fn randn<R: Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let normal = Normal::new(0.0, std).expect("std must be finite and positive");
        let data = (0..numel).map(|_| normal.sample(rng)).collect();
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn needs_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access for optimizer updates. The length is fixed, so the
    /// shape/data invariant cannot be broken through this.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Row count of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Scalar value of a 1-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// True if every entry is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn ensure_grad(&mut self) -> &mut [f64] {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
        self.grad.as_mut().expect("just initialised")
    }

    pub(crate) fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.grad.take()
    }

    pub(crate) fn set_grad(&mut self, grad: Vec<f64>) {
        debug_assert_eq!(grad.len(), self.data.len());
        self.grad = Some(grad);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        let err = Tensor::from_vec(vec![2, 3], vec![1.0; 5]).unwrap_err();
        assert!(matches!(err, NumericsError::ShapeDataMismatch { .. }));
        let t = Tensor::from_vec(vec![2, 3], vec![1.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
        assert_eq!(t.rows(), 2);
        assert_eq!(t.cols(), 3);
    }

    #[test]
    fn randn_is_seed_deterministic() {
        use rand::SeedableRng;
        let mut a = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut b = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let ta = Tensor::randn(vec![4, 4], 0.02, &mut a);
        let tb = Tensor::randn(vec![4, 4], 0.02, &mut b);
        assert_eq!(ta.data(), tb.data());
    }

    #[test]
    fn grad_buffer_matches_len() {
        let mut t = Tensor::zeros(vec![3]);
        t.ensure_grad();
        assert_eq!(t.grad().unwrap().len(), 3);
    }
}
