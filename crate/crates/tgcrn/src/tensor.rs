//! Dense n-dimensional tensors, row-major, with shape-checked construction.
//!
//! Tensors are immutable values: every operation in [`crate::autodiff`]
//! leaves its inputs bit-identical and produces a fresh tensor.

use std::fmt;

use crate::scalar::Scalar;

/// Errors from tensor construction and tensor operations.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorError {
    /// Shape product does not match the provided data length.
    DataLength { shape: Vec<usize>, expected: usize, got: usize },
    /// A dimension of size zero was supplied.
    EmptyDimension { shape: Vec<usize> },
    /// Two operands have incompatible shapes for the named operation.
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    /// An operation required a particular rank or shape and did not get it.
    ShapeContract { op: &'static str, shape: Vec<usize>, wanted: &'static str },
    /// A reduction or backward seed required a scalar tensor.
    NotScalar { op: &'static str, shape: Vec<usize> },
    /// A row index was outside the table passed to a gather.
    RowOutOfRange { op: &'static str, index: usize, rows: usize },
    /// An operation produced a non-finite value.
    NonFinite { op: &'static str },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::DataLength { shape, expected, got } => {
                write!(f, "shape {shape:?} wants {expected} elements, got {got}")
            }
            TensorError::EmptyDimension { shape } => {
                write!(f, "shape {shape:?} contains a zero dimension")
            }
            TensorError::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: incompatible shapes {left:?} and {right:?}")
            }
            TensorError::ShapeContract { op, shape, wanted } => {
                write!(f, "{op}: got shape {shape:?}, wanted {wanted}")
            }
            TensorError::NotScalar { op, shape } => {
                write!(f, "{op}: expected a scalar, got shape {shape:?}")
            }
            TensorError::RowOutOfRange { op, index, rows } => {
                write!(f, "{op}: row index {index} out of range for {rows} rows")
            }
            TensorError::NonFinite { op } => write!(f, "{op}: produced a non-finite value"),
        }
    }
}

impl std::error::Error for TensorError {}

/// Dense row-major tensor over a scalar type.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
}

impl<S: Scalar> Tensor<S> {
    /// Build a tensor from a shape and row-major data.
    pub fn from_vec(shape: Vec<usize>, data: Vec<S>) -> Result<Self, TensorError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::EmptyDimension { shape });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength { shape, expected, got: data.len() });
        }
        Ok(Tensor { shape, data, requires_grad: false })
    }

    /// 2-D tensor from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self, TensorError> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if m == 0 || n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(TensorError::ShapeContract {
                op: "from_rows",
                shape: vec![m, n],
                wanted: "non-empty rectangular rows",
            });
        }
        let mut data = Vec::with_capacity(m * n);
        for r in rows {
            data.extend_from_slice(r);
        }
        Tensor::from_vec(vec![m, n], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![S::zero(); n], requires_grad: false }
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![S::one(); n], requires_grad: false }
    }

    pub fn full(shape: Vec<usize>, value: S) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![value; n], requires_grad: false }
    }

    /// Rank-0-like scalar carrier, stored as shape `[1]`.
    pub fn scalar(value: S) -> Self {
        Tensor { shape: vec![1], data: vec![value], requires_grad: false }
    }

    /// Mark the tensor as a trainable parameter.
    pub fn requiring_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> Result<S, TensorError> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(TensorError::NotScalar { op: "item", shape: self.shape.clone() })
        }
    }

    /// Rows and columns of a 2-D tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize), TensorError> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            _ => Err(TensorError::ShapeContract { op, shape: self.shape.clone(), wanted: "rank 2" }),
        }
    }

    /// Element of a 2-D tensor.
    pub fn at2(&self, i: usize, j: usize) -> S {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Frobenius-norm distance to another tensor of the same shape.
    pub fn frobenius_distance(&self, other: &Tensor<S>) -> Result<S, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "frobenius_distance",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let s: S = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        Ok(s.sqrt())
    }

    /// Copy without the parameter flag.
    pub(crate) fn detached(&self) -> Tensor<S> {
        Tensor { shape: self.shape.clone(), data: self.data.clone(), requires_grad: false }
    }

    pub(crate) fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
        }
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<S>) -> Tensor<S> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data, requires_grad: false }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        let err = Tensor::<f64>::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0]).unwrap_err();
        assert_eq!(err, TensorError::DataLength { shape: vec![2, 2], expected: 4, got: 3 });
    }

    #[test]
    fn zero_dimension_rejected() {
        let err = Tensor::<f64>::from_vec(vec![2, 0], vec![]).unwrap_err();
        assert!(matches!(err, TensorError::EmptyDimension { .. }));
    }

    #[test]
    fn scalar_item() {
        let t = Tensor::scalar(3.5f64);
        assert_eq!(t.item().unwrap(), 3.5);
        assert!(Tensor::<f64>::zeros(vec![2]).item().is_err());
    }

    #[test]
    fn at2_row_major() {
        let t = Tensor::from_vec(vec![2, 3], vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(t.at2(0, 2), 3.0);
        assert_eq!(t.at2(1, 0), 4.0);
    }
}
