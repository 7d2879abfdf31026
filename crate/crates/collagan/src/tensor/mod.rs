//! Dense f64 tensors and a reverse-mode differentiation graph.
//!
//! Everything the networks and losses touch is a [`Tensor`]: a shape plus a
//! row-major f64 buffer. Differentiable computations run through [`Graph`],
//! which records op nodes and replays them backwards on demand.

pub mod graph;
pub mod snapshot;

pub use graph::{Graph, Value};

use thiserror::Error;

/// Errors raised by tensor construction and graph operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} elements but buffer has {got}")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op}: rank {got} where {expected} expected")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: axis {axis} extents differ ({left} vs {right})")]
    DimMismatch {
        op: &'static str,
        axis: usize,
        left: usize,
        right: usize,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: {what} = {value} not supported")]
    Unsupported {
        op: &'static str,
        what: &'static str,
        value: usize,
    },
    #[error("{op}: spatial extent {extent} along axis {axis} too small (need at least {min})")]
    SpatialTooSmall {
        op: &'static str,
        axis: usize,
        extent: usize,
        min: usize,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("class index {index} out of range for {classes} classes")]
    ClassOutOfRange { index: usize, classes: usize },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: empty input list")]
    EmptyInput { op: &'static str },
    #[error("dropout rate {rate} outside [0, 1)")]
    BadDropoutRate { rate: f64 },
}

/// Dense row-major f64 tensor. The last axis is contiguous; for image
/// tensors the layout is `[batch, channel, height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Extent along `axis`.
    pub fn extent(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Same data viewed under a different shape with equal element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor, TensorError> {
        Tensor::new(shape, self.data.clone())
    }

    /// Tensor of i.i.d. uniform draws from `[lo, hi)`.
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl rand::Rng) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
        }
    }
}

/// Shape equality check producing a structured error naming the first
/// offending axis.
pub(crate) fn check_same_shape(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<(), TensorError> {
    if a.len() != b.len() {
        return Err(TensorError::RankMismatch {
            op,
            expected: a.len(),
            got: b.len(),
        });
    }
    for (axis, (&x, &y)) in a.iter().zip(b.iter()).enumerate() {
        if x != y {
            return Err(TensorError::DimMismatch {
                op,
                axis,
                left: x,
                right: y,
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_shape_data_mismatch() {
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::ShapeDataMismatch { expected: 6, got: 5, .. }));
    }

    #[test]
    fn scalar_and_item() {
        let t = Tensor::scalar(2.5);
        assert!(t.is_scalar());
        assert_eq!(t.item(), 2.5);
    }

    #[test]
    fn check_same_shape_names_offending_axis() {
        let err = check_same_shape("add", &[2, 3, 4], &[2, 5, 4]).unwrap_err();
        match err {
            TensorError::DimMismatch { axis, left, right, .. } => {
                assert_eq!((axis, left, right), (1, 3, 5));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }
}
