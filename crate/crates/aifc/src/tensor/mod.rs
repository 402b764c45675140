//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain immutable value (shape + row-major data). Forward
//! kernels live in [`ops`]; the [`graph::Graph`] trait runs the same network
//! code either tape-free ([`graph::EvalGraph`], used by encode/decode) or on
//! an explicit tape ([`graph::TrainGraph`], used for training).

pub mod grad_check;
pub mod graph;
pub mod io;
pub mod ops;

use std::sync::Arc;

use rand::Rng;

use crate::error::{Result, TensorError};

/// Immutable n-dimensional f64 array in row-major order.
///
/// Image-like data uses BCHW layout with the batch dimension always present.
/// Cloning is cheap (shared storage); data is never mutated after creation.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "element count {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_vec(shape, vec![0.0; shape.iter().product()])
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        Tensor::from_vec(shape, vec![v; shape.iter().product()])
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    /// Scalar as a rank-1 tensor of shape `[1]`.
    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(&[1], vec![v])
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn rand_uniform<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::from_vec(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// The single element of a `[1]` tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Interpret as BCHW, returning (b, c, h, w).
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            &[b, c, h, w] => Ok((b, c, h, w)),
            s => Err(TensorError::ShapeMismatch(format!(
                "expected rank-4 BCHW tensor, got shape {s:?}"
            ))),
        }
    }

    pub(crate) fn shared_data(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    pub(crate) fn with_shape(shape: Vec<usize>, data: Arc<Vec<f64>>) -> Tensor {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    /// Elementwise map into a fresh tensor.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_vec(&self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Sum of squared elements.
    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Exact bitwise equality (shape and every f64 bit pattern).
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// He-uniform initialization: U(-b, b) with b = sqrt(6 / fan_in).
pub fn he_uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let b = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::rand_uniform(rng, shape, -b, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_element_count_agree() {
        let t = Tensor::zeros(&[2, 3, 4, 5]);
        assert_eq!(t.numel(), 120);
        assert_eq!(t.shape(), &[2, 3, 4, 5]);
    }

    #[test]
    #[should_panic]
    fn from_vec_rejects_wrong_count() {
        Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn bit_eq_detects_sign_of_zero() {
        let a = Tensor::from_vec(&[1], vec![0.0]);
        let b = Tensor::from_vec(&[1], vec![-0.0]);
        assert!(!a.bit_eq(&b));
        assert_eq!(a, b); // PartialEq compares values, bit_eq compares bits
    }
}
