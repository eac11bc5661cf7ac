//! Deterministic tensor kernels with hand-written reverse-mode gradients.
//!
//! All math is 32-bit; reductions (batch statistics, losses) accumulate in
//! 64-bit. Kernels are plain functions over row-major buffers; layers that
//! need a backward pass return an explicit cache consumed by the matching
//! `*_backward` function.

pub mod adam;
pub mod archive;
pub mod gradcheck;
pub mod ops;
pub mod rng;

pub use adam::{Adam, AdamState, RowAdamState};
pub use ops::*;
pub use rng::Rng;

use crate::error::{Error, Result};

/// Row-major tensor of 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match {} elements",
            shape,
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Uniform init in [-bound, bound].
    pub fn uniform(shape: &[usize], bound: f32, rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform(-bound, bound)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// NaN/Inf anywhere is a hard failure.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        for &x in &self.data {
            if !x.is_finite() {
                return Err(Error::NonFinite(what.to_string()));
            }
        }
        Ok(())
    }
}

/// A value tensor paired with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(&value.shape);
        Parameter { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data.fill(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_accounting() {
        let t = Tensor::zeros(&[3, 4]);
        assert_eq!(t.numel(), 12);
        assert_eq!(t.rank(), 2);
        let p = Parameter::new(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        assert_eq!(p.grad.shape, vec![2, 2]);
        assert!(p.grad.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn finite_check_catches_nan() {
        let mut t = Tensor::zeros(&[2]);
        assert!(t.check_finite("t").is_ok());
        t.data[1] = f32::NAN;
        assert!(matches!(t.check_finite("t"), Err(Error::NonFinite(_))));
    }
}
