//! Dense row-major `f32` tensors and the handful of elementwise primitives
//! the rest of the crate is built on.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape must have at least one dimension")]
    EmptyShape,
    #[error("shape {0:?} has a zero-sized dimension")]
    ZeroDim(Vec<usize>),
    #[error("data length {got} does not match shape {shape:?} (expected {expected})")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("non-finite scalar coefficient {0}")]
    NonFiniteScalar(f64),
    #[error("operation produced a non-finite value at flat index {0}")]
    Overflow(usize),
}

/// Dense N-dimensional array of `f32`, row-major.
///
/// `data.len() == shape.iter().product()` holds for every value that can be
/// constructed through the public API.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn check_shape(shape: &[usize]) -> Result<usize, TensorError> {
    if shape.is_empty() {
        return Err(TensorError::EmptyShape);
    }
    if shape.contains(&0) {
        return Err(TensorError::ZeroDim(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        let expected = check_shape(&shape)?;
        if data.len() != expected {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self, TensorError> {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Result<Self, TensorError> {
        let n = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        })
    }

    /// One-element tensor of shape `[1]`.
    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same data, new shape with equal element count.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self, TensorError> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Largest absolute elementwise difference, accumulated in `f64`.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64, TensorError> {
        same_shape(self, other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .fold(0.0, f64::max))
    }

    /// Elementwise bit equality (distinguishes `-0.0` from `0.0`).
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} [", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ... ({} total)", self.data.len())?;
        }
        write!(f, "]")
    }
}

pub(crate) fn same_shape(x: &Tensor, y: &Tensor) -> Result<(), TensorError> {
    if x.shape != y.shape {
        return Err(TensorError::ShapeMismatch {
            left: x.shape.clone(),
            right: y.shape.clone(),
        });
    }
    Ok(())
}

/// `a * x + y`, elementwise.
///
/// A zero `y` element contributes nothing, so `axpy(1, x, zeros)` is `x`
/// bit for bit, signed zeros included.
pub fn axpy(a: f32, x: &Tensor, y: &Tensor) -> Result<Tensor, TensorError> {
    if !a.is_finite() {
        return Err(TensorError::NonFiniteScalar(a as f64));
    }
    same_shape(x, y)?;
    let mut data = Vec::with_capacity(x.data.len());
    for (i, (&xv, &yv)) in x.data.iter().zip(&y.data).enumerate() {
        let ax = a * xv;
        let v = if yv == 0.0 { ax } else { ax + yv };
        if !v.is_finite() {
            return Err(TensorError::Overflow(i));
        }
        data.push(v);
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data,
    })
}

/// Arithmetic mean and the Euclidean norm of `x - mean`, both accumulated
/// in `f64` with a two-pass scheme.
pub fn stats(x: &Tensor) -> (f64, f64) {
    stats_slice(&x.data)
}

pub(crate) fn stats_slice(values: &[f32]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let ss: f64 = values
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum();
    (mean, ss.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn zeros_shapes() {
        let z = Tensor::zeros(&[2, 2]).unwrap();
        assert_eq!(z.data(), &[0.0; 4]);
        assert_eq!(Tensor::zeros(&[1]).unwrap().data(), &[0.0]);
        let big = Tensor::zeros(&[3, 1, 9, 9]).unwrap();
        assert_eq!(big.numel(), 243);
        assert!(big.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zeros_rejects_bad_shapes() {
        assert_eq!(Tensor::zeros(&[]), Err(TensorError::EmptyShape));
        assert!(matches!(
            Tensor::zeros(&[2, 0]),
            Err(TensorError::ZeroDim(_))
        ));
    }

    #[test]
    fn new_checks_length() {
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![1.0; 3]),
            Err(TensorError::LengthMismatch { expected: 4, got: 3, .. })
        ));
    }

    #[test]
    fn axpy_examples() {
        let r = axpy(1.0, &t(&[2], &[1.0, 2.0]), &t(&[2], &[0.0, 0.0])).unwrap();
        assert_eq!(r.data(), &[1.0, 2.0]);
        let r = axpy(0.0, &t(&[2], &[7.0, 7.0]), &t(&[2], &[3.0, 4.0])).unwrap();
        assert_eq!(r.data(), &[3.0, 4.0]);
        let r = axpy(0.5, &t(&[2], &[2.0, 4.0]), &t(&[2], &[1.0, 1.0])).unwrap();
        assert_eq!(r.data(), &[2.0, 3.0]);
    }

    #[test]
    fn axpy_errors() {
        assert!(matches!(
            axpy(1.0, &t(&[2], &[1.0, 2.0]), &t(&[1, 2], &[0.0, 0.0])),
            Err(TensorError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            axpy(f32::NAN, &t(&[1], &[1.0]), &t(&[1], &[0.0])),
            Err(TensorError::NonFiniteScalar(_))
        ));
        assert_eq!(
            axpy(2.0, &t(&[1], &[f32::MAX]), &t(&[1], &[0.0])),
            Err(TensorError::Overflow(0))
        );
    }

    #[test]
    fn axpy_identity_keeps_negative_zero() {
        let x = t(&[3], &[-0.0, 1.5, -2.0]);
        let r = axpy(1.0, &x, &Tensor::zeros(&[3]).unwrap()).unwrap();
        assert!(r.bit_eq(&x));
    }

    #[test]
    fn stats_examples() {
        assert_eq!(stats(&t(&[4], &[1.0; 4])), (1.0, 0.0));
        let (m, n) = stats(&t(&[2], &[0.0, 2.0]));
        assert_eq!(m, 1.0);
        assert!((n - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn stats_matches_two_pass_oracle_on_random_filter() {
        let mut rng = crate::rng::Rng::new(9);
        let vals: Vec<f32> = (0..81).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
        let x = t(&[9, 9], &vals);
        // Oracle: naive summation in f64 over an explicit copy, no shared helpers.
        let mut sum = 0.0f64;
        for v in &vals {
            sum += *v as f64;
        }
        let mean = sum / 81.0;
        let mut ss = 0.0f64;
        for v in &vals {
            ss += (*v as f64 - mean).powi(2);
        }
        let (m, n) = stats(&x);
        assert!((m - mean).abs() < 1e-12);
        assert!((n - ss.sqrt()).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn finite_vec() -> impl Strategy<Value = Vec<f32>> {
            prop::collection::vec(-1e3f32..1e3, 1..64)
        }

        proptest! {
            #[test]
            fn axpy_one_plus_zeros_is_identity(v in finite_vec()) {
                let x = Tensor::new(vec![v.len()], v.clone()).unwrap();
                let z = Tensor::zeros(&[v.len()]).unwrap();
                let r = axpy(1.0, &x, &z).unwrap();
                prop_assert!(r.bit_eq(&x));
                prop_assert_eq!(r.shape(), x.shape());
            }

            #[test]
            fn stats_affine(v in prop::collection::vec(-10f32..10.0, 2..64),
                            a in -4f32..4.0, b in -10f32..10.0) {
                let x = Tensor::new(vec![v.len()], v.clone()).unwrap();
                let (m, n) = stats(&x);
                prop_assume!(n > 1e-2);
                let y = x.map(|e| a * e + b);
                let (my, ny) = stats(&y);
                let em = a as f64 * m + b as f64;
                let en = (a as f64).abs() * n;
                prop_assert!((my - em).abs() <= 1e-5 * em.abs().max(1.0));
                prop_assert!((ny - en).abs() <= 1e-5 * en.max(1.0));
            }
        }
    }
}
