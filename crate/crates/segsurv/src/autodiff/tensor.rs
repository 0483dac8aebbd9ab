//! Dense row-major tensor value type.

use super::scalar::Scalar;
use crate::error::DiffError;
use rand::Rng;

/// A dense tensor: shape plus C-order data (last axis fastest).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, DiffError> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(DiffError::DataLength {
                len: data.len(),
                shape,
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    /// A rank-1 tensor of one element, used for scalar losses.
    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_f64(shape: Vec<usize>, values: &[f64]) -> Result<Self, DiffError> {
        Self::new(shape, values.iter().map(|&v| T::from_f64(v)).collect())
    }

    /// Zero-mean truncated normal (resample outside two standard deviations).
    pub fn trunc_normal<R: Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let dist = rand_distr::Normal::new(0.0, std).expect("std must be finite and positive");
        let numel = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        while data.len() < numel {
            let v: f64 = rng.sample(dist);
            if v.abs() <= 2.0 * std {
                data.push(T::from_f64(v));
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> T {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn iter_f64(&self) -> impl Iterator<Item = f64> + '_ {
        self.data.iter().map(|v| v.to_f64())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.to_f64().abs())
            .fold(0.0, f64::max)
    }

    /// Sum of squares, accumulated in f64.
    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64() * v.to_f64()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        let err = Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, DiffError::DataLength { len: 5, .. }));
    }

    #[test]
    fn trunc_normal_is_bounded() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let t = Tensor::<f64>::trunc_normal(vec![1000], 0.02, &mut rng);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
        use rand::SeedableRng;
        let mut rng2 = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let t2 = Tensor::<f64>::trunc_normal(vec![1000], 0.02, &mut rng2);
        assert_eq!(t, t2);
    }
}
