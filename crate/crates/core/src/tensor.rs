//! Dense row-major tensors.
//!
//! Plain value type: shape plus a flat buffer. Gradients live on the
//! autodiff tape, not here; a [`Tensor`] handed around by itself is
//! just data.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err!(
                "shape {:?} wants {} elements, got {}",
                shape,
                numel,
                data.len()
            ));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(shape_err!("zero-sized dim in shape {:?}", shape));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![T::ZERO; numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut Rng) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| T::from_f64(rng.normal() * std))
            .collect();
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

    /// Rows of a 2-d tensor (first dim otherwise).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a 2-d tensor.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Reinterpret the buffer under a new shape with the same numel.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(shape_err!(
                "cannot reshape {} elements to {:?}",
                self.data.len(),
                shape
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest |a - b| over all elements. Shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::ZERO, |m, d| m.max(d))
    }

    /// Euclidean norm of the buffer.
    pub fn norm(&self) -> T {
        self.data
            .iter()
            .map(|&v| v * v)
            .fold(T::ZERO, |acc, v| acc + v)
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn randn_deterministic() {
        let mut a = Rng::new(9);
        let mut b = Rng::new(9);
        let x = Tensor::<f32>::randn(vec![4, 4], 0.5, &mut a);
        let y = Tensor::<f32>::randn(vec![4, 4], 0.5, &mut b);
        assert_eq!(x, y);
    }

    #[test]
    fn reshape_checks_numel() {
        let t = Tensor::<f64>::zeros(vec![2, 6]);
        assert!(t.clone().reshaped(vec![3, 4]).is_ok());
        let t2 = Tensor::<f64>::zeros(vec![2, 6]);
        assert!(t2.reshaped(vec![5, 2]).is_err());
    }
}
