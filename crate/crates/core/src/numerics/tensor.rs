use super::Real;
use crate::error::{Error, Result};

/// Dense row-major array. The shape is fixed at construction.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    data: Vec<T>,
    shape: Vec<usize>,
}

impl<T: Real> Tensor<T> {
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Config(format!(
                "tensor data has {} elements but shape {:?} needs {}",
                data.len(),
                shape,
                numel
            )));
        }
        if shape.is_empty() || shape.len() > 4 {
            return Err(Error::Config(format!("unsupported rank {}", shape.len())));
        }
        Ok(Self {
            data,
            shape: shape.to_vec(),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            data: vec![T::zero(); numel],
            shape: shape.to_vec(),
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            data: vec![value; numel],
            shape: shape.to_vec(),
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            data: vec![value],
            shape: vec![1],
        }
    }

    pub fn from_f32(data: &[f32], shape: &[usize]) -> Result<Self> {
        Self::new(data.iter().map(|&v| T::of(v as f64)).collect(), shape)
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::new(data.iter().map(|&v| T::of(v)).collect(), shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.data.iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64_lossy()).collect()
    }

    /// Same data, same number of elements, new shape.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Config(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Converts between scalar precisions.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            data: self.data.iter().map(|v| U::of(v.to_f64_lossy())).collect(),
            shape: self.shape.clone(),
        }
    }
}
