//! Dense n-dimensional tensors over a selectable floating-point precision.
//!
//! Data is stored flat in row-major order. The batch dimension, when
//! present, is always dimension 0; images are `[batch, channels, h, w]`
//! and feature matrices `[batch, features]`.

use crate::{Error, Result};
use std::fmt::{Debug, Display};

/// Element type of every tensor in the engine. Implemented for `f32` and
/// `f64`; the precision of a run is fixed by choosing the instantiation.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + Copy
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    const NAME: &'static str;
    const BYTES: usize;

    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(src: &[u8]) -> Self;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
    const BYTES: usize = 4;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(src: &[u8]) -> Self {
        f32::from_le_bytes(src[..4].try_into().unwrap())
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
    const BYTES: usize = 8;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(src: &[u8]) -> Self {
        f64::from_le_bytes(src[..8].try_into().unwrap())
    }
}

/// Element-wise nonlinearity applied after a projection or convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    #[serde(rename = "relu")]
    ReLU,
    Sigmoid,
    /// Normalized per sample (over the feature dimension).
    Softmax,
    Identity,
}

/// Dense tensor: a shape and a flat row-major buffer of matching length.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if shape.is_empty() {
            return Err(Error::Shape("tensor rank must be >= 1".into()));
        }
        if expect != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements but buffer holds {}",
                shape,
                expect,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// 1-D tensor from a slice of `f64` literals.
    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Tensor::new(
            shape.to_vec(),
            values.iter().map(|&v| T::from_f64(v)).collect(),
        )
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Interpret as `[rows, cols]`.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::Shape(format!("expected rank-2 tensor, got {s:?}"))),
        }
    }

    /// Interpret as `[batch, channels, h, w]`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            s => Err(Error::Shape(format!("expected rank-4 tensor, got {s:?}"))),
        }
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[T] {
        let cols = self.shape[self.rank() - 1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let cols = self.shape[self.rank() - 1];
        &mut self.data[i * cols..(i + 1) * cols]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} elements) to {:?} ({expect})",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// View with the batch dimension kept and all remaining dims flattened.
    pub fn flatten_features(&self) -> Tensor<T> {
        let batch = self.shape[0];
        let features = self.data.len() / batch;
        Tensor {
            shape: vec![batch, features],
            data: self.data.clone(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute element-wise difference, in f64.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Numerically stable sigmoid.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// In-place row-wise softmax over the last dimension, max-subtracted.
pub fn softmax_rows<T: Scalar>(data: &mut [T], cols: usize) {
    debug_assert!(cols > 0 && data.len() % cols == 0);
    for row in data.chunks_mut(cols) {
        let mut max = row[0];
        for &v in row.iter() {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Apply an activation element-wise (softmax is per-row over `cols`).
pub fn apply_activation<T: Scalar>(data: &mut [T], act: ActivationKind, cols: usize) {
    match act {
        ActivationKind::Identity => {}
        ActivationKind::ReLU => {
            for v in data.iter_mut() {
                if *v < T::zero() {
                    *v = T::zero();
                }
            }
        }
        ActivationKind::Sigmoid => {
            for v in data.iter_mut() {
                *v = sigmoid(*v);
            }
        }
        ActivationKind::Softmax => softmax_rows(data, cols),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        let err = Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::<f32>::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap();
        let r = t.clone().reshape(vec![3, 2]).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.data(), t.data());
        assert!(t.clone().reshape(vec![4, 2]).is_err());
    }

    #[test]
    fn softmax_symmetry() {
        let mut d = [0.0f64, 0.0];
        softmax_rows(&mut d, 2);
        assert!((d[0] - 0.5).abs() < 1e-12);
        assert!((d[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn relu_definition() {
        let mut d = [-1.0f64, 0.0, 2.0];
        apply_activation(&mut d, ActivationKind::ReLU, 3);
        assert_eq!(d, [0.0, 0.0, 2.0]);
    }

    #[test]
    fn sigmoid_stable_at_extremes() {
        assert!(sigmoid(-1000.0f64).is_finite());
        assert!(sigmoid(1000.0f64).is_finite());
        assert!((sigmoid(0.0f64) - 0.5).abs() < 1e-15);
    }
}
