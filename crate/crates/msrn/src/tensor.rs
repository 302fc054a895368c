//! Dense row-major `f64` arrays of rank 1 to 4.
//!
//! `Tensor` is a plain value type: shape plus contiguous data. Participation
//! in automatic differentiation happens by placing a tensor on a
//! [`crate::tape::Tape`], which hands back a lightweight [`crate::tape::Var`]
//! handle.

use std::fmt;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from a shape and row-major data.
    ///
    /// Panics if the rank is outside 1..=4, any extent is zero, or the data
    /// length does not match the shape product. These are programmer errors,
    /// not runtime conditions.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert!(
            !shape.is_empty() && shape.len() <= 4,
            "tensor rank must be 1..=4, got shape {shape:?}"
        );
        assert!(
            shape.iter().all(|&e| e > 0),
            "tensor extents must be positive, got shape {shape:?}"
        );
        let want: usize = shape.iter().product();
        assert_eq!(
            want,
            data.len(),
            "shape {shape:?} needs {want} values, got {}",
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; n])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; n])
    }

    /// A scalar is represented as a rank-1 tensor of length 1.
    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![1], vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|i| f(i)).collect())
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
        false // extents are positive by construction
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

    /// Value of a length-1 tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on non-scalar shape {:?}", self.shape);
        self.data[0]
    }

    /// Same data, different shape (lengths must agree).
    pub fn reshaped(&self, shape: &[usize]) -> Tensor {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Row-major offset of a rank-2 index.
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    /// Row-major offset of a rank-3 index.
    pub fn at3(&self, c: usize, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 3);
        self.data[(c * self.shape[1] + i) * self.shape[2] + j]
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let head: Vec<f64> = self.data.iter().take(8).copied().collect();
        write!(f, "Tensor{:?}{head:?}", self.shape)?;
        if self.len() > 8 {
            write!(f, "…")?;
        }
        Ok(())
    }
}
