//! Dense row-major `f32` tensors and probability vectors.

use crate::error::{Error, Result};

/// Dense n-dimensional array of `f32` in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                layer: "tensor".into(),
                expected: format!("{numel} elements for shape {shape:?}"),
                actual: format!("{} elements", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f32>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a `[rows, cols]` matrix; panics if `data.len() != rows * cols`.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Self {
            shape: vec![rows, cols],
            data,
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

    /// Number of rows when viewed as a matrix (first dimension).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Row length when viewed as a matrix (product of trailing dimensions).
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Shape {
                layer: "reshape".into(),
                expected: format!("{} elements", self.data.len()),
                actual: format!("{shape:?}"),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Gathers the given rows into a new tensor.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Self { shape, data }
    }

    /// Stacks tensors with identical trailing dimensions along the first axis.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let tail = &first.shape[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::Shape {
                    layer: "concat_rows".into(),
                    expected: format!("[_, {tail:?}]"),
                    actual: format!("{:?}", p.shape),
                });
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Ok(Self { shape, data })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// A length-K probability vector (nonnegative, sums to one).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f32>);

impl ProbVector {
    pub const SUM_TOLERANCE: f32 = 1e-5;

    pub fn new(probs: Vec<f32>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidArgument("empty probability vector".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
            return Err(Error::InvalidArgument(format!(
                "probability entries must lie in [0, 1]: {probs:?}"
            )));
        }
        let sum: f64 = probs.iter().map(|&p| p as f64).sum();
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE as f64 {
            return Err(Error::InvalidArgument(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(Self(probs))
    }

    pub fn one_hot(class: usize, num_classes: usize) -> Self {
        let mut v = vec![0.0; num_classes];
        v[class] = 1.0;
        Self(v)
    }

    pub fn uniform(num_classes: usize) -> Self {
        Self(vec![1.0 / num_classes as f32; num_classes])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    /// Returns the hot index if exactly one entry is 1 and the rest are 0.
    pub fn hot_index(&self) -> Option<usize> {
        let mut hot = None;
        for (i, &p) in self.0.iter().enumerate() {
            if p == 1.0 && hot.is_none() {
                hot = Some(i);
            } else if p != 0.0 {
                return None;
            }
        }
        hot
    }
}
