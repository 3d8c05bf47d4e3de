use serde::{Deserialize, Serialize};

use super::DiffError;

/// Dense row-major `f64` tensor. Every value is finite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor")]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = DiffError;

    fn try_from(raw: RawTensor) -> Result<Self, Self::Error> {
        Tensor::new(raw.shape, raw.data)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, DiffError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(DiffError::ShapeData {
                shape,
                len: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(DiffError::NonFinite {
                context: format!("tensor construction (index {pos})"),
            });
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor from values the caller has already checked.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Result<Self, DiffError> {
        Self::new(shape.to_vec(), vec![value; shape.iter().product()])
    }

    pub fn scalar(value: f64) -> Result<Self, DiffError> {
        Self::new(vec![1], vec![value])
    }

    pub fn vector(values: Vec<f64>) -> Result<Self, DiffError> {
        Self::new(vec![values.len()], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the trailing axis (1 for a rank-0 shape).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self, DiffError> {
        Self::new(shape, self.data.clone())
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Applies `f` to each value in place, rejecting any non-finite result.
    pub fn update<F: FnMut(usize, f64) -> f64>(&mut self, mut f: F) -> Result<(), DiffError> {
        for (i, v) in self.data.iter_mut().enumerate() {
            let next = f(i, *v);
            if !next.is_finite() {
                return Err(DiffError::NonFinite {
                    context: format!("tensor update (index {i})"),
                });
            }
            *v = next;
        }
        Ok(())
    }
}
