use crate::error::{Error, Result};

/// Dense row-major `f64` array; the leading axis is the batch axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::contract(format!(
                "shape {shape:?} holds {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    /// Stacks equally sized samples into a batch with per-sample shape `sample_shape`.
    pub fn stack<'a, I>(sample_shape: &[usize], samples: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let per: usize = sample_shape.iter().product();
        let mut data = Vec::new();
        let mut n = 0;
        for s in samples {
            if s.len() != per {
                return Err(Error::contract(format!(
                    "sample of {} values does not fit shape {sample_shape:?}",
                    s.len()
                )));
            }
            data.extend_from_slice(s);
            n += 1;
        }
        let mut shape = vec![n];
        shape.extend_from_slice(sample_shape);
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    pub fn sample_len(&self) -> usize {
        self.shape[1..].iter().product()
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

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.sample_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.sample_len().max(1))
    }

    pub(crate) fn reshaped(mut self, shape: Vec<usize>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }
}
