use crate::error::{Error, Result};

/// Dense (batch, channels, height, width) tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    pub data: Vec<f64>,
    pub shape: [usize; 4],
}

impl Tensor4 {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self { data: vec![0.0; shape.iter().product()], shape }
    }

    pub fn from_vec(data: Vec<f64>, shape: [usize; 4]) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::Dimension(format!("{} values cannot fill shape {shape:?}", data.len())));
        }
        Ok(Self { data, shape })
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    /// Elements per batch entry.
    pub fn stride(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    pub fn sample(&self, n: usize) -> &[f64] {
        let s = self.stride();
        &self.data[n * s..(n + 1) * s]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { data: self.data.iter().map(|&x| f(x)).collect(), shape: self.shape }
    }

    pub fn reshape(mut self, shape: [usize; 4]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Dimension(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Rows `idx` of the batch, in order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let s = self.stride();
        let mut data = Vec::with_capacity(idx.len() * s);
        for &i in idx {
            data.extend_from_slice(self.sample(i));
        }
        Self { data, shape: [idx.len(), self.shape[1], self.shape[2], self.shape[3]] }
    }

    pub fn debug_check_finite(&self) {
        debug_assert!(self.data.iter().all(|x| x.is_finite()), "non-finite activation");
    }
}
