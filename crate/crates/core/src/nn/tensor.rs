use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

/// Per-sample tensor shape (channels, height, width).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape3 {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Dense NCHW batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub shape: Shape3,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(n: usize, shape: Shape3) -> Self {
        Self { n, shape, data: vec![0.0; n * shape.len()] }
    }

    pub fn from_vec(n: usize, shape: Shape3, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * shape.len(), "tensor data length does not match shape");
        Self { n, shape, data }
    }

    /// Stacks equally-shaped samples into one batch.
    pub fn stack<'a>(shape: Shape3, samples: impl IntoIterator<Item = &'a [f64]>) -> Self {
        let mut data = Vec::new();
        let mut n = 0;
        for s in samples {
            assert_eq!(s.len(), shape.len(), "sample length does not match shape");
            data.extend_from_slice(s);
            n += 1;
        }
        Self { n, shape, data }
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let len = self.shape.len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f64] {
        let len = self.shape.len();
        &mut self.data[i * len..(i + 1) * len]
    }
}
