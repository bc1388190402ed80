//! Dense f64 tensors with optional 32-bit storage quantization.
//!
//! All arithmetic runs in f64. `Precision::F32` emulates 32-bit parameter
//! storage by rounding values through f32 after every mutation, which is
//! also the checkpoint wire format.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    /// Round storage through f32 when in 32-bit mode.
    pub fn quantize(self, t: &mut Tensor) {
        if self == Precision::F32 {
            for v in &mut t.data {
                *v = *v as f32 as f64;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(dims: &[usize]) -> Tensor {
        let n = dims.iter().product();
        Tensor { dims: dims.to_vec(), data: vec![0.0; n] }
    }

    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(dims.iter().product::<usize>(), data.len(), "dims/data length mismatch");
        Tensor { dims: dims.to_vec(), data }
    }

    pub fn filled(dims: &[usize], v: f64) -> Tensor {
        let n = dims.iter().product();
        Tensor { dims: dims.to_vec(), data: vec![v; n] }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn l2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}
