//! Named trainable parameters.
//!
//! Parameters live outside any tape as plain buffers; each forward pass
//! binds them onto a fresh tape as leaves. Binding order is the canonical
//! parameter order used by the optimizer and the checkpoint format.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Param {
            name: name.into(),
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn from_data(name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(data.len(), shape.iter().product::<usize>());
        Param { name: name.into(), shape: shape.to_vec(), data }
    }

    /// Glorot-uniform filter bank `[C_out, C_in, kh, kw]`.
    pub fn glorot_conv(
        name: impl Into<String>,
        c_out: usize,
        c_in: usize,
        kh: usize,
        kw: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = (c_in * kh * kw) as f64;
        let fan_out = (c_out * kh * kw) as f64;
        Self::glorot(name, &[c_out, c_in, kh, kw], fan_in, fan_out, rng)
    }

    /// Glorot-uniform dense matrix `[m, n]`.
    pub fn glorot_fc(name: impl Into<String>, m: usize, n: usize, rng: &mut ChaCha8Rng) -> Self {
        Self::glorot(name, &[m, n], n as f64, m as f64, rng)
    }

    fn glorot(
        name: impl Into<String>,
        shape: &[usize],
        fan_in: f64,
        fan_out: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = (6.0 / (fan_in + fan_out)).sqrt();
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(-bound..=bound)).collect();
        Param { name: name.into(), shape: shape.to_vec(), data }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Put this parameter on a tape. Trainable leaves receive gradients.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> Result<Tensor> {
        tape.leaf(self.data.clone(), &self.shape, trainable)
    }
}
