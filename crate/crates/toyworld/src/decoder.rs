use cfgcd_autodiff::{Tape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::checksum::checksum_tensors;
use crate::error::{Result, WorldError};

/// Frozen map from latents to "audio": `tanh(z A + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDecoder {
    /// `d x m`.
    weight: Tensor,
    /// `1 x m`.
    bias: Tensor,
}

impl ToyDecoder {
    pub fn random<R: Rng + ?Sized>(rng: &mut R, dim: usize, audio_dim: usize, gain: f64, bias_scale: f64) -> Self {
        let scale = gain / (dim as f64).sqrt();
        let w = (0..dim * audio_dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
        let b = (0..audio_dim).map(|_| bias_scale * rng.sample::<f64, _>(StandardNormal)).collect();
        ToyDecoder {
            weight: Tensor::new(dim, audio_dim, w).expect("positive shape"),
            bias: Tensor::new(1, audio_dim, b).expect("positive shape"),
        }
    }

    pub fn from_parts(weight: Tensor, bias: Tensor) -> Result<Self> {
        if bias.rows() != 1 || bias.cols() != weight.cols() {
            return Err(WorldError::Dim(format!(
                "decoder bias {:?} does not match weight {:?}",
                bias.shape(),
                weight.shape()
            )));
        }
        Ok(ToyDecoder { weight, bias })
    }

    pub fn dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn audio_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let out = self.decode_on(&mut tape, zv)?;
        Ok(tape.value(out).clone())
    }

    /// Records decoding on `tape`; gradients flow to `z` but never to the
    /// decoder's own constants.
    pub fn decode_on(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let w = tape.constant(self.weight.clone());
        let b = tape.constant(self.bias.clone());
        let h = tape.matmul(z, w)?;
        let h = tape.add(h, b)?;
        Ok(tape.tanh(h)?)
    }

    pub fn checksum(&self) -> String {
        checksum_tensors([&self.weight, &self.bias])
    }
}
