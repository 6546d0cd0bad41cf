use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::init::glorot;
use crate::numeric::{ParamName, Tape, Tensor, Var};
use crate::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Identity,
}

/// One-hidden-layer perceptron `act(x W1 + b1) W2 + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub w1: Tensor<Real>,
    pub b1: Tensor<Real>,
    pub w2: Tensor<Real>,
    pub b2: Tensor<Real>,
    pub activation: Activation,
}

/// Tape names for the four tensors of an [`Mlp`].
pub type MlpNames = [ParamName; 4];

impl Mlp {
    pub fn glorot<R: Rng + ?Sized>(rng: &mut R, input: usize, hidden: usize, output: usize) -> Self {
        Self {
            w1: glorot(rng, input, hidden),
            b1: Tensor::zeros(&[hidden]),
            w2: glorot(rng, hidden, output),
            b2: Tensor::zeros(&[output]),
            activation: Activation::Tanh,
        }
    }

    /// Linear identity map of width `dim`.
    pub fn identity(dim: usize) -> Self {
        let mut eye = Tensor::zeros(&[dim, dim]);
        for i in 0..dim {
            eye.data_mut()[i * dim + i] = 1.0;
        }
        Self {
            w1: eye.clone(),
            b1: Tensor::zeros(&[dim]),
            w2: eye,
            b2: Tensor::zeros(&[dim]),
            activation: Activation::Identity,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.cols()
    }

    /// Records the forward pass; with `names` the weights are trainable
    /// leaves, otherwise constants.
    pub fn on_tape<'a>(&'a self, tape: &mut Tape<'a, Real>, x: Var, names: Option<MlpNames>) -> Result<Var> {
        let leaf = |tape: &mut Tape<'a, Real>, i: usize, t: &'a Tensor<Real>| match names {
            Some(n) => tape.param(n[i], t),
            None => tape.constant(t),
        };
        let w1 = leaf(tape, 0, &self.w1);
        let b1 = leaf(tape, 1, &self.b1);
        let w2 = leaf(tape, 2, &self.w2);
        let b2 = leaf(tape, 3, &self.b2);
        let h = tape.affine(x, w1, b1)?;
        let h = match self.activation {
            Activation::Tanh => tape.tanh(h),
            Activation::Identity => h,
        };
        tape.affine(h, w2, b2)
    }

    pub(crate) fn tensors(&self) -> [&Tensor<Real>; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub(crate) fn tensor_mut(&mut self, i: usize) -> &mut Tensor<Real> {
        match i {
            0 => &mut self.w1,
            1 => &mut self.b1,
            2 => &mut self.w2,
            _ => &mut self.b2,
        }
    }
}
