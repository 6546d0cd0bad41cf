//! Seeded weight initialisation helpers.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::numeric::Tensor;
use crate::Real;

pub(crate) fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize, std: Real) -> Vec<Real> {
    let dist = Normal::new(0.0, std).expect("finite positive std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

pub(crate) fn normal_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: Real) -> Tensor<Real> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), normal_vec(rng, n, std)).expect("shape matches length")
}

/// Glorot-normal matrix of shape `fan_in × fan_out`.
pub(crate) fn glorot<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor<Real> {
    let std = (2.0 / (fan_in + fan_out) as Real).sqrt();
    normal_tensor(rng, &[fan_in, fan_out], std)
}

/// FNV-1a over the bit patterns of a sequence of tensors.
pub(crate) fn checksum<'a>(tensors: impl IntoIterator<Item = &'a Tensor<Real>>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |bytes: [u8; 8]| {
        for b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for t in tensors {
        for &d in t.shape() {
            feed((d as u64).to_le_bytes());
        }
        for v in t.data() {
            feed(v.to_bits().to_le_bytes());
        }
    }
    h
}
