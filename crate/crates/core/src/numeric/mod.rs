//! Dense tensors, a small reverse-mode tape, loss primitives and AdamW.
//!
//! Everything here is generic over [`Scalar`] so the same kernels run in
//! `f32` or `f64`. The model layers built on top use `f64` (see
//! [`crate::Real`]) for bit-stable results and tight gradient checks.

mod adamw;
mod gradcheck;
mod loss;
mod tape;
mod tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub use adamw::{AdamW, AdamWConfig};
pub use gradcheck::{grad_check, GradCheckReport};
pub use loss::{cosine_similarity, cross_entropy, log_softmax, softmax, softmax_temperature};
pub use tape::{GradMap, ParamAccess, ParamName, Tape, Var};
pub use tensor::Tensor;

/// Floating-point element type for tensors and tapes.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Converts an `f64` literal into this scalar type.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable in scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
