//! Lifelong class-incremental event detection with episodic memory prompts.
//!
//! The numeric layer ([`numeric`]) is generic over the floating-point type;
//! the model layers run in [`Real`].

pub mod error;
pub mod numeric;

mod init;

pub mod data;
pub mod distill;
pub mod encoder;
pub mod experiment;
pub mod eval;
pub mod head;
pub mod memory;
pub mod mlp;
pub mod model;
pub mod prompts;
pub mod trainer;

pub use error::{Error, Result};

/// Scalar type of the model layers.
pub type Real = f64;

pub type Tensor64 = numeric::Tensor<f64>;
pub type Tensor32 = numeric::Tensor<f32>;
pub type Tape64<'a> = numeric::Tape<'a, f64>;
pub type Tape32<'a> = numeric::Tape<'a, f32>;
pub type AdamW64 = numeric::AdamW<f64>;
