//! Numeric foundation: dense tensors, reverse-mode differentiation over a
//! fixed op set, a counter-based splittable RNG, and the Adam update.
//!
//! Training runs in `f32`; verification oracles re-execute the same generic
//! code in `f64`.

mod adam;
mod rng;
mod scalar;
mod tensor;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use rng::{sample_categorical, stream_hash, Rng};
pub use scalar::Scalar;
pub use tensor::{NodeId, Tape, Tensor};
