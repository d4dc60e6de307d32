//! Partial discrete diffusion for sketch-guided token inpainting.
//!
//! The pipeline: images are quantized to a discrete token grid by a palette
//! codec, a masked-region absorbing-state diffusion corrupts the grid, and a
//! sketch-conditioned bidirectional transformer learns to reverse the
//! corruption. Everything is deterministic given explicit seeds.

pub mod codec;
pub mod diffusion;
pub mod engine;
pub mod error;
pub mod eval;
pub mod model;
pub mod netpbm;
pub mod schedule;
pub mod shapeworld;
pub mod substrate;

pub use codec::{LatentMask, Palette, TokenGrid};
pub use diffusion::CategoricalField;
pub use engine::{SampleTrace, TrainConfig};
pub use error::{Error, Result};
pub use eval::EvalReport;
pub use model::{DenoiserParams, ModelConfig, SketchImage, SketchTokens};
pub use schedule::NoiseSchedule;
pub use shapeworld::{Example, SceneSpec, ShapeClass};
pub use substrate::{Rng, Scalar, Tape, Tensor};
