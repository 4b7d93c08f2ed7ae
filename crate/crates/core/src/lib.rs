//! Double-blind collaborative learning.
//!
//! Parameter matrices are multiplied by a fresh random sketch `S` every
//! round: clients see only `W S` and the server sees only `Gᵀ X S`. This
//! crate provides the sketches, the sketched layers with hand-derived
//! backpropagation, an in-process simulation of the seed-broadcast training
//! protocol, and harnesses for the gradient-estimation, gradient-matching
//! and property-inference attacks that the sketching defends against.

pub mod attack;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fedsim;
pub mod layers;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod sketch;

pub use error::{Error, Result};
pub use linalg::{Matrix, Shape4, Tensor4};
pub use rng::{derive_seed, rng_next, SplitMix64};
pub use sketch::{SketchKind, SketchMatrix, SketchSpec};
