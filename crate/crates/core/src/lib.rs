//! Instruction-driven two-level gated multimodal fusion.

pub mod attention;
pub mod cli;
pub mod error;
pub mod evalreport;
pub mod fusion;
pub mod gating;
pub mod model;
pub mod numerics;
pub mod sequence;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
