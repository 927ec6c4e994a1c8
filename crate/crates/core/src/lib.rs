//! Lyrics-and-melody conditioned singing-voice feature synthesis with
//! flow matching, melody distillation, representation alignment and
//! group-relative policy optimisation.

pub mod alignment;
pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod grpo;
pub mod melody;
pub mod params;
pub mod report;
pub mod reward;
pub mod rng;
pub mod sampler;
pub mod storage;
pub mod trainer;

pub use error::{Error, Result};
