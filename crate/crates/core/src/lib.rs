//! Density-regression cell counting with a concatenated fully convolutional
//! network (C-FCRN) trained under deep supervision from auxiliary heads.

pub mod config;
pub mod engine;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod selftest;
pub mod synth;
pub mod targets;
pub mod trainer;

pub use engine::{Dims, ParamId, ParamTensor, Tape, Tensor4, Var};
pub use error::{Error, Result};
