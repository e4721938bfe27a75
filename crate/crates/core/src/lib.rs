//! Three-phase transformer: an N-phase channel-partitioned decoder-only
//! transformer built on a small from-scratch autodiff engine.

pub mod cli;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod geometry;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
