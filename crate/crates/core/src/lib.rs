//! Over-parameterized low-rank adapters backed by matrix product operators.

pub mod adapters;
pub mod autodiff;
pub mod commands;
pub mod error;
pub mod mpo;
pub mod rng;
pub mod run;
pub mod selection;
pub mod sweep;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
