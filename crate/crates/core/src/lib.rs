//! Self-aligned three-branch re-identification network on a small
//! reverse-mode autodiff engine, with a synthetic top-down vehicle dataset,
//! training loop, retrieval evaluation and command line.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod init;
pub mod losses;
pub mod model;
pub mod stn;
pub mod train;

pub use error::{Error, Result};
