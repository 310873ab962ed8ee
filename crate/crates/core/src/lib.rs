//! Channel attention from pooled global context.
//!
//! A from-scratch operator library implementing the linear context transform
//! (LCT) block next to squeeze-and-excitation (SE) and SE with a normalised
//! descriptor (SE+), together with the residual backbones they are inserted
//! into, exact parameter and multiply-add accounting, a small CPU training
//! loop, and the context-versus-attention statistics used to study trained
//! blocks.

pub mod accounting;
pub mod analysis;
pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
