//! Hierarchical vision transformer with sparse masked-autoencoder
//! pretraining, built on a minimal reverse-mode autodiff tensor core.
//!
//! The crate is organized around the data flow of the model:
//! `tensor` holds the numeric substrate, `layout` the token grid and mask
//! bookkeeping, `model` the encoder, `mae` the pretraining objective,
//! `train` the optimization loops, and `cost`/`bench` the analytic and
//! measured performance tooling surfaced by the CLI.

pub mod bench;
pub mod cost;
pub mod error;
pub mod hog;
pub mod layout;
pub mod mae;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{grad_check, Element, Tensor};
