//! Memory-guided semantic learning for temporal sentence grounding.
//!
//! The crate is organized bottom-up:
//!
//! - [`numcore`]: dense matrices with reverse-mode differentiation and a
//!   finite-difference gradient checker.
//! - [`encoders`], [`alignment`], [`membank`], [`fusion`], [`grounding`]:
//!   the network, from contextual encoding through the persistent
//!   cross-modal memory to the frame-wise regression heads.
//! - [`synthdata`]: a synthetic grounding corpus with a long-tailed vocabulary.
//! - [`eval`]: interval IoU, recall metrics and memory projections.
//! - [`model`], [`train`], [`config`]: assembly, optimization, checkpoints.

pub mod alignment;
pub mod config;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod grounding;
pub mod layers;
pub mod membank;
pub mod model;
pub mod numcore;
pub mod synthdata;
pub mod train;

pub use error::{Error, Result};
