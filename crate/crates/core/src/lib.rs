//! Precoding-oriented CSI feedback for FDD massive MIMO.
//!
//! The crate simulates the full downlink training loop: trainable pilots are
//! broadcast over sparse multipath channels, each user encodes what it hears
//! into a short index into learned codebooks, and the base station decodes
//! all users' indices into a linear precoder. Training maximizes the sum
//! rate, regularized by a kernel lower bound on the information carried by
//! the feedback so that codewords are used evenly.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod experiments;
pub mod graph;
pub mod mi;
pub mod mlp;
pub mod model;
pub mod optim;
pub mod pilots;
pub mod rng;
pub mod tensor;
pub mod tensor_io;
pub mod trainer;
pub mod vq;

pub use error::{Error, Result};
pub use tensor::Tensor;
