//! Hierarchical mixture of density experts (HMoDE) for crowd counting.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`autodiff`]),
//! ground-truth generation from head annotations ([`groundtruth`]), a
//! configurable encoder-decoder with density experts and gating nets
//! ([`backbone`]), the two-level expert fusion ([`fusion`]), the training
//! losses ([`losses`]), counting metrics ([`metrics`]), the data pipeline
//! ([`data`]) and the training/evaluation workflows ([`train`]).
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod groundtruth;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
