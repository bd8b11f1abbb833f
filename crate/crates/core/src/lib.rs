//! Context aggregation network for real-time semantic segmentation.
//!
//! A dual-branch segmentation model built on a small, dependency-light tensor
//! stack: NCHW [`Tensor`]s, a define-by-run [`Graph`] for reverse-mode
//! differentiation, composite layers, the network itself, OHEM losses, an
//! analytical complexity profiler and the file formats used by the CLI.

pub mod autograd;
pub mod complexity;
pub mod error;
pub mod gradcheck;
pub mod infer;
pub mod io;
pub mod kernels;
pub mod label;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod run_config;
pub mod selftest;
pub mod tensor;
pub mod train;

pub use autograd::{Graph, OpKind, Var};
pub use error::{Error, Result};
pub use tensor::{Element, Precision, Shape, Tensor};
