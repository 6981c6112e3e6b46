//! Attentional pyramid network classifier built on its own reverse-mode
//! tensor engine, with training, evaluation, complexity reporting, and the
//! dataset quality-control tools used to curate its corpus.
//!
//! Layout:
//! - [`tensor`], [`tape`] — dense tensors and the differentiation engine
//! - [`conv`], [`resize`], [`norm`] — numeric kernels behind the tape ops
//! - [`param`], [`init`], [`optim`], [`checkpoint`] — parameter storage,
//!   initialization, the Nesterov SGD update, and the checkpoint format
//! - [`gradcheck`] — finite-difference oracle and the verification suite
//! - [`pyramid`], [`attention`], [`model`], [`complexity`] — the network
//! - [`train`], [`metrics`], [`synth`] — training loop and evaluation
//! - [`corpus`], [`pnm`] — dataset quality-control tools
//! - [`config`] — JSON run configuration and named architectures

pub mod attention;
pub mod checkpoint;
pub mod complexity;
pub mod config;
pub mod conv;
pub mod corpus;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod norm;
pub mod optim;
pub mod param;
pub mod pnm;
pub mod pyramid;
pub mod resize;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Tape, TensorId};
pub use tensor::{Dtype, Scalar, Tensor};
