//! Hybrid structural–functional brain graphs and a local/global attention
//! graph network for regressing cognitive scores from connectome data.
//!
//! The crate is organised bottom-up:
//!
//! - [`connectome`]: subject records, SBM outer products, k-NN sparsification,
//!   cohort IO.
//! - [`hybrid_graph`]: structural, functional, cross-modal and multi-scale
//!   detour edge families and their union.
//! - [`diffcore`]: dense tensors, softmax / layer norm / dropout, Adam and
//!   finite-difference gradient checks.
//! - [`model`]: the attention network with hand-written backward passes.
//! - [`objectives`]: task and structure-function losses plus metrics.
//! - [`synth`]: synthetic cohorts with a planted signal, and baselines.
//! - [`pipeline`]: cross-validated training, checkpoints and explanations.

pub mod connectome;
pub mod diffcore;
pub mod error;
pub mod hybrid_graph;
pub mod model;
pub mod objectives;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};
