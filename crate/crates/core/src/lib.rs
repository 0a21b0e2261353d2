//! Maximal-update-parameterized decoder-only transformers on a small
//! deterministic CPU engine, plus the machinery to test whether the optimal
//! base learning rate stays put as models get wider.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors and a reverse-mode gradient tape.
//! - [`model`]: the pre-norm transformer, its parameter inventory and checkpoints.
//! - [`param`]: per-tensor initialization and learning-rate plans.
//! - [`optim`]: AdamW, Lion, schedules and clipping.
//! - [`data`]: synthetic corpora and random-access token shards.
//! - [`harness`]: training runs, coordinate checks, sweeps and transfer verdicts.

pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod optim;
pub mod param;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{ModelConfig, ParamSet};
pub use optim::{OptimizerConfig, OptimizerState};
pub use param::{ParamPlan, Parameterization};
pub use tensor::{DiffTensor, Graph, Var};
