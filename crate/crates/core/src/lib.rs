//! Feature-space pose frontalization over a synthetic cross-pose data
//! oracle: a gated-residual frontalization module, angular-margin
//! recognition with an attention-guided adaptation loss, two-stage
//! training, and an LFW-style 10-fold verification protocol. All of it
//! runs on a small recorded-tape autodiff engine in double precision so
//! every gradient is finite-difference checkable.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod fspfm;
pub mod gradcheck;
pub mod losses;
pub mod manifest;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use checkpoint::{Checkpoint, CheckpointMeta, Stage};
pub use config::Config;
pub use error::{Error, Result};
pub use tensor::{ParamStore, Tensor};
