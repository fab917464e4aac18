//! Mixed-resolution multi-band fusion encoder with SwAV pretraining.
//!
//! Bands from several co-registered sensors are patchified at their native
//! resolution, projected into a shared token space, fused across the band
//! axis by learned-query cross-attention, and encoded by a pyramidal
//! transformer whose downsampling steps reuse the same fusion mechanism.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod container;
pub mod dataset;
pub mod diagnostics;
pub mod error;
pub mod finetune;
pub mod fpn;
pub mod fusion;
pub mod init;
pub mod input;
pub mod model;
pub mod pyramid;
pub mod rng;
pub mod swav;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, LrSchedule, Optimizer, OptimizerKind, ParamId, ParamStore, Real, Tensor, Var};

pub use config::Config;
