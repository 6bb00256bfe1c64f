//! Robust two-modality bird's-eye-view fusion by decoupling features into
//! modality-invariant and modality-specific parts and recoupling them through
//! cross-modal deformable attention and a soft mixture of experts.
//!
//! The crate also ships the synthetic LiDAR/camera scene simulator, the
//! corruption suite, and the robustness evaluation harness used to exercise
//! the model on a CPU.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod decouple;
pub mod detect;
pub mod error;
pub mod harness;
#[cfg(test)]
mod loop_oracle;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod par;
pub mod recouple;
pub mod scenesim;

pub use error::{Error, Result};
