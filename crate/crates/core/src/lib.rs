//! Constructive-interference symbol-level precoding for the multi-user MISO
//! downlink: optimization baselines, a deep-unfolded barrier learner with
//! binary, ternary and stochastically quantized variants, and analytical
//! complexity and memory accounting.

pub mod analysis;
pub mod barrier_solver;
pub mod channel_data;
pub mod ci_core;
pub mod error;
pub mod nn;
pub mod quantize;
pub mod slp_dnet;

pub use error::{Error, Result};
