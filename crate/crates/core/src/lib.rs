// SPDX-License-Identifier: MIT OR Apache-2.0

//! Neuron-level probing of pre-extracted contextual representations.
//!
//! The pipeline trains an elastic-net regularized softmax probe on a frozen
//! activation matrix, ranks neurons by the weight mass they carry per label,
//! searches the regularization strengths with an ablation-driven score,
//! extracts the smallest ranked prefix whose retrained probe matches the full
//! probe, and reports how the selected neurons spread across layers and
//! labels. Control tasks measure selectivity.

pub mod analysis;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod probe;
pub mod ranking;
pub mod search;
pub mod selection;
pub mod synthetic;
mod util;

pub use error::{Error, Result};
