// SPDX-License-Identifier: MIT OR Apache-2.0

//! Layer-wise attribute-information analysis for small decoder-only
//! transformers with an audio prefix.
//!
//! The crate is organised bottom-up:
//!
//! - [`numkernel`]: dense f64 kernels.
//! - [`model`]: pre-norm transformer forward pass with hidden-state traces
//!   and inference-time interventions.
//! - [`weights_io`]: binary weights container.
//! - [`planted`]: closed-form models with a known critical layer.
//! - [`corpus`]: synthetic prompt corpora matched to planted models.
//! - [`lens`]: logit lens, information scores and the critical layer.
//! - [`interventions`]: enrichment selection, lambda sweeps, attention masking.
//! - [`report`]: CSV / JSON / SVG output.

pub mod corpus;
pub mod error;
pub mod interventions;
pub mod lens;
pub mod model;
pub mod numkernel;
pub mod planted;
pub mod report;
pub mod weights_io;

pub use error::{Error, ErrorCategory, Result};
pub use model::{Intervention, Model, ModelSpec, ModelWeights, Position, Trace};
