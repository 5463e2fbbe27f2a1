//! Surprise-gated continual learning for language models.
//!
//! Passages that a model finds surprising are detected, verified against
//! the model's own knowledge, and consolidated with an optimizer whose
//! second-moment decay opens in proportion to how deeply the claim was
//! confirmed.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod evalkit;
pub mod gatedopt;
pub mod grounding;
pub mod modelhub;
pub mod pipeline;
pub mod textstat;
pub mod verifier;

pub use error::{Error, Result};
