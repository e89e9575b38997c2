//! One-shot speaker-adaptive speech enhancement.
//!
//! A transformer masking enhancer is paired with a small speaker-specific
//! masking (SSM) network that maps a 192-dimensional speaker embedding to a
//! per-frequency gain. The pair is meta-trained over speaker tasks so that a
//! deployed model can be adapted to a new speaker from a single enrollment
//! utterance by updating the SSM network alone.
//!
//! The runnable programs under `examples/` walk through each stage; the
//! `ossem` binary drives the full pipeline from a JSON config.

pub mod adapt;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod features;
pub mod meta;
pub mod model;
pub mod pipeline;
pub mod speaker;

pub use error::{Error, Result};
