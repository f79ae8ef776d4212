//! Human-assisted action preference optimization lab.
//!
//! A deterministic manipulation simulator, an autoregressive action-token
//! policy with exact gradients, intervention-labeled data collection, and the
//! preference objective with adaptive per-sample reweighting, wired into a
//! deploy-optimize loop.

pub mod bridge;
pub mod config;
pub mod data;
pub mod env;
pub mod error;
pub mod eval;
pub mod lifelong;
pub mod manifest;
pub mod optim;
pub mod policy;
pub mod rng;
pub mod tokenizer;

pub use error::{Error, Result};
