//! Multi-domain CTR training with hyper-network generated adapters.
//!
//! Per-domain bottleneck adapters get their weights from a domain-shared
//! hyper-network through a low-rank decomposition, and plug into MLP, DCN or
//! Wide & Deep backbones.

#![allow(clippy::needless_range_loop)]

pub mod adapter;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod embedding;
pub mod error;
pub mod experiment;
pub mod hyper;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod prepare;
pub mod tape;
pub mod tensor;
pub mod train;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
