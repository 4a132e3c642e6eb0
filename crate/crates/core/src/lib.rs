// SPDX-License-Identifier: MIT OR Apache-2.0

//! Early-decoding workbench for arithmetic probing of decoder-only transformers.
//!
//! The pipeline: [`dataset`] builds controlled arithmetic queries,
//! [`model`] runs forward passes that tap the residual stream after every
//! attention and MLP update, [`lens`] de-embeds those taps into next-token
//! distributions, [`metrics`] aggregates them layer by layer, and
//! [`interventions`] swaps attention outputs between queries to measure
//! causal effects. [`report`] wires everything to config-driven runs.

pub mod dataset;
pub mod error;
pub mod fixture;
pub mod interventions;
pub mod lens;
pub mod metrics;
pub mod model;
pub mod report;
pub mod tokenizer;

pub use error::{Error, Result};
