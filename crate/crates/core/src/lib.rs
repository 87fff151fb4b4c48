//! Bit-nested MoE self-speculative decoding: exact slice arithmetic, a toy
//! MoE model with expert throttling, tree drafting and greedy verification,
//! expert-cache hit-rate models, and an analytical latency/energy model of a
//! hybrid-bonded memory system with prior-accelerator baselines.

// `!(x >= 0.0)` is used on purpose so NaN inputs are rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bitnest;
pub mod elastic_sd;
pub mod error;
pub mod expert_cache;
pub mod hwmodel;
pub mod runner;
pub mod slicemac;
pub mod toymoe;

pub use error::{Error, Result};
