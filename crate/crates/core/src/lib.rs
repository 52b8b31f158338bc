//! Training and evaluation toolkit for weakly supervised tracklet person
//! re-identification with feature-wise mutual learning.
//!
//! The crate is organised bottom-up:
//!
//! - [`diffcore`]: tensors, the reverse-mode graph and the tensor container
//! - [`datamodel`]: samples, manifests, WST construction and co-occurrence
//! - [`sampler`]: two-view pair-structured mini-batches
//! - [`network`]: extractors and the shared per-camera classifier bank
//! - [`losses`]: per-camera, cross-camera and mutual-learning objectives
//! - [`trainer`]: ADAM loop, logging and checkpoints
//! - [`evaluator`]: similarity and single-query Rank-k / mAP
//! - [`synthgen`]: deterministic synthetic multi-camera corpora

pub mod datamodel;
pub mod diffcore;
mod error;
pub mod evaluator;
pub mod losses;
pub mod network;
pub mod sampler;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
