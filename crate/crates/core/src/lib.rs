//! Edge-side re-ranking for sequential short-video feeds.
//!
//! The crate contains a tiny multi-task ranking model that consumes real-time
//! user feedback, a list-wise re-ranker built on adaptive beam search, and a
//! desk-scale simulation of the client/server pagination loop used to measure
//! both end to end.

pub mod config;
pub mod demo;
pub mod domain;
pub mod error;
pub mod features;
pub mod model;
pub mod metrics;
pub mod rerank;
pub mod sim;

pub use error::{Error, Result};
