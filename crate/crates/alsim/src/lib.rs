//! Pool-based active-learning simulator.
//!
//! The simulator compares acquisition strategies under controlled training
//! regimes: a small embedding classifier stands in for a pretrained
//! encoder, pretext adaptation on the unlabeled pool stands in for
//! continued masked-token pretraining, and two fine-tuning policies (the
//! standard fixed-epoch recipe and a robust checkpoint-selecting one) can
//! be paired with eight acquisition functions. Runs are seeded end to end:
//! a master seed fans out into named streams so any single knob can be
//! ablated without perturbing the rest.

pub mod acquire;
pub mod adapt;
pub mod alloop;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evalmetrics;
pub mod runio;
pub mod seed;
pub mod tinynet;
pub mod trainer;

pub use error::{Error, Result};
