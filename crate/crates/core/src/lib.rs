//! Incremental-learning engine for implicit-feedback recommendation.
//!
//! The engine trains a lightweight embedding backbone block by block over a
//! chronological interaction log. Incremental blocks draw training negatives
//! from two sources: uniform sampling and a per-user reservoir of hard
//! negatives whose sampling distribution tracks each user's interest shift
//! across item categories through a Dirichlet-multinomial posterior.
//! Optional knowledge distillation and a differentiable item-clustering loss
//! round out the objective; a top-K evaluation harness and a CLI drive runs.

pub mod backbone;
pub mod cluster;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod matrix;
pub mod metrics;
pub mod optim;
pub mod reservoir;
pub mod seeds;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
