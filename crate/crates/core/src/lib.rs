//! One-step diffusion image restoration with instance-adaptive inversion and
//! generative steering, at a scale that trains on a laptop CPU.
//!
//! The crate is organised bottom-up: [`schedule`] holds the diffusion algebra,
//! [`mine`] predicts the per-image timestep and inversion noise, [`chariot`]
//! steers between fidelity and generation, [`pipeline`] composes them into a
//! restorer, and [`training`] distills it from a pretrained toy prior.

mod error;

pub mod chariot;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod degradation;
pub mod experiments;
pub mod image;
pub mod metrics;
pub mod mine;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod schedule;
pub mod selftest;
pub mod training;
pub mod unet;

pub use error::{Error, Result};
