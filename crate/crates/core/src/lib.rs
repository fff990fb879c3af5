//! Safe visuomotor control through barrier certificates learned in the
//! latent space of a world model.
//!
//! The crate is organised bottom-up:
//!
//! * [`ndmath`]: tensors, reverse-mode autodiff, Adam, checkpoints.
//! * [`envs`]: pendulum and Dubins simulators, rendering, labels, reference policies.
//! * [`encoder`]: frozen patch-token image encoder.
//! * [`world_model`]: causal transformer over latent context windows.
//! * [`certificate`]: barrier network and its losses.
//! * [`controller`]: bounded policy network and its losses.
//! * [`pipeline`]: data collection and the two training stages.
//! * [`evalviz`]: empirical verification and exported artifacts.
//! * [`config`]: run configuration shared by the command-line tool.

pub mod certificate;
pub mod config;
pub mod controller;
pub mod encoder;
pub mod envs;
pub mod error;
pub mod evalviz;
pub mod ndmath;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod world_model;

pub use error::{Error, Result};
