//! Trajectory-diffusion planning with likelihood-triggered replanning.
//!
//! A small denoising diffusion model is trained on expert maze trajectories
//! and used as a closed-loop planner. The planner decides *when* to replan by
//! probing the model's own likelihood of the partially executed plan (a KL
//! divergence between the Gaussian posterior and the learned denoising step),
//! and *how* to replan by resampling from scratch, repairing with previous
//! context, or extending with future context.

pub mod error;
pub mod numkit;
pub mod rng;

pub mod denoiser;
pub mod diffusion;
pub mod envs;
pub mod harness;
pub mod likelihood;
pub mod replan;

pub use error::{Error, Result};
