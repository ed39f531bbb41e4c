//! Deep active-inference agent for the rubber-hand illusion.
//!
//! A two-joint planar arm is rendered to grayscale images; a learned visual
//! generative model (convolutional decoder or VAE decoder) predicts those
//! images from believed joint angles. Beliefs follow precision-weighted
//! prediction errors from proprioception and vision, with the visual term
//! gated by the posterior probability that visual and tactile stimulation
//! share a cause. Actions follow proprioceptive prediction errors only.

pub mod agent;
pub mod autodiff;
pub mod causal;
pub mod config;
pub mod env;
pub mod error;
pub mod generative;
pub mod harness;

pub use error::{Error, Result};
