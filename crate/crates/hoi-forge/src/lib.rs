//! Text-driven 3D human-object interaction (HOI) pose generation.
//!
//! The pipeline generates a static grasp pose from a text prompt and an
//! object point cloud in three stages:
//!
//! 1. a dual-branch diffusion prior that denoises the joint human/object
//!    pose state ([`prior`]),
//! 2. a contact-prediction diffusion model over 30 hand-joint contact
//!    anchors ([`contact`]),
//! 3. a contact-guided refiner that perturbs the sampling mean with
//!    analytic geometric objectives ([`refiner`]).
//!
//! Everything is self-contained: the tensor/autodiff engine ([`ad`]),
//! the simplified articulated body ([`body`]), geometry kernels
//! ([`geometry`]), the synthetic dataset generator ([`dataio`]), training
//! augmentation ([`adapt`]), and the evaluation metric suite ([`metrics`]).

pub mod ad;
pub mod adapt;
pub mod body;
pub mod cli;
pub mod config;
pub mod contact;
pub mod dataio;
pub mod diffusion;
pub(crate) mod encode;
pub mod error;
pub mod geometry;
pub mod linalg;
pub mod metrics;
pub mod prior;
pub mod refiner;
pub mod rng;

pub use error::{Error, Result};
