//! Preference fine-tuning for conditional diffusion models on a small,
//! fully synthetic world.
//!
//! The crate covers a discrete DDPM ([`diffusion`]), an MLP noise predictor
//! with its own reverse-mode tape ([`denoiser`], [`tape`]), synthetic
//! preference data ([`preference`]), the pairwise objectives
//! ([`objectives`]), reference-model management ([`reference`]), the training
//! loops ([`trainer`]) and evaluation ([`eval`]).

pub mod checkpoint;
pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod objectives;
pub mod preference;
pub mod reference;
pub mod seeding;
pub mod tape;
pub mod trainer;

pub use error::{Error, Result};
