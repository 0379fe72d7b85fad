//! Reference-image adapter for a frozen text-to-image diffusion model:
//! multi-layer encoder aggregation, masked decoupled cross-attention,
//! diffusion math, reconstruction training, sampling and evaluation.
//!
//! The bundled backends are small deterministic surrogates so the whole
//! pipeline runs on a CPU in seconds; the traits in [`backends`] and
//! [`encoder`] are the seams for real models.

pub mod backends;
pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod generate;
pub mod image;
pub mod injection;
pub mod linalg;
pub mod model;
pub mod render;
pub mod trainer;

pub use config::AppConfig;
pub use error::{Error, Result};
