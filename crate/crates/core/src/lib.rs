//! Desk-scale latent diffusion with glyph and location-mask conditioning.
//!
//! The crate implements the full pipeline for rendering requested text inside
//! generated images: glyph/mask asset construction, dataset curation and
//! synthesis, condition encoding and fusion, a conditional UNet denoiser with
//! widened input stem, DDIM diffusion core, parameter-partitioned fine-tuning,
//! two-phase hybrid inference, and OCR-oracle evaluation.

pub mod archive;
pub mod conditioning;
pub mod data_pipeline;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod glyph_assets;
pub mod inference;
pub mod nn;
pub mod tape;
pub mod training;

pub use error::{Error, Result};
