//! Desk-scale physically-based relighting toolkit.
//!
//! The crate is organized around the pipeline it implements:
//!
//! - [`image`]: planar image primitives, grid sampling, metrics.
//! - [`io`]: PFM / PNG file formats.
//! - [`rng`]: deterministic seeded randomness.
//! - [`lighting`]: environment maps, the gray-ball lighting condition and
//!   the dataset light sampler.
//! - [`shading`]: Lambertian diffuse (brute force and lookup), GGX specular
//!   and the `A (.) D + S` surface composition, plus the analytic renderer.
//! - [`scenegen`]: procedural scenes, dataset records and on-disk layout.
//! - [`losses`]: the physics-inspired loss suite with analytic gradients.
//! - [`difftoy`]: noise schedule, toy autoencoder, cross-batch denoiser,
//!   two-stage training, DDIM sampling and diagnostics.
//! - [`eval`]: metric tables and scoring helpers for the CLI.

pub mod difftoy;
pub mod error;
pub mod eval;
pub mod image;
pub mod io;
pub mod lighting;
pub mod losses;
pub mod rng;
pub mod scenegen;
pub mod shading;

pub use error::{Error, Result};
pub use image::{ColorSpace, Image, NormalMap};
pub use rng::Rng;
