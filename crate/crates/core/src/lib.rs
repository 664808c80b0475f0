//! Desk-scale digital twin of single-NV magnetometry in a microfluidic device.
//!
//! The crate simulates a magnetic microparticle steered in-plane by
//! electroosmotic feedback and vertically by a coil magnet, synthesizes
//! lock-in ODMR spectra of a nearby NV center, and runs the estimation
//! pipeline that turns those spectra into fields, dipole-map fits and a
//! shot-noise-limited sensitivity.
//!
//! Internal quantities are SI throughout. CSV and text outputs use the
//! interface units named in their column headers (µm, µT, MHz).

pub mod config;
pub mod constants;
pub mod control;
pub mod dynamics;
pub mod error;
pub mod lsq;
pub mod magnetostatics;
pub mod mapping;
pub mod odmr;
pub mod plot;
pub mod recipes;
pub mod validation;
pub mod world;

pub use error::{Error, Result};

/// Three-vector used for positions (m), fields (T) and moments (A·m²).
pub type Vec3 = nalgebra::Vector3<f64>;
/// In-plane vector (x, y).
pub type Vec2 = nalgebra::Vector2<f64>;
