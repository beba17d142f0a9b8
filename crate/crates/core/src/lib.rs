//! State reconstruction for a driven spin-F ensemble under continuous weak
//! measurement of `Fz`.
//!
//! The crate is split along the pipeline:
//!
//! * [`operator`]: spin matrices, the generalized Gell-Mann basis and the
//!   Hilbert-Schmidt vectorization every other module works in.
//! * [`waveform`] and [`physics`]: the planar control field and the physical
//!   parameters of the probe and the ensemble.
//! * [`dynamics`]: Heisenberg-picture propagation of the measured observable,
//!   coarse-grained into the measurement operators `O_i`.
//! * [`measurement`]: synthetic noisy records.
//! * [`estimator`]: information matrix, least-squares inversion, entropy and
//!   positivity projection.
//! * [`design`]: entropy-driven waveform design by coordinate-wise global
//!   search.
//!
//! The crate is `no_std` and only needs `alloc`.

#![no_std]

extern crate alloc;

pub mod design;
pub mod dynamics;
mod error;
pub mod estimator;
pub mod linalg;
pub mod measurement;
pub mod operator;
pub mod physics;
pub mod waveform;

pub use error::{Error, Result};

pub use nalgebra;

/// Complex scalar used for all Hilbert-space matrices.
pub type C64 = nalgebra::Complex<f64>;
