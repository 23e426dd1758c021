//! Epipolar attention fields for cross-view BEV transformers.
//!
//! The crate is `no_std` with `alloc`. It contains:
//!
//! * [`tensor`]: a dense `f64` tensor and a reverse-mode gradient tape,
//! * [`geometry`]: pinhole cameras, the BEV grid as an orthographic view,
//!   and epipolar lines of vertical rays,
//! * [`field`]: Gaussian attention weights around epipolar lines,
//! * [`attention`]: Hadamard-weighted multi-head cross-attention,
//! * [`model`], [`loss`], [`train`]: a desk-scale segmentation model,
//! * [`synth`]: deterministic synthetic multi-camera scenes.
//!
//! IO, file formats and the command line live in the companion `eaf` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod attention;
pub mod error;
pub mod field;
pub mod geometry;
pub mod loss;
pub mod math;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
