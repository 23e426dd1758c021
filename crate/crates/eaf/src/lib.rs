//! File formats, calibration ingestion and the command-line surface around
//! `eaf-core`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod parallel;
pub mod pnm;
pub mod rig;
pub mod scene_io;
pub mod specs;
pub mod verify;

pub use error::{CliError, Result};
