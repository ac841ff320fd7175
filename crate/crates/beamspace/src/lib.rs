//! File formats, dataset persistence and the command-line front end for the beam-space
//! beamforming library.

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod export;
pub mod fsutil;
pub mod prefetch;
pub mod tensor_file;
pub mod wav;

pub use error::{Error, Result};
