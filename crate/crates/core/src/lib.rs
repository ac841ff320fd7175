//! Beam-space beamforming toolkit.
//!
//! The crate turns an M-channel STFT into the output of a set of fixed or learnable basis beams
//! (a beam-space dictionary), mixes the beams with complex per-bin activations, and refines the
//! mixed estimate with a truncated series of trainable residual-cancelling order terms. Oracle
//! MVDR / MWF beamformers, a far-field scene simulator and a small reverse-mode autodiff engine
//! round it out so every algebraic identity can be checked on simulated scenes.
//!
//! Everything here is `no_std` + `alloc`. IO, file formats and the command line live in the
//! `beamspace` companion crate. The `std` feature only switches dependencies to their std builds
//! (runtime CPU feature detection in the matrix kernel).
#![no_std]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod array;
pub mod beamspace;
pub mod dictionary;
pub mod error;
pub mod fft;
pub mod linalg;
pub mod nn;
pub mod oracle;
pub mod sim;
pub mod stft;
pub mod taylor;

pub use error::{Error, Result};

/// Complex sample type used throughout.
pub type C64 = num_complex::Complex64;
