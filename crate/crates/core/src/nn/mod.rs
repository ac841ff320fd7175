//! Minimal reverse-mode autodiff, dense layers, Adam and a finite-difference gradient check.
//!
//! All arithmetic is `f64`; complex quantities travel as separate real/imaginary tensors.

mod adam;
mod gradcheck;
mod layer;
mod param;
mod schedule;
pub mod suite;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use gradcheck::{grad_check, grad_check_with, relative_error, ridders, Difference, GradCheckReport};
pub use layer::{Activation, Dense, Mlp};
pub use param::{ParamEntry, ParamId, ParamStore};
pub use schedule::PlateauHalving;
pub use tape::{Gradients, GroupMap, Tape, Var};
pub use tensor::Tensor;
