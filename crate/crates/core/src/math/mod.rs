//! Small reverse-mode autodiff engine and the neural-network building blocks
//! (linear/conv/batch-norm layers, Adam) used by the field model.

pub mod adam;
pub mod conv;
pub mod gradcheck;
pub mod nn;
pub mod sample;
pub mod tensor;

pub use adam::Adam;
pub use tensor::{Arr, GradStore, Tape, Tensor};
