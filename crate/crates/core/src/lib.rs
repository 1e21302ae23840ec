//! Modular, gradient-isolated training of layer-wise neural networks.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod estimators;
pub mod layers;
pub mod optim;
pub mod probe;
pub mod rng;
pub mod sparse;
pub mod tensor;
pub mod trainer;

pub use autodiff::{grad_check, GradientMap, Primitive, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
