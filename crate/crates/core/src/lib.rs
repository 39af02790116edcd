pub mod ablation;
pub mod acvi;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod nn;
pub mod params;
pub mod rao;
pub mod tensor;
pub mod train;
pub mod views;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Float, Tensor};
