pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod models;
pub mod nn;
pub mod ops;
pub mod params;
pub mod tensor;
pub mod training;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use models::{Arch, ModelGraph, ModelOptions};
pub use params::{Ctx, ParamStore};
pub use tensor::{Float, Shape, Tensor};
