pub mod autodiff;
pub mod checkpoint;
pub mod checks;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod run;
pub mod tensor;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore, Registry};
pub use tensor::{DType, Element, Tensor};
