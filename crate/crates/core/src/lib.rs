pub mod autodiff;
pub mod chm;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod kv;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Padding, Tape, TopkMode, Var};
pub use error::{Error, ErrorKind, Result};
pub use tensor::{Init, Scalar, Tensor};
