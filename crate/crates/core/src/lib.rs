// `!(x > 0.0)` guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod episode;
pub mod error;
pub mod lsr;
pub mod model;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Graph, Precision, Real, RngStream, Tensor, Var};
