// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod real;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Mode, Var};
pub use params::ParamSet;
pub use real::{FloatWidth, Real};
pub use tensor::Tensor;
