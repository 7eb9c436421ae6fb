// parameter checks use `!(x > 0.0)` so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod io;
pub mod linalg;
pub mod model;
pub mod nominal;
pub mod observer;
pub mod qp;
pub mod safety;
pub mod sim;

pub use error::{Result, StcError};
