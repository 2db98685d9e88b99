pub mod autodiff;
pub mod cli;
pub mod data;
pub mod distill;
pub mod energy;
pub mod eval;
pub mod error;
pub mod model;
pub mod snn;
pub mod teacher_io;

pub use error::{Error, Result};
