pub mod calibration;
pub mod cluster;
pub mod container;
pub mod error;
pub mod fixed;
pub mod geometry;
pub mod model;
pub mod report;
pub mod runtime;
pub mod sim;
pub mod sweep;
pub mod synth;
pub mod tensor;
pub mod tensor_file;

pub use error::{Error, Result};
