pub mod autodiff;
pub mod bench;
pub mod decoder;
pub mod encoders;
pub mod ensemble;
pub mod evaluation;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod panel;
pub mod theory;
pub mod training;

pub use error::{Error, Result};
