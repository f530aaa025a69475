pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod layers;
pub mod model;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision model; every check in this crate runs at this width.
pub type ForecastModel64 = model::ForecastModel<f64>;
pub type ForecastModel32 = model::ForecastModel<f32>;
pub type Graph64 = tensor::Graph<f64>;
pub type Graph32 = tensor::Graph<f32>;
