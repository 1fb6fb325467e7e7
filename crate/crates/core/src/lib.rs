pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distortion;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod graph;
pub mod inspect;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod params;
pub mod reference;
pub mod selfcheck;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::{Real, Tensor};
