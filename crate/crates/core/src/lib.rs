pub mod aggregate;
pub mod data;
pub mod error;
pub mod experiment;
pub mod hga;
pub mod interest;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod seqgraph;
pub mod training;

pub use error::{Error, Result};
