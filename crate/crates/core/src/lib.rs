pub mod corpus;
pub mod error;
pub mod generator;
pub mod lexicon;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
