pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod generator;
pub mod grad;
pub mod model;
pub mod train;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use train::{TrainConfig, TrainOutcome};
