pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod color;
pub mod echelon;
pub mod engine;
pub mod episodes;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod optim;
pub mod params;
pub mod pattern;

pub use error::{Error, Result};
