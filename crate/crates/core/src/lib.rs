pub mod autodiff;
pub mod auxgen;
pub mod cli;
pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod heads;
pub mod layers;
pub mod metrics;
pub mod predict;
pub mod text;
pub mod train;

pub use error::{Error, Result};
