pub mod error;
pub mod experiments;
pub mod image;
pub mod model;
pub mod numeric;
pub mod rng;
pub mod rope;
pub mod sampling;
pub mod text;
pub mod tokenizer;
pub mod toyworld;
pub mod train;

pub use error::{Error, Result};
