//! The scale-wise autoregressive transformer.

pub mod config;
pub mod layout;
pub mod loss;
pub mod transformer;

pub use config::ModelConfig;
pub use layout::{Cell, Crop, Layout, Window};
pub use loss::{accuracy, teacher_forcing_loss, Supervision};
pub use transformer::{Forward, Model, SeqBatch};
