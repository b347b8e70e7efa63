//! Synthetic caption→image world, oracles and desk metrics.

pub mod dataset;
pub mod locality;
pub mod mmd;
pub mod oracle;
pub mod report;
pub mod scene;

pub use dataset::{gen_dataset, read_dataset, write_dataset, Sample};
pub use locality::{attention_locality, Locality};
pub use mmd::{mmd_proxy, Mmd};
pub use oracle::{alignment_oracle, alignment_terms, structure_oracle, Alignment};
pub use report::MetricsReport;
pub use scene::{Caption, Color, Position, Scene, Shape, Size};
