//! Token selection for each scale of a generated pyramid.

pub mod causal;
pub mod generate;
pub mod gumbel;
pub mod mask_head;
pub mod topk;
pub mod trace;

pub use causal::{causal_stable_sample, CausalParams, CausalResult};
pub use generate::{Generator, SamplerConfig, SamplerKind};
pub use gumbel::{gumbel_tokens, linear_sigmas};
pub use mask_head::{MaskHead, MaskHeadConfig, MaskPredictor};
pub use topk::{confidence, filtered_distribution, top_k_top_p};
pub use trace::{SampleTrace, ScaleTrace};
