//! Image tokenizer: pooling features and multi-scale residual quantization.

pub mod codebook;
pub mod features;
pub mod pyramid;
pub mod resample;
pub mod schedule;

pub use codebook::{fit_codebook, Codebook};
pub use features::{extract_features, reconstruct_image, Projection};
pub use pyramid::{
    all_next_scale_inputs, decode, dequantize, encode, next_scale_input, Encoding, TokenPyramid,
    Tokenizer,
};
pub use resample::{area_down, area_up, FeatureMap};
pub use schedule::Schedule;
