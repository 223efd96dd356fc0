//! Transformer encoder with a linear off-ramp after every layer.

pub mod checkpoint;
mod config;
mod model;
mod weights;

pub use config::{ModelConfig, LAYER_NORM_EPS};
pub use model::{
    forward_full, off_ramp_predict, row_uncertainties, token_uncertainty, EncoderTrace,
};
pub(crate) use model::{embed, layer_step, ramp_logits};
pub use weights::{EncoderWeights, LayerIds, NamedTensor, RampIds};
