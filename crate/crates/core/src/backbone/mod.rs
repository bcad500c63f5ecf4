//! Minimal frozen ViT encoder.

mod config;
mod forward;
mod weights;

pub use config::ViTConfig;
pub use forward::{
    extract_patches, transformer_layer, BlockTrace, ForwardTrace, LayerOutput,
    LayerVars, TokenBundle,
};
pub use weights::{BackboneWeights, BlockWeights, LN_EPS, WEIGHTS_HEADER_BYTES};
pub(crate) use weights::INIT_STD;
