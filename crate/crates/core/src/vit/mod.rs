//! Plain ViT encoder and shallow upsampling decoder.
//!
//! Images are cut into non-overlapping `P x P` patches, linearly embedded with
//! learned positional vectors, passed through `L` pre-norm transformer
//! layers and a final layer norm, reshaped to a `(H/P) x (W/P)` feature map
//! and decoded by a 1x1 projection, `log2(P)` stages of (2x bilinear
//! upsample, 3x3 conv, GELU) and a 1x1 head followed by a logistic sigmoid.
//!
//! Backpropagation is hand-written layer by layer; [`backward`] consumes the
//! activations recorded by [`forward_cached`].

mod config;
mod counts;
mod model;
pub(crate) mod ops;
mod params;

pub use config::ViTConfig;
pub use counts::{count_flops, count_params, FlopReport, ParamCount};
pub use model::{
    attention_probabilities, backward, embed, encoder_layer_forward, forward, forward_cached,
    patchify, unpatchify, ForwardCache,
};
pub use params::{DecoderParams, EncoderLayerParams, ModelParams, NormParams, PatchEmbedParams, Tensor};
