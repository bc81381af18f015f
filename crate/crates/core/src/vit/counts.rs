//! Closed-form parameter and FLOP counts.

use super::ViTConfig;
use crate::error::Result;

/// Learnable parameters per component.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    /// Projection `E` (`D x P^2`) plus its bias (`D`).
    pub patch_embed: usize,
    /// `N_p x D` positional embeddings.
    pub positional: usize,
    /// All transformer layers.
    pub encoder_layers: usize,
    /// Final layer norm.
    pub final_norm: usize,
    pub decoder: usize,
}

impl ParamCount {
    /// Everything up to and including the final norm.
    pub fn encoder_total(&self) -> usize {
        self.patch_embed + self.positional + self.encoder_layers + self.final_norm
    }

    pub fn total(&self) -> usize {
        self.encoder_total() + self.decoder
    }
}

pub fn count_params(config: &ViTConfig) -> Result<ParamCount> {
    config.validate_shape()?;
    let d = config.embed_dim;
    let f = config.mlp_hidden();
    let per_layer = 2 * d        // norm1
        + 4 * (d * d + d)        // q, k, v, out
        + 2 * d                  // norm2
        + (f * d + f)            // fc1
        + (d * f + d); // fc2
    let ch = &config.decoder_channels;
    let decoder = if ch.is_empty() {
        0
    } else {
        let proj = ch[0] * d + ch[0];
        let stages: usize = ch.windows(2).map(|w| w[1] * w[0] * 9 + w[1]).sum();
        let head = ch[ch.len() - 1] + 1;
        proj + stages + head
    };
    Ok(ParamCount {
        patch_embed: d * config.patch_dim() + d,
        positional: config.num_tokens() * d,
        encoder_layers: config.depth * per_layer,
        final_norm: 2 * d,
        decoder,
    })
}

/// FLOPs charged per elementwise softmax/norm/activation/resampling output.
pub const ELEMENTWISE_FLOPS: u64 = 5;

/// Forward-pass cost breakdown.
///
/// Matrix products and convolutions are tallied as multiply-accumulates
/// (MACs) and converted at 2 FLOPs per MAC. Softmax, layer norm, GELU,
/// sigmoid and bilinear upsampling are charged [`ELEMENTWISE_FLOPS`] per
/// output element. Bias additions are not counted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlopReport {
    pub patch_embed_macs: u64,
    /// Q, K, V and output projections.
    pub attention_projection_macs: u64,
    /// `Q K^T` plus `A V`.
    pub attention_matmul_macs: u64,
    pub ffn_macs: u64,
    pub decoder_macs: u64,
    pub elementwise_ops: u64,
}

impl FlopReport {
    pub fn total_macs(&self) -> u64 {
        self.patch_embed_macs
            + self.attention_projection_macs
            + self.attention_matmul_macs
            + self.ffn_macs
            + self.decoder_macs
    }

    /// Attention score and weighting products in FLOPs.
    pub fn attention_matmul_flops(&self) -> u64 {
        2 * self.attention_matmul_macs
    }

    /// `2 * MACs + 5 * elementwise outputs`.
    pub fn total_flops(&self) -> u64 {
        2 * self.total_macs() + ELEMENTWISE_FLOPS * self.elementwise_ops
    }

    pub fn convention() -> &'static str {
        "1 multiply-accumulate = 2 FLOPs; softmax/layer-norm/GELU/sigmoid/upsample = 5 FLOPs per output element; biases not counted"
    }
}

pub fn count_flops(config: &ViTConfig) -> Result<FlopReport> {
    config.validate_shape()?;
    let n = config.num_tokens() as u64;
    let d = config.embed_dim as u64;
    let f = config.mlp_hidden() as u64;
    let l = config.depth as u64;
    let heads = config.heads as u64;
    let pd = config.patch_dim() as u64;

    let mut elementwise = l * (heads * n * n     // softmax
        + 2 * n * d                               // two layer norms
        + n * f)                                  // GELU
        + n * d; // final norm
    let ch = &config.decoder_channels;
    let mut decoder_macs = 0;
    if !ch.is_empty() {
        let mut side = config.grid_side() as u64;
        decoder_macs += side * side * d * ch[0] as u64;
        for w in ch.windows(2) {
            let (cin, cout) = (w[0] as u64, w[1] as u64);
            side *= 2;
            elementwise += side * side * cin; // upsample
            decoder_macs += side * side * cin * cout * 9;
            elementwise += side * side * cout; // GELU
        }
        decoder_macs += side * side * *ch.last().unwrap() as u64;
        elementwise += side * side; // sigmoid
    }
    Ok(FlopReport {
        patch_embed_macs: n * pd * d,
        attention_projection_macs: l * 4 * n * d * d,
        attention_matmul_macs: l * 2 * n * n * d,
        ffn_macs: l * 2 * n * d * f,
        decoder_macs,
        elementwise_ops: elementwise,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::ModelParams;

    #[test]
    fn closed_form_without_layers_or_decoder() {
        let c = ViTConfig { depth: 0, decoder_channels: vec![], ..ViTConfig::tiny() };
        let pc = count_params(&c).unwrap();
        let (d, p2, n) = (8, 16, 16);
        assert_eq!(pc.patch_embed, d * p2 + d);
        assert_eq!(pc.positional, n * d);
        assert_eq!(pc.encoder_layers, 0);
        assert_eq!(pc.decoder, 0);
    }

    #[test]
    fn counts_match_allocated_tensors() {
        let configs = [
            ViTConfig::tiny(),
            ViTConfig { image_size: 32, patch_size: 8, embed_dim: 12, depth: 3, heads: 3, mlp_ratio: 2, decoder_channels: vec![16, 8, 4, 2] },
            ViTConfig { depth: 0, decoder_channels: vec![], ..ViTConfig::tiny() },
        ];
        for c in configs {
            let p = ModelParams::zeros(&c).unwrap();
            assert_eq!(count_params(&c).unwrap().total(), p.num_params(), "{c:?}");
        }
    }

    #[test]
    fn attention_term_closed_form_and_scaling() {
        let c = ViTConfig::base16();
        let r = count_flops(&c).unwrap();
        let n = 1024u64;
        assert_eq!(r.attention_matmul_flops(), 12 * 2 * 2 * n * n * 768);
        let big = ViTConfig { image_size: 1024, ..ViTConfig::base16() };
        assert_eq!(count_flops(&big).unwrap().attention_matmul_flops(), 16 * r.attention_matmul_flops());
    }
}
