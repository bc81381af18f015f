use super::ops::{self, NormCache};
use super::{EncoderLayerParams, ModelParams, PatchEmbedParams, Tensor, ViTConfig};
use crate::error::{ensure, Error, Result};
use crate::imgproc::ImageGrid;

/// Cuts an image into `[N_p, P^2]` patch rows: patches in row-major patch
/// order, pixels row-major within each patch.
pub fn patchify(image: &ImageGrid, patch: usize) -> Result<Tensor> {
    let (h, w) = image.dims();
    ensure!(
        patch >= 1 && h % patch == 0 && w % patch == 0,
        InvalidParameter,
        "image {h}x{w} not divisible into {patch}x{patch} patches"
    );
    let (gh, gw) = (h / patch, w / patch);
    let mut data = Vec::with_capacity(h * w);
    for py in 0..gh {
        for px in 0..gw {
            for y in 0..patch {
                let row = (py * patch + y) * w + px * patch;
                data.extend_from_slice(&image.data()[row..row + patch]);
            }
        }
    }
    Tensor::from_vec(&[gh * gw, patch * patch], data)
}

/// Inverse of [`patchify`], returning row-major pixels.
pub fn unpatchify(patches: &Tensor, height: usize, width: usize, patch: usize) -> Result<Vec<f64>> {
    ensure!(
        height % patch == 0 && width % patch == 0 && patches.shape == [height * width / (patch * patch), patch * patch],
        DimensionMismatch,
        "patch tensor {:?} does not tile a {height}x{width} image with patch {patch}",
        patches.shape
    );
    let gw = width / patch;
    let mut out = vec![0.0; height * width];
    for (n, p) in patches.data.chunks(patch * patch).enumerate() {
        let (py, px) = (n / gw, n % gw);
        for y in 0..patch {
            let row = (py * patch + y) * width + px * patch;
            out[row..row + patch].copy_from_slice(&p[y * patch..(y + 1) * patch]);
        }
    }
    Ok(out)
}

/// `token_i = E * patch_i + b + p_i`.
pub fn embed(patches: &Tensor, params: &PatchEmbedParams) -> Result<Tensor> {
    ensure!(patches.shape.len() == 2, DimensionMismatch, "patches must be a matrix");
    let (n, pd) = (patches.shape[0], patches.shape[1]);
    let d = params.weight.shape[0];
    ensure!(
        params.weight.shape[1] == pd,
        DimensionMismatch,
        "projection expects patches of length {}, got {pd}",
        params.weight.shape[1]
    );
    ensure!(
        params.pos.shape[0] == n,
        DimensionMismatch,
        "{n} patches but {} positional embeddings",
        params.pos.shape[0]
    );
    let mut t = ops::linear(&patches.data, n, pd, &params.weight.data, &params.bias.data, d);
    for (a, p) in t.iter_mut().zip(&params.pos.data) {
        *a += p;
    }
    Tensor::from_vec(&[n, d], t)
}

struct LayerCache {
    x_in: Vec<f64>,
    norm1: NormCache,
    a1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<Vec<f64>>,
    attn: Vec<f64>,
    norm2: NormCache,
    a2: Vec<f64>,
    hid: Vec<f64>,
    gel: Vec<f64>,
}

fn layer_forward(x: &[f64], n: usize, d: usize, heads: usize, p: &EncoderLayerParams) -> (Vec<f64>, LayerCache) {
    let f = p.fc1_weight.shape[0];
    let (a1, norm1) = ops::layer_norm(x, n, d, &p.norm1.weight.data, &p.norm1.bias.data);
    let q = ops::linear(&a1, n, d, &p.q_weight.data, &p.q_bias.data, d);
    let k = ops::linear(&a1, n, d, &p.k_weight.data, &p.k_bias.data, d);
    let v = ops::linear(&a1, n, d, &p.v_weight.data, &p.v_bias.data, d);
    let (attn, probs) = ops::attention(&q, &k, &v, n, d, heads);
    let msa = ops::linear(&attn, n, d, &p.out_weight.data, &p.out_bias.data, d);
    let x1: Vec<f64> = x.iter().zip(&msa).map(|(a, b)| a + b).collect();
    let (a2, norm2) = ops::layer_norm(&x1, n, d, &p.norm2.weight.data, &p.norm2.bias.data);
    let hid = ops::linear(&a2, n, d, &p.fc1_weight.data, &p.fc1_bias.data, f);
    let gel: Vec<f64> = hid.iter().map(|&v| ops::gelu(v)).collect();
    let ffn = ops::linear(&gel, n, f, &p.fc2_weight.data, &p.fc2_bias.data, d);
    let out: Vec<f64> = x1.iter().zip(&ffn).map(|(a, b)| a + b).collect();
    let cache = LayerCache { x_in: x.to_vec(), norm1, a1, q, k, v, probs, attn, norm2, a2, hid, gel };
    (out, cache)
}

fn layer_backward(
    dout: &[f64],
    c: &LayerCache,
    n: usize,
    d: usize,
    heads: usize,
    p: &EncoderLayerParams,
    g: &mut EncoderLayerParams,
) -> Vec<f64> {
    let f = p.fc1_weight.shape[0];
    // FFN branch.
    let dgel = ops::linear_backward(&c.gel, n, f, &p.fc2_weight.data, d, dout, &mut g.fc2_weight.data, &mut g.fc2_bias.data);
    let dhid: Vec<f64> = dgel.iter().zip(&c.hid).map(|(gv, &h)| gv * ops::gelu_grad(h)).collect();
    let da2 = ops::linear_backward(&c.a2, n, d, &p.fc1_weight.data, f, &dhid, &mut g.fc1_weight.data, &mut g.fc1_bias.data);
    let dn2 = ops::layer_norm_backward(&da2, &c.norm2, n, d, &p.norm2.weight.data, &mut g.norm2.weight.data, &mut g.norm2.bias.data);
    let dx1: Vec<f64> = dout.iter().zip(&dn2).map(|(a, b)| a + b).collect();
    // Attention branch.
    let dattn = ops::linear_backward(&c.attn, n, d, &p.out_weight.data, d, &dx1, &mut g.out_weight.data, &mut g.out_bias.data);
    let (dq, dk, dv) = ops::attention_backward(&c.q, &c.k, &c.v, &c.probs, &dattn, n, d, heads);
    let mut da1 = ops::linear_backward(&c.a1, n, d, &p.q_weight.data, d, &dq, &mut g.q_weight.data, &mut g.q_bias.data);
    let dak = ops::linear_backward(&c.a1, n, d, &p.k_weight.data, d, &dk, &mut g.k_weight.data, &mut g.k_bias.data);
    let dav = ops::linear_backward(&c.a1, n, d, &p.v_weight.data, d, &dv, &mut g.v_weight.data, &mut g.v_bias.data);
    for ((a, b), c2) in da1.iter_mut().zip(&dak).zip(&dav) {
        *a += b + c2;
    }
    let dn1 = ops::layer_norm_backward(&da1, &c.norm1, n, d, &p.norm1.weight.data, &mut g.norm1.weight.data, &mut g.norm1.bias.data);
    dx1.iter().zip(&dn1).map(|(a, b)| a + b).collect()
}

/// One pre-norm transformer layer on `[N, D]` tokens.
pub fn encoder_layer_forward(tokens: &Tensor, params: &EncoderLayerParams, heads: usize) -> Result<Tensor> {
    ensure!(tokens.shape.len() == 2, DimensionMismatch, "tokens must be a matrix");
    let (n, d) = (tokens.shape[0], tokens.shape[1]);
    ensure!(
        params.q_weight.shape == [d, d] && heads >= 1 && d % heads == 0,
        DimensionMismatch,
        "layer expects width {}, tokens have {d} ({heads} heads)",
        params.q_weight.shape[0]
    );
    let (out, _) = layer_forward(&tokens.data, n, d, heads, params);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence { tensor: "encoder activations".into(), msg: "non-finite output".into() });
    }
    Tensor::from_vec(&[n, d], out)
}

/// Per-head attention probability matrices (`[N, N]` each) of one layer.
pub fn attention_probabilities(tokens: &Tensor, params: &EncoderLayerParams, heads: usize) -> Result<Vec<Vec<f64>>> {
    let (n, d) = (tokens.shape[0], tokens.shape[1]);
    ensure!(params.q_weight.shape == [d, d], DimensionMismatch, "token width {d} does not match layer");
    let (_, cache) = layer_forward(&tokens.data, n, d, heads, params);
    Ok(cache.probs)
}

struct StageCache {
    /// Spatial size after upsampling.
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    up: Vec<f64>,
    pre: Vec<f64>,
}

/// Activations recorded by [`forward_cached`] for [`backward`].
pub struct ForwardCache {
    config: ViTConfig,
    patches: Tensor,
    layers: Vec<LayerCache>,
    final_norm: NormCache,
    features: Vec<f64>,
    proj: Vec<f64>,
    stages: Vec<StageCache>,
    head_in: Vec<f64>,
    pred: Vec<f64>,
    /// Output of the final layer norm, `[N, D]`.
    tokens: Vec<f64>,
}

impl ForwardCache {
    /// Sigmoid output, row-major `H x W`.
    pub fn pred(&self) -> &[f64] {
        &self.pred
    }

    pub fn pred_grid(&self) -> ImageGrid {
        let s = self.config.image_size;
        ImageGrid::from_parts(s, s, self.pred.clone(), false)
    }

    /// Encoder output tokens after the final norm, before the spatial reshape.
    pub fn encoder_tokens(&self) -> Tensor {
        Tensor { shape: vec![self.config.num_tokens(), self.config.embed_dim], data: self.tokens.clone() }
    }
}

fn check_inputs(image: &ImageGrid, params: &ModelParams, config: &ViTConfig) -> Result<()> {
    config.validate()?;
    ensure!(
        image.dims() == (config.image_size, config.image_size),
        DimensionMismatch,
        "image {:?} does not match configured size {}",
        image.dims(),
        config.image_size
    );
    params.check_shapes(config)
}

/// Full forward pass, keeping every activation needed for backpropagation.
pub fn forward_cached(image: &ImageGrid, params: &ModelParams, config: &ViTConfig) -> Result<ForwardCache> {
    check_inputs(image, params, config)?;
    let n = config.num_tokens();
    let d = config.embed_dim;
    let patches = patchify(image, config.patch_size)?;
    let mut x = embed(&patches, &params.embed)?.data;
    let mut layers = Vec::with_capacity(config.depth);
    for lp in &params.layers {
        let (out, cache) = layer_forward(&x, n, d, config.heads, lp);
        layers.push(cache);
        x = out;
    }
    let (tokens, final_norm) = ops::layer_norm(&x, n, d, &params.norm.weight.data, &params.norm.bias.data);

    // [N, D] token rows -> channel-first [D, gh, gw] feature map.
    let mut features = vec![0.0; d * n];
    for t in 0..n {
        for c in 0..d {
            features[c * n + t] = tokens[t * d + c];
        }
    }
    let dec = params.decoder.as_ref().expect("validated config has a decoder");
    let ch = &config.decoder_channels;
    let proj = ops::conv1x1(&features, d, n, &dec.proj_weight.data, &dec.proj_bias.data, ch[0]);
    let mut act = proj.clone();
    let (mut h, mut w) = (config.grid_side(), config.grid_side());
    let mut stages = Vec::with_capacity(dec.stages.len());
    for (s, (wt, b)) in dec.stages.iter().enumerate() {
        let (cin, cout) = (ch[s], ch[s + 1]);
        let up = ops::upsample2x(&act, cin, h, w);
        h *= 2;
        w *= 2;
        let pre = ops::conv3x3(&up, cin, h, w, &wt.data, &b.data, cout);
        act = pre.iter().map(|&v| ops::gelu(v)).collect();
        stages.push(StageCache { h, w, cin, cout, up, pre });
    }
    let c_last = *ch.last().unwrap();
    let logits = ops::conv1x1(&act, c_last, h * w, &dec.head_weight.data, &dec.head_bias.data, 1);
    let pred: Vec<f64> = logits.iter().map(|&v| ops::sigmoid(v)).collect();
    if pred.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence { tensor: "prediction".into(), msg: "non-finite forward output".into() });
    }
    Ok(ForwardCache {
        config: config.clone(),
        patches,
        layers,
        final_norm,
        features,
        proj,
        stages,
        head_in: act,
        pred,
        tokens,
    })
}

/// Soft segmentation map in `[0, 1]`, same size as the input.
pub fn forward(image: &ImageGrid, params: &ModelParams, config: &ViTConfig) -> Result<ImageGrid> {
    Ok(forward_cached(image, params, config)?.pred_grid())
}

/// Gradients of a scalar loss with respect to every parameter, given
/// `d loss / d pred` per output pixel.
pub fn backward(cache: &ForwardCache, params: &ModelParams, dpred: &[f64]) -> Result<ModelParams> {
    let config = &cache.config;
    ensure!(
        dpred.len() == cache.pred.len(),
        DimensionMismatch,
        "{} output gradients for {} outputs",
        dpred.len(),
        cache.pred.len()
    );
    let mut grads = params.zeros_like();
    let n = config.num_tokens();
    let d = config.embed_dim;
    let ch = &config.decoder_channels;
    let dec = params.decoder.as_ref().expect("validated config has a decoder");

    let dlogits: Vec<f64> = dpred.iter().zip(&cache.pred).map(|(g, p)| g * p * (1.0 - p)).collect();
    let s = config.image_size;
    let c_last = *ch.last().unwrap();
    let mut dact = {
        let gd = grads.decoder.as_mut().unwrap();
        ops::conv1x1_backward(
            &cache.head_in,
            c_last,
            s * s,
            &dec.head_weight.data,
            1,
            &dlogits,
            &mut gd.head_weight.data,
            &mut gd.head_bias.data,
        )
    };
    for (si, st) in cache.stages.iter().enumerate().rev() {
        let dpre: Vec<f64> = dact.iter().zip(&st.pre).map(|(g, &v)| g * ops::gelu_grad(v)).collect();
        let gd = grads.decoder.as_mut().unwrap();
        let (gw, gb) = &mut gd.stages[si];
        let dup = ops::conv3x3_backward(
            &st.up,
            st.cin,
            st.h,
            st.w,
            &dec.stages[si].0.data,
            st.cout,
            &dpre,
            &mut gw.data,
            &mut gb.data,
        );
        dact = ops::upsample2x_backward(&dup, st.cin, st.h / 2, st.w / 2);
    }
    debug_assert_eq!(dact.len(), cache.proj.len());
    let dfeat = {
        let gd = grads.decoder.as_mut().unwrap();
        ops::conv1x1_backward(
            &cache.features,
            d,
            n,
            &dec.proj_weight.data,
            ch[0],
            &dact,
            &mut gd.proj_weight.data,
            &mut gd.proj_bias.data,
        )
    };
    let mut dtokens = vec![0.0; n * d];
    for t in 0..n {
        for c in 0..d {
            dtokens[t * d + c] = dfeat[c * n + t];
        }
    }
    let mut dx = ops::layer_norm_backward(
        &dtokens,
        &cache.final_norm,
        n,
        d,
        &params.norm.weight.data,
        &mut grads.norm.weight.data,
        &mut grads.norm.bias.data,
    );
    for (li, lc) in cache.layers.iter().enumerate().rev() {
        dx = layer_backward(&dx, lc, n, d, config.heads, &params.layers[li], &mut grads.layers[li]);
    }
    debug_assert!(cache.layers.iter().all(|l| l.x_in.len() == n * d));
    for (gp, g) in grads.embed.pos.data.iter_mut().zip(&dx) {
        *gp += g;
    }
    let pd = config.patch_dim();
    ops::linear_backward(
        &cache.patches.data,
        n,
        pd,
        &params.embed.weight.data,
        d,
        &dx,
        &mut grads.embed.weight.data,
        &mut grads.embed.bias.data,
    );
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::Divergence { tensor: name, msg: "non-finite gradient".into() });
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn random_image(side: usize, seed: u64) -> ImageGrid {
        let mut rng = rng_from_seed(seed);
        ImageGrid::new(side, side, (0..side * side).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn patchify_shapes_and_inverse() {
        let img = random_image(8, 1);
        let p = patchify(&img, 4).unwrap();
        assert_eq!(p.shape, vec![4, 16]);
        assert_eq!(unpatchify(&p, 8, 8, 4).unwrap(), img.data());
        let whole = patchify(&random_image(4, 2), 4).unwrap();
        assert_eq!(whole.shape, vec![1, 16]);
        assert!(patchify(&img, 3).is_err());
        let big = ImageGrid::filled(512, 512, 0.0).unwrap();
        assert_eq!(patchify(&big, 16).unwrap().shape, vec![1024, 256]);
    }

    #[test]
    fn embed_special_cases() {
        let c = ViTConfig::tiny();
        let mut params = ModelParams::init(&c, 4).unwrap();
        let patches = patchify(&random_image(16, 3), 4).unwrap();
        params.embed.weight.data.fill(0.0);
        let t = embed(&patches, &params.embed).unwrap();
        assert_eq!(t.data, params.embed.pos.data);

        // Identity projection with D = P^2.
        let pe = PatchEmbedParams {
            weight: Tensor::from_vec(&[16, 16], (0..256).map(|i| f64::from(u8::from(i / 16 == i % 16))).collect()).unwrap(),
            bias: Tensor::zeros(&[16]),
            pos: Tensor::zeros(&[16, 16]),
        };
        assert_eq!(embed(&patches, &pe).unwrap().data, patches.data);

        let short = PatchEmbedParams { pos: Tensor::zeros(&[3, 16]), ..pe };
        assert!(embed(&patches, &short).is_err());
    }

    #[test]
    fn zero_branch_weights_make_identity_layer() {
        let c = ViTConfig::tiny();
        let mut params = ModelParams::init(&c, 5).unwrap();
        let l = &mut params.layers[0];
        l.out_weight.data.fill(0.0);
        l.fc2_weight.data.fill(0.0);
        let tokens = embed(&patchify(&random_image(16, 6), 4).unwrap(), &params.embed).unwrap();
        let out = encoder_layer_forward(&tokens, &params.layers[0], c.heads).unwrap();
        assert_eq!(out, tokens);
    }

    #[test]
    fn single_token_attention() {
        let c = ViTConfig { image_size: 4, decoder_channels: vec![8, 4, 2], ..ViTConfig::tiny() };
        let params = ModelParams::init(&c, 7).unwrap();
        let tokens = embed(&patchify(&random_image(4, 8), 4).unwrap(), &params.embed).unwrap();
        let probs = attention_probabilities(&tokens, &params.layers[0], c.heads).unwrap();
        assert!(probs.iter().all(|p| p == &vec![1.0]));
    }

    #[test]
    fn zero_head_gives_half() {
        let c = ViTConfig::tiny();
        let mut params = ModelParams::init(&c, 9).unwrap();
        let dec = params.decoder.as_mut().unwrap();
        dec.head_weight.data.fill(0.0);
        dec.head_bias.data.fill(0.0);
        let out = forward(&random_image(16, 10), &params, &c).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5));
        assert_eq!(out.dims(), (16, 16));
    }

    #[test]
    fn forward_rejects_wrong_size() {
        let c = ViTConfig::tiny();
        let params = ModelParams::init(&c, 9).unwrap();
        assert!(forward(&random_image(8, 1), &params, &c).is_err());
        let other = ViTConfig { embed_dim: 16, ..ViTConfig::tiny() };
        assert!(forward(&random_image(16, 1), &params, &other).is_err());
    }

    #[test]
    fn backward_matches_finite_differences_on_sampled_weights() {
        let c = ViTConfig::tiny();
        let mut params = ModelParams::init(&c, 11).unwrap();
        let mut rng = rng_from_seed(13);
        // Move away from the near-zero init so every gradient is well scaled.
        for t in params.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
        }
        let img = random_image(16, 12);
        let weights: Vec<f64> = (0..256).map(|_| rng.random_range(-1.0..1.0) / 256.0).collect();
        let loss = |p: &ModelParams| -> f64 {
            forward(&img, p, &c).unwrap().data().iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let cache = forward_cached(&img, &params, &c).unwrap();
        let grads = backward(&cache, &params, &weights).unwrap();
        let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
        let analytic: Vec<Vec<f64>> = grads.tensors().into_iter().map(|(_, t)| t.data.clone()).collect();
        for (ti, name) in names.iter().enumerate() {
            for _ in 0..3 {
                let len = analytic[ti].len();
                let idx = rng.random_range(0..len);
                let mut up = params.clone();
                up.tensors_mut()[ti].data[idx] += 1e-5;
                let mut dn = params.clone();
                dn.tensors_mut()[ti].data[idx] -= 1e-5;
                let num = (loss(&up) - loss(&dn)) / 2e-5;
                let a = analytic[ti][idx];
                let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-5);
                assert!(rel < 1e-4, "{name}[{idx}]: analytic {a} numeric {num}");
            }
        }
    }
}
