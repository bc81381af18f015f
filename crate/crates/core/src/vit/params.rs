use rand_distr::{Distribution, Normal};

use super::ViTConfig;
use crate::error::{ensure, Result};
use crate::rng::{rng_from_seed, Rng};

/// Dense row-major tensor of doubles.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        ensure!(n == data.len(), DimensionMismatch, "shape {shape:?} needs {n} values, got {}", data.len());
        Ok(Self { shape: shape.to_vec(), data })
    }

    /// Truncated normal (resampled beyond two standard deviations).
    fn trunc_normal(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let v: f64 = normal.sample(rng);
                if v.abs() <= 2.0 * std {
                    break v;
                }
            })
            .collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.shape)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Patch projection `E` (`D x P^2`, plus bias) and positional embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbedParams {
    pub weight: Tensor,
    pub bias: Tensor,
    pub pos: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayerParams {
    pub norm1: NormParams,
    /// Query/key/value projections, `D x D` each; head `h` owns rows
    /// `h*d_head .. (h+1)*d_head`.
    pub q_weight: Tensor,
    pub q_bias: Tensor,
    pub k_weight: Tensor,
    pub k_bias: Tensor,
    pub v_weight: Tensor,
    pub v_bias: Tensor,
    pub out_weight: Tensor,
    pub out_bias: Tensor,
    pub norm2: NormParams,
    pub fc1_weight: Tensor,
    pub fc1_bias: Tensor,
    pub fc2_weight: Tensor,
    pub fc2_bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub proj_weight: Tensor,
    pub proj_bias: Tensor,
    /// `(weight [C_out, C_in, 3, 3], bias [C_out])` per upsampling stage.
    pub stages: Vec<(Tensor, Tensor)>,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

/// Every learnable tensor of the segmentation model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub embed: PatchEmbedParams,
    pub layers: Vec<EncoderLayerParams>,
    pub norm: NormParams,
    pub decoder: Option<DecoderParams>,
}

const INIT_STD: f64 = 0.02;

impl ModelParams {
    /// Zero-valued parameters with the shapes implied by `config`.
    pub fn zeros(config: &ViTConfig) -> Result<Self> {
        config.validate_shape()?;
        Ok(Self::build(config, &mut |shape, _kind| Tensor::zeros(shape)))
    }

    /// Seeded initialisation: truncated normal (std 0.02) for encoder
    /// projections, positional embeddings and 1x1 decoder maps, truncated
    /// He-normal for the 3x3 decoder convolutions, zero biases, unit norms.
    pub fn init(config: &ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(seed);
        Ok(Self::build(config, &mut |shape, kind| match kind {
            Init::Zero => Tensor::zeros(shape),
            Init::One => Tensor::filled(shape, 1.0),
            Init::Std => Tensor::trunc_normal(shape, INIT_STD, &mut rng),
            Init::He(fan_in) => Tensor::trunc_normal(shape, (2.0 / fan_in as f64).sqrt(), &mut rng),
        }))
    }

    fn build(config: &ViTConfig, make: &mut dyn FnMut(&[usize], Init) -> Tensor) -> Self {
        let d = config.embed_dim;
        let f = config.mlp_hidden();
        let norm = |make: &mut dyn FnMut(&[usize], Init) -> Tensor| NormParams {
            weight: make(&[d], Init::One),
            bias: make(&[d], Init::Zero),
        };
        let embed = PatchEmbedParams {
            weight: make(&[d, config.patch_dim()], Init::Std),
            bias: make(&[d], Init::Zero),
            pos: make(&[config.num_tokens(), d], Init::Std),
        };
        let layers = (0..config.depth)
            .map(|_| EncoderLayerParams {
                norm1: norm(make),
                q_weight: make(&[d, d], Init::Std),
                q_bias: make(&[d], Init::Zero),
                k_weight: make(&[d, d], Init::Std),
                k_bias: make(&[d], Init::Zero),
                v_weight: make(&[d, d], Init::Std),
                v_bias: make(&[d], Init::Zero),
                out_weight: make(&[d, d], Init::Std),
                out_bias: make(&[d], Init::Zero),
                norm2: norm(make),
                fc1_weight: make(&[f, d], Init::Std),
                fc1_bias: make(&[f], Init::Zero),
                fc2_weight: make(&[d, f], Init::Std),
                fc2_bias: make(&[d], Init::Zero),
            })
            .collect();
        let final_norm = norm(make);
        let decoder = if config.decoder_channels.is_empty() {
            None
        } else {
            let ch = &config.decoder_channels;
            let c_last = *ch.last().unwrap();
            Some(DecoderParams {
                proj_weight: make(&[ch[0], d], Init::Std),
                proj_bias: make(&[ch[0]], Init::Zero),
                stages: ch
                    .windows(2)
                    .map(|w| (make(&[w[1], w[0], 3, 3], Init::He(9 * w[0])), make(&[w[1]], Init::Zero)))
                    .collect(),
                head_weight: make(&[1, c_last], Init::Std),
                head_bias: make(&[1], Init::Zero),
            })
        };
        Self { embed, layers, norm: final_norm, decoder }
    }

    /// Named tensors in a fixed canonical order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("patch_embed.weight".into(), &self.embed.weight),
            ("patch_embed.bias".into(), &self.embed.bias),
            ("pos_embed".into(), &self.embed.pos),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("layers.{i}.{s}");
            out.extend([
                (p("norm1.weight"), &l.norm1.weight),
                (p("norm1.bias"), &l.norm1.bias),
                (p("attn.q.weight"), &l.q_weight),
                (p("attn.q.bias"), &l.q_bias),
                (p("attn.k.weight"), &l.k_weight),
                (p("attn.k.bias"), &l.k_bias),
                (p("attn.v.weight"), &l.v_weight),
                (p("attn.v.bias"), &l.v_bias),
                (p("attn.out.weight"), &l.out_weight),
                (p("attn.out.bias"), &l.out_bias),
                (p("norm2.weight"), &l.norm2.weight),
                (p("norm2.bias"), &l.norm2.bias),
                (p("mlp.fc1.weight"), &l.fc1_weight),
                (p("mlp.fc1.bias"), &l.fc1_bias),
                (p("mlp.fc2.weight"), &l.fc2_weight),
                (p("mlp.fc2.bias"), &l.fc2_bias),
            ]);
        }
        out.push(("norm.weight".into(), &self.norm.weight));
        out.push(("norm.bias".into(), &self.norm.bias));
        if let Some(dec) = &self.decoder {
            out.push(("decoder.proj.weight".into(), &dec.proj_weight));
            out.push(("decoder.proj.bias".into(), &dec.proj_bias));
            for (s, (w, b)) in dec.stages.iter().enumerate() {
                out.push((format!("decoder.stages.{s}.weight"), w));
                out.push((format!("decoder.stages.{s}.bias"), b));
            }
            out.push(("decoder.head.weight".into(), &dec.head_weight));
            out.push(("decoder.head.bias".into(), &dec.head_bias));
        }
        out
    }

    /// Mutable tensors in the same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.embed.weight, &mut self.embed.bias, &mut self.embed.pos];
        for l in &mut self.layers {
            out.extend([
                &mut l.norm1.weight,
                &mut l.norm1.bias,
                &mut l.q_weight,
                &mut l.q_bias,
                &mut l.k_weight,
                &mut l.k_bias,
                &mut l.v_weight,
                &mut l.v_bias,
                &mut l.out_weight,
                &mut l.out_bias,
                &mut l.norm2.weight,
                &mut l.norm2.bias,
                &mut l.fc1_weight,
                &mut l.fc1_bias,
                &mut l.fc2_weight,
                &mut l.fc2_bias,
            ]);
        }
        out.push(&mut self.norm.weight);
        out.push(&mut self.norm.bias);
        if let Some(dec) = &mut self.decoder {
            out.push(&mut dec.proj_weight);
            out.push(&mut dec.proj_bias);
            for (w, b) in &mut dec.stages {
                out.push(w);
                out.push(b);
            }
            out.push(&mut dec.head_weight);
            out.push(&mut dec.head_bias);
        }
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data.fill(0.0);
        }
        z
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &ModelParams) {
        let src: Vec<&Tensor> = other.tensors().into_iter().map(|(_, t)| t).collect();
        for (dst, s) in self.tensors_mut().into_iter().zip(src) {
            for (a, b) in dst.data.iter_mut().zip(&s.data) {
                *a += b;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Name of the first tensor holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<String> {
        self.tensors()
            .into_iter()
            .find(|(_, t)| t.data.iter().any(|v| !v.is_finite()))
            .map(|(n, _)| n)
    }

    /// Verifies every tensor shape against `config`.
    pub fn check_shapes(&self, config: &ViTConfig) -> Result<()> {
        let reference = Self::zeros(config)?;
        let mine = self.tensors();
        let theirs = reference.tensors();
        ensure!(
            mine.len() == theirs.len(),
            DimensionMismatch,
            "{} parameter tensors, config implies {}",
            mine.len(),
            theirs.len()
        );
        for ((name, a), (_, b)) in mine.iter().zip(&theirs) {
            ensure!(
                a.shape == b.shape && a.data.len() == b.data.len(),
                DimensionMismatch,
                "tensor `{name}` has shape {:?}, config implies {:?}",
                a.shape,
                b.shape
            );
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Init {
    Zero,
    One,
    Std,
    He(usize),
}
