//! Shared base network: frozen convolutional feature extractor, projection,
//! time/feature masking, convolutional positional embedding and a pre-norm
//! transformer stack whose every layer output is kept.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::PaddedAudio;
use crate::tensor::{Graph, ParamId, ParamSet, Tensor, TensorError, Var};

/// Prefix of every base-network parameter name.
pub const BASE_PREFIX: &str = "encoder.";
/// Prefix of the feature-extractor parameters, which are never updated.
pub const FEATURE_EXTRACTOR_PREFIX: &str = "encoder.fe.";

const LN_EPS: f64 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("input of {samples} samples is shorter than the receptive field of {receptive_field}")]
    TooShort { samples: usize, receptive_field: usize },
    #[error("invalid encoder configuration: {0}")]
    Config(String),
    #[error("{axis} mask span {span} must be shorter than the masked length {len}")]
    MaskSpan {
        axis: &'static str,
        span: usize,
        len: usize,
    },
    #[error("tap layer {n} out of range 0..={layers}")]
    TapOutOfRange { n: usize, layers: usize },
}

pub type Result<T> = std::result::Result<T, EncoderError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    pub time_prob: f64,
    pub time_span: usize,
    pub feature_prob: f64,
    pub feature_span: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            time_prob: 0.05,
            time_span: 10,
            feature_prob: 0.05,
            feature_span: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub conv_channels: Vec<usize>,
    pub conv_kernels: Vec<usize>,
    pub conv_strides: Vec<usize>,
    pub conv_paddings: Vec<usize>,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub layerdrop: f64,
    pub mask: MaskConfig,
    pub pos_conv_kernel: usize,
    pub pos_conv_groups: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            conv_channels: vec![32; 4],
            conv_kernels: vec![10, 8, 4, 4],
            conv_strides: vec![5, 4, 4, 4],
            conv_paddings: vec![3, 2, 0, 0],
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 128,
            dropout: 0.1,
            layerdrop: 0.05,
            mask: MaskConfig::default(),
            pos_conv_kernel: 31,
            pos_conv_groups: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(EncoderError::Config(m));
        let n = self.conv_kernels.len();
        if n == 0 || self.conv_channels.len() != n || self.conv_strides.len() != n || self.conv_paddings.len() != n {
            return err("conv_channels, conv_kernels, conv_strides and conv_paddings need equal, nonzero lengths".into());
        }
        if self.conv_kernels.iter().chain(&self.conv_strides).chain(&self.conv_channels).any(|&v| v == 0) {
            return err("conv sizes must be positive".into());
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return err(format!("d_model {} must be a positive multiple of n_heads {}", self.d_model, self.n_heads));
        }
        if self.ffn_dim == 0 {
            return err("ffn_dim must be positive".into());
        }
        if self.pos_conv_kernel.is_multiple_of(2) {
            return err(format!("pos_conv_kernel {} must be odd to keep the length", self.pos_conv_kernel));
        }
        if self.pos_conv_groups == 0 || !self.d_model.is_multiple_of(self.pos_conv_groups) {
            return err(format!(
                "d_model {} must be divisible by pos_conv_groups {}",
                self.d_model, self.pos_conv_groups
            ));
        }
        for (name, p) in [
            ("dropout", self.dropout),
            ("layerdrop", self.layerdrop),
            ("mask.time_prob", self.mask.time_prob),
            ("mask.feature_prob", self.mask.feature_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return err(format!("{name} = {p} is not a probability"));
            }
        }
        Ok(())
    }

    /// Product of the conv strides, in samples per frame.
    pub fn total_stride(&self) -> usize {
        self.conv_strides.iter().product()
    }

    /// Smallest input that yields one frame.
    pub fn receptive_field(&self) -> usize {
        let mut need = 1;
        for ((k, s), p) in self.layers().rev() {
            need = ((need - 1) * s + k).saturating_sub(2 * p).max(1);
        }
        need
    }

    fn layers(&self) -> impl DoubleEndedIterator<Item = ((usize, usize), usize)> + '_ {
        self.conv_kernels
            .iter()
            .copied()
            .zip(self.conv_strides.iter().copied())
            .zip(self.conv_paddings.iter().copied())
    }

    /// Length after each conv layer for an input of `samples`, or `None`
    /// when some layer has nothing to convolve.
    pub fn layer_lengths(&self, samples: usize) -> Option<Vec<usize>> {
        let mut t = samples;
        let mut out = Vec::with_capacity(self.conv_kernels.len());
        for ((k, s), p) in self.layers() {
            if t + 2 * p < k {
                return None;
            }
            t = (t + 2 * p - k) / s + 1;
            out.push(t);
        }
        Some(out)
    }

    /// Frames produced from `samples` inputs, or `None` below the receptive field.
    pub fn frames_for(&self, samples: usize) -> Option<usize> {
        self.layer_lengths(samples).and_then(|l| l.last().copied())
    }
}

/// Fully connected layer `x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = params.add(format!("{name}.weight"), Tensor::uniform(&[fan_in, fan_out], bound, rng));
        let bias = bias.then(|| params.add(format!("{name}.bias"), Tensor::uniform(&[fan_out], bound, rng)));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamSet, x: Var) -> Result<Var> {
        let w = g.param(params, self.weight);
        let mut y = g.matmul(x, w)?;
        if let Some(b) = self.bias {
            let b = g.param(params, b);
            y = g.add(y, b)?;
        }
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(params: &mut ParamSet, name: &str, dim: usize) -> Self {
        Self {
            gamma: params.add(format!("{name}.gamma"), Tensor::new(vec![dim], vec![1.0; dim]).expect("shape")),
            beta: params.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamSet, x: Var) -> Result<Var> {
        let gamma = g.param(params, self.gamma);
        let beta = g.param(params, self.beta);
        Ok(g.layer_norm(x, gamma, beta, LN_EPS)?)
    }
}

/// 1-D convolution weights `[C_out, C_in / groups, K]`.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = c_in / groups * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = params.add(
            format!("{name}.weight"),
            Tensor::uniform(&[c_out, c_in / groups, kernel], bound, rng),
        );
        let bias = bias.then(|| params.add(format!("{name}.bias"), Tensor::uniform(&[c_out], bound, rng)));
        Self {
            weight,
            bias,
            stride,
            padding,
            groups,
        }
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamSet, x: Var) -> Result<Var> {
        let w = g.param(params, self.weight);
        let b = self.bias.map(|b| g.param(params, b));
        Ok(g.conv1d(x, w, b, self.stride, self.padding, self.groups)?)
    }
}

#[derive(Clone, Debug)]
struct Block {
    attn_norm: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    ffn_norm: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
}

/// Layer outputs `C^0..C^L`, each `[batch, m, d]`. `C^0` is the transformer
/// input (projected features plus positional embedding).
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub layers: Vec<Var>,
    /// True (unpadded) frame count per batch item.
    pub frames: Vec<usize>,
    pub batch: usize,
    pub m: usize,
    pub d: usize,
}

impl EncoderOutput {
    pub fn tap(&self, n: usize) -> Result<Var> {
        self.layers.get(n).copied().ok_or(EncoderError::TapOutOfRange {
            n,
            layers: self.layers.len() - 1,
        })
    }

    pub fn last(&self) -> Var {
        *self.layers.last().expect("at least C^0")
    }

    /// `true` for frames derived from padding, row-major `[batch, m]`.
    pub fn pad_mask(&self) -> Vec<bool> {
        let mut mask = Vec::with_capacity(self.batch * self.m);
        for &f in &self.frames {
            mask.extend((0..self.m).map(|t| t >= f));
        }
        mask
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    fe: Vec<Conv>,
    fe_norm: LayerNorm,
    proj: Linear,
    mask_emb: ParamId,
    pos_conv: Conv,
    blocks: Vec<Block>,
}

impl Encoder {
    /// Registers every base-network parameter in `params` under
    /// [`BASE_PREFIX`].
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, params: &mut ParamSet, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut fe = Vec::new();
        let mut c_in = 1;
        for (i, (&c, ((k, s), p))) in config.conv_channels.iter().zip(config.layers()).enumerate() {
            fe.push(Conv::new(params, &format!("{FEATURE_EXTRACTOR_PREFIX}conv{i}"), c_in, c, k, s, p, 1, false, rng));
            c_in = c;
        }
        let fe_norm = LayerNorm::new(params, "encoder.feature_norm", c_in);
        let proj = Linear::new(params, "encoder.proj", c_in, d, true, rng);
        let mask_emb = params.add("encoder.mask_emb", Tensor::uniform(&[d], 1.0, rng));
        let pos_conv = Conv::new(
            params,
            "encoder.pos_conv",
            d,
            d,
            config.pos_conv_kernel,
            1,
            config.pos_conv_kernel / 2,
            config.pos_conv_groups,
            true,
            rng,
        );
        let blocks = (0..config.n_layers)
            .map(|l| {
                let p = format!("encoder.layer{l}");
                Block {
                    attn_norm: LayerNorm::new(params, &format!("{p}.attn_norm"), d),
                    q: Linear::new(params, &format!("{p}.q"), d, d, true, rng),
                    k: Linear::new(params, &format!("{p}.k"), d, d, false, rng),
                    v: Linear::new(params, &format!("{p}.v"), d, d, true, rng),
                    out: Linear::new(params, &format!("{p}.out"), d, d, true, rng),
                    ffn_norm: LayerNorm::new(params, &format!("{p}.ffn_norm"), d),
                    ffn_in: Linear::new(params, &format!("{p}.ffn_in"), d, config.ffn_dim, true, rng),
                    ffn_out: Linear::new(params, &format!("{p}.ffn_out"), config.ffn_dim, d, true, rng),
                }
            })
            .collect();
        Ok(Self {
            config,
            fe,
            fe_norm,
            proj,
            mask_emb,
            pos_conv,
            blocks,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.blocks.len()
    }

    /// Conv feature extraction: `[B, T]` audio to `[B, m, C]` frames plus
    /// the true frame count of each item. Each layer's output is zeroed past
    /// the item's own length, so padding never leaks into real frames.
    pub fn feature_extract(&self, g: &mut Graph, params: &ParamSet, audio: &PaddedAudio) -> Result<(Var, Vec<usize>)> {
        let rf = self.config.receptive_field();
        let lengths = audio
            .lengths
            .iter()
            .map(|&len| {
                self.config
                    .layer_lengths(len)
                    .ok_or(EncoderError::TooShort { samples: len, receptive_field: rf })
            })
            .collect::<Result<Vec<_>>>()?;
        let b = audio.batch_size();
        let padded = audio.lengths.iter().any(|&l| l < audio.width);
        let mut h = g.constant_from(&[b, 1, audio.width], audio.samples.clone())?;
        for (i, conv) in self.fe.iter().enumerate() {
            h = conv.forward(g, params, h)?;
            h = g.gelu(h);
            if padded {
                let per_item: Vec<usize> = lengths.iter().map(|l| l[i]).collect();
                h = g.mask_lengths(h, 2, &per_item)?;
            }
        }
        let h = g.transpose(h)?;
        let frames = lengths.iter().map(|l| *l.last().expect("nonempty stack")).collect();
        Ok((h, frames))
    }

    /// Replaces sampled time spans with the learned mask embedding and zeroes
    /// sampled feature spans. Only the first `frames[b]` frames of item `b`
    /// are eligible. Identity when `rng` is `None` (evaluation).
    pub fn apply_masking<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        x: Var,
        frames: &[usize],
        rng: Option<&mut R>,
    ) -> Result<Var> {
        let cfg = &self.config.mask;
        let Some(rng) = rng else { return Ok(x) };
        if cfg.time_prob <= 0.0 && cfg.feature_prob <= 0.0 {
            return Ok(x);
        }
        let shape = g.shape(x).to_vec();
        let (b, m, d) = (shape[0], shape[1], shape[2]);
        let mut time = vec![0.0; b * m * d];
        let mut keep = vec![1.0; b * m * d];
        let mut any_time = false;
        for (item, &f) in frames.iter().enumerate() {
            if cfg.time_prob > 0.0 {
                if cfg.time_span >= f || cfg.time_span == 0 {
                    return Err(EncoderError::MaskSpan { axis: "time", span: cfg.time_span, len: f });
                }
                let mut masked = vec![false; f];
                for t in 0..f {
                    if rng.gen::<f64>() < cfg.time_prob {
                        masked[t..(t + cfg.time_span).min(f)].iter_mut().for_each(|v| *v = true);
                    }
                }
                for (t, _) in masked.iter().enumerate().filter(|(_, &v)| v) {
                    any_time = true;
                    let row = (item * m + t) * d;
                    time[row..row + d].iter_mut().for_each(|v| *v = 1.0);
                    keep[row..row + d].iter_mut().for_each(|v| *v = 0.0);
                }
            }
            if cfg.feature_prob > 0.0 {
                if cfg.feature_span >= d || cfg.feature_span == 0 {
                    return Err(EncoderError::MaskSpan { axis: "feature", span: cfg.feature_span, len: d });
                }
                let mut masked = vec![false; d];
                for c in 0..d {
                    if rng.gen::<f64>() < cfg.feature_prob {
                        masked[c..(c + cfg.feature_span).min(d)].iter_mut().for_each(|v| *v = true);
                    }
                }
                for t in 0..m {
                    let row = (item * m + t) * d;
                    for (c, _) in masked.iter().enumerate().filter(|(_, &v)| v) {
                        keep[row + c] = 0.0;
                        time[row + c] = 0.0;
                    }
                }
            }
        }
        let keep = g.constant_from(&shape, keep)?;
        let mut y = g.mul(x, keep)?;
        if any_time {
            let time = g.constant_from(&shape, time)?;
            let emb = g.param(params, self.mask_emb);
            let fill = g.mul(time, emb)?;
            y = g.add(y, fill)?;
        }
        Ok(y)
    }

    /// Runs the full base network. Pass `rng` for training mode (masking,
    /// dropout, LayerDrop); `None` evaluates deterministically.
    pub fn encode<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        audio: &PaddedAudio,
        mut rng: Option<&mut R>,
    ) -> Result<EncoderOutput> {
        let (z, frames) = self.feature_extract(g, params, audio)?;
        let b = audio.batch_size();
        let m = g.shape(z)[1];
        let d = self.config.d_model;
        let z = self.fe_norm.forward(g, params, z)?;
        let x = self.proj.forward(g, params, z)?;
        let x = self.apply_masking(g, params, x, &frames, rng.as_deref_mut())?;

        let padded = frames.iter().any(|&f| f < m);
        let zero_pad = |g: &mut Graph, v: Var| -> Result<Var> {
            Ok(if padded { g.mask_lengths(v, 1, &frames)? } else { v })
        };

        let x = zero_pad(g, x)?;
        let xt = g.transpose(x)?;
        let pos = self.pos_conv.forward(g, params, xt)?;
        let pos = g.gelu(pos);
        let pos = g.transpose(pos)?;
        let mut h = g.add(x, pos)?;
        h = zero_pad(g, h)?;

        let key_mask = if padded {
            let heads = self.config.n_heads;
            let mut mask = vec![0.0; b * heads * m * m];
            for (item, &f) in frames.iter().enumerate() {
                for hd in 0..heads {
                    for q in 0..m {
                        let row = ((item * heads + hd) * m + q) * m;
                        mask[row + f..row + m].iter_mut().for_each(|v| *v = f64::NEG_INFINITY);
                    }
                }
            }
            Some(g.constant_from(&[b * heads, m, m], mask)?)
        } else {
            None
        };

        let mut layers = vec![h];
        for block in &self.blocks {
            let skip = match rng.as_deref_mut() {
                Some(r) if self.config.layerdrop > 0.0 => r.gen::<f64>() < self.config.layerdrop,
                _ => false,
            };
            if !skip {
                h = self.block_forward(g, params, block, h, key_mask, rng.as_deref_mut())?;
                h = zero_pad(g, h)?;
            }
            layers.push(h);
        }
        Ok(EncoderOutput { layers, frames, batch: b, m, d })
    }

    fn block_forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        block: &Block,
        x: Var,
        key_mask: Option<Var>,
        mut rng: Option<&mut R>,
    ) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let (b, m, d) = (shape[0], shape[1], shape[2]);
        let heads = self.config.n_heads;
        let dh = d / heads;
        let p = self.config.dropout;
        let mut drop = |g: &mut Graph, v: Var| match rng.as_deref_mut() {
            Some(r) if p > 0.0 => g.dropout(v, p, r),
            _ => v,
        };

        let n = block.attn_norm.forward(g, params, x)?;
        let split = |g: &mut Graph, v: Var| -> Result<Var> {
            let v = g.reshape(v, &[b, m, heads, dh])?;
            let v = g.permute(v, &[0, 2, 1, 3])?;
            Ok(g.reshape(v, &[b * heads, m, dh])?)
        };
        let q = block.q.forward(g, params, n)?;
        let q = split(g, q)?;
        let k = block.k.forward(g, params, n)?;
        let k = split(g, k)?;
        let v = block.v.forward(g, params, n)?;
        let v = split(g, v)?;
        let scores = g.matmul_nt(q, k)?;
        let mut scores = g.mul_scalar(scores, 1.0 / (dh as f64).sqrt());
        if let Some(mask) = key_mask {
            scores = g.add(scores, mask)?;
        }
        let attn = g.softmax(scores, 2)?;
        let ctx = g.matmul(attn, v)?;
        let ctx = g.reshape(ctx, &[b, heads, m, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, m, d])?;
        let a = block.out.forward(g, params, ctx)?;
        let a = drop(g, a);
        let h = g.add(x, a)?;

        let n = block.ffn_norm.forward(g, params, h)?;
        let f = block.ffn_in.forward(g, params, n)?;
        let f = g.gelu(f);
        let f = drop(g, f);
        let f = block.ffn_out.forward(g, params, f)?;
        let f = drop(g, f);
        Ok(g.add(h, f)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, FdOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(d: usize) -> EncoderConfig {
        EncoderConfig {
            conv_channels: vec![8; 4],
            d_model: d,
            n_layers: 2,
            n_heads: 2,
            ffn_dim: 2 * d,
            dropout: 0.0,
            layerdrop: 0.0,
            mask: MaskConfig {
                time_prob: 0.0,
                feature_prob: 0.0,
                ..MaskConfig::default()
            },
            pos_conv_kernel: 5,
            pos_conv_groups: 2,
            ..EncoderConfig::default()
        }
    }

    fn audio(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen_range(-0.5..0.5)).collect()
    }

    #[test]
    fn conv_arithmetic() {
        let c = EncoderConfig::default();
        assert_eq!(c.total_stride(), 320);
        assert_eq!(c.frames_for(32_000), Some(100));
        assert_eq!(c.frames_for(160_000), Some(500));
        assert_eq!(c.frames_for(48_000), Some(150));
        let rf = c.receptive_field();
        assert_eq!(rf, 319);
        assert_eq!(c.frames_for(rf), Some(1));
        assert_eq!(c.frames_for(rf - 1), None);
        let unpadded = EncoderConfig {
            conv_paddings: vec![0; 4],
            ..EncoderConfig::default()
        };
        assert_eq!(unpadded.receptive_field(), 345);
        assert_eq!(unpadded.frames_for(345), Some(1));
        assert_eq!(unpadded.frames_for(344), None);
    }

    #[test]
    fn shapes_and_taps() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ParamSet::new();
        let enc = Encoder::new(toy(16), &mut params, &mut rng).unwrap();
        let x = audio(32_000, 1);
        let mut g = Graph::new();
        let out = enc.encode(&mut g, &params, &PaddedAudio::from_slices(&[&x]), None::<&mut ChaCha8Rng>).unwrap();
        assert_eq!(out.layers.len(), 3);
        for &l in &out.layers {
            assert_eq!(g.shape(l), &[1, 100, 16]);
        }
        assert_eq!(out.tap(2).unwrap(), out.last());
        assert!(matches!(out.tap(3), Err(EncoderError::TapOutOfRange { .. })));
        assert_ne!(g.value(out.layers[1]), g.value(out.layers[2]));
        let e = enc.encode(&mut g, &params, &PaddedAudio::from_slices(&[&x[..300]]), None::<&mut ChaCha8Rng>).unwrap_err();
        assert!(matches!(e, EncoderError::TooShort { samples: 300, receptive_field: 319 }));
    }

    #[test]
    fn silence_is_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ParamSet::new();
        let enc = Encoder::new(toy(16), &mut params, &mut rng).unwrap();
        let mut g = Graph::new();
        let zeros = vec![0.0; 16_000];
        let out = enc.encode(&mut g, &params, &PaddedAudio::from_slices(&[&zeros]), None::<&mut ChaCha8Rng>).unwrap();
        assert!(g.value(out.last()).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn padding_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = ParamSet::new();
        let enc = Encoder::new(toy(16), &mut params, &mut rng).unwrap();
        let x = audio(32_000, 3);
        let other = audio(48_000, 4);
        let mut g = Graph::new();
        let alone = enc.encode(&mut g, &params, &PaddedAudio::from_slices(&[&x]), None::<&mut ChaCha8Rng>).unwrap();
        let batched = enc
            .encode(&mut g, &params, &PaddedAudio::from_slices(&[&x, &other]), None::<&mut ChaCha8Rng>)
            .unwrap();
        assert_eq!(batched.frames, vec![100, 150]);
        assert_eq!(batched.pad_mask()[99..101], [false, true]);
        for (a, b) in alone.layers.iter().zip(&batched.layers) {
            let (a, b) = (g.value(*a), g.value(*b));
            for (u, v) in a.iter().zip(&b[..a.len()]) {
                assert!((u - v).abs() < 1e-9, "{u} vs {v}");
            }
        }
    }

    #[test]
    fn eval_mode_is_deterministic_and_unmasked() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = ParamSet::new();
        let mut cfg = toy(16);
        cfg.mask = MaskConfig::default();
        cfg.dropout = 0.1;
        cfg.layerdrop = 0.5;
        let enc = Encoder::new(cfg, &mut params, &mut rng).unwrap();
        let x = audio(8_000, 6);
        let a = PaddedAudio::from_slices(&[&x]);
        let mut g = Graph::new();
        let o1 = enc.encode(&mut g, &params, &a, None::<&mut ChaCha8Rng>).unwrap();
        let o2 = enc.encode(&mut g, &params, &a, None::<&mut ChaCha8Rng>).unwrap();
        assert_eq!(g.value(o1.last()), g.value(o2.last()));
        let t = enc.encode(&mut g, &params, &a, Some(&mut rng)).unwrap();
        assert_ne!(g.value(o1.last()), g.value(t.last()));
    }

    #[test]
    fn masking_saturates_and_idles() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut params = ParamSet::new();
        let mut cfg = toy(8);
        cfg.mask = MaskConfig {
            time_prob: 1.0,
            time_span: 1,
            feature_prob: 0.0,
            feature_span: 1,
        };
        let enc = Encoder::new(cfg, &mut params, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::uniform(&[2, 5, 8], 1.0, &mut rng));
        let y = enc.apply_masking(&mut g, &params, x, &[5, 5], Some(&mut rng)).unwrap();
        let emb = params.get(params.find("encoder.mask_emb").unwrap()).data().to_vec();
        for row in g.value(y).chunks(8) {
            assert_eq!(row, emb.as_slice());
        }
        let y = enc.apply_masking(&mut g, &params, x, &[5, 5], None::<&mut ChaCha8Rng>).unwrap();
        assert_eq!(y, x);

        let mut idle = enc.clone();
        idle.config.mask.time_prob = 0.0;
        let y = idle.apply_masking(&mut g, &params, x, &[5, 5], Some(&mut rng)).unwrap();
        assert_eq!(y, x);

        let e = enc.apply_masking(&mut g, &params, x, &[5, 1], Some(&mut rng)).unwrap_err();
        assert!(matches!(e, EncoderError::MaskSpan { axis: "time", .. }));
    }

    #[test]
    fn full_layerdrop_skips_every_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut params = ParamSet::new();
        let mut cfg = toy(16);
        cfg.layerdrop = 1.0;
        let enc = Encoder::new(cfg, &mut params, &mut rng).unwrap();
        let x = audio(4_000, 9);
        let mut g = Graph::new();
        let out = enc.encode(&mut g, &params, &PaddedAudio::from_slices(&[&x]), Some(&mut rng)).unwrap();
        assert_eq!(g.value(out.layers[0]), g.value(out.last()));
    }

    #[test]
    fn gradients_through_encoder() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut params = ParamSet::new();
        let enc = Encoder::new(toy(8), &mut params, &mut rng).unwrap();
        for id in params.ids().collect::<Vec<_>>() {
            let trainable = !params.name(id).starts_with(FEATURE_EXTRACTOR_PREFIX);
            params.get_mut(id).set_requires_grad(trainable);
        }
        let a = audio(2_000, 13);
        let b = audio(1_400, 14);
        let batch = PaddedAudio::from_slices(&[&a, &b]);
        let readout = Tensor::uniform(&[2, 6, 8], 1.0, &mut rng);
        let opts = FdOptions {
            max_coords_per_tensor: Some(6),
            ..FdOptions::default()
        };
        let err = finite_diff_check(&mut params, &opts, |p, g| {
            let out = enc.encode(g, p, &batch, None::<&mut ChaCha8Rng>).map_err(|e| match e {
                EncoderError::Tensor(t) => t,
                other => panic!("{other}"),
            })?;
            let r = g.constant(readout.clone());
            let y = g.mul(out.last(), r)?;
            Ok(g.sum_all(y))
        })
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }
}
