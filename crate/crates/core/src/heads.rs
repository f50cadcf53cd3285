//! Task heads on top of the shared encoder: the CTC speech head, the three
//! speaker-embedding strategies and the cosine speaker classifier. [`Model`]
//! bundles them with the encoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::PaddedAudio;
use crate::encoder::{Conv, Encoder, EncoderConfig, EncoderError, EncoderOutput, Linear};
use crate::tensor::{Graph, ParamId, ParamSet, Tensor, TensorError, Var};

pub const SPEECH_PREFIX: &str = "speech_head.";
pub const SPEAKER_PREFIX: &str = "speaker_head.";

const STD_EPS: f64 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum HeadError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("item {item} has no unpadded frames to pool")]
    AllPadding { item: usize },
    #[error("{pooling:?} pooling needs at least {need} frames, item {item} has {got}")]
    TooFewFrames {
        pooling: Pooling,
        item: usize,
        need: usize,
        got: usize,
    },
    #[error("speaker embedding of item {item} has zero norm")]
    ZeroNorm { item: usize },
    #[error("invalid head configuration: {0}")]
    Config(String),
    #[error("parameters do not match the model layout: {0}")]
    Layout(String),
}

pub type Result<T> = std::result::Result<T, HeadError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    First,
    Ecapa,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EcapaConfig {
    pub channels: usize,
    pub kernel: usize,
    pub layers: usize,
    /// Hidden size of the frame-attention scorer.
    pub attention_dim: usize,
    /// Embedding size; `None` means the encoder width.
    pub embedding_dim: Option<usize>,
}

impl Default for EcapaConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            kernel: 3,
            layers: 2,
            attention_dim: 32,
            embedding_dim: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub speaker_pooling: Pooling,
    /// Encoder layer feeding the speaker head; `None` means the last one.
    pub speaker_tap_layer: Option<usize>,
    pub ecapa: EcapaConfig,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            speaker_pooling: Pooling::Mean,
            speaker_tap_layer: None,
            ecapa: EcapaConfig::default(),
        }
    }
}

impl HeadConfig {
    pub fn tap_layer(&self, n_layers: usize) -> usize {
        self.speaker_tap_layer.unwrap_or(n_layers)
    }
}

/// Mean over each item's unpadded frames: `[B, m, d]` to `[B, d]`.
pub fn pool_mean(g: &mut Graph, x: Var, frames: &[usize]) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let (b, m, d) = (shape[0], shape[1], shape[2]);
    let mut w = vec![0.0; b * m];
    for (item, &f) in frames.iter().enumerate() {
        if f == 0 {
            return Err(HeadError::AllPadding { item });
        }
        w[item * m..item * m + f].iter_mut().for_each(|v| *v = 1.0 / f as f64);
    }
    let w = g.constant_from(&[b, 1, m], w)?;
    let pooled = g.matmul(w, x)?;
    Ok(g.reshape(pooled, &[b, d])?)
}

/// The first output frame of every item: `[B, m, d]` to `[B, d]`.
pub fn pool_first(g: &mut Graph, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape[1] == 0 {
        return Err(HeadError::TooFewFrames {
            pooling: Pooling::First,
            item: 0,
            need: 1,
            got: 0,
        });
    }
    let first = g.slice(x, 1, 0, 1)?;
    Ok(g.reshape(first, &[shape[0], shape[2]])?)
}

/// Attention-weighted mean and standard deviation over frames.
///
/// `h` is `[B, m, C]` and `scores` `[B, m]` holds unnormalized attention
/// logits; frames past `frames[b]` get zero weight. Returns `[B, 2C]`
/// (mean then std).
pub fn attentive_stats(g: &mut Graph, h: Var, scores: Var, frames: &[usize]) -> Result<Var> {
    let shape = g.shape(h).to_vec();
    let (b, m, c) = (shape[0], shape[1], shape[2]);
    let mut mask = vec![0.0; b * m];
    for (item, &f) in frames.iter().enumerate() {
        if f == 0 {
            return Err(HeadError::AllPadding { item });
        }
        mask[item * m + f..(item + 1) * m].iter_mut().for_each(|v| *v = f64::NEG_INFINITY);
    }
    let mask = g.constant_from(&[b, m], mask)?;
    let scores = g.add(scores, mask)?;
    let alpha = g.softmax(scores, 1)?;
    let alpha = g.reshape(alpha, &[b, 1, m])?;
    let mean = g.matmul(alpha, h)?;
    let ones = g.constant_from(&[b, m, 1], vec![1.0; b * m])?;
    let spread = g.matmul(ones, mean)?;
    let centered = g.sub(h, spread)?;
    let sq = g.mul(centered, centered)?;
    let var = g.matmul(alpha, sq)?;
    let var = g.add_scalar(var, STD_EPS);
    let std = g.powf(var, 0.5)?;
    let std = g.add_scalar(std, -STD_EPS.sqrt());
    let stats = g.concat(&[mean, std], 2)?;
    Ok(g.reshape(stats, &[b, 2 * c])?)
}

#[derive(Clone, Debug)]
pub struct SpeechHead {
    pub out: Linear,
}

impl SpeechHead {
    /// Per-frame log-probabilities `[B, m, |V|]` from the final layer.
    pub fn forward(&self, g: &mut Graph, params: &ParamSet, last: Var) -> Result<Var> {
        let logits = self.out.forward(g, params, last)?;
        Ok(g.log_softmax(logits, 2)?)
    }
}

#[derive(Clone, Debug)]
struct Ecapa {
    convs: Vec<Conv>,
    att_hidden: Linear,
    att_out: Linear,
    out: Linear,
}

#[derive(Clone, Debug)]
pub struct SpeakerHead {
    pub pooling: Pooling,
    pub tap: usize,
    ecapa: Option<Ecapa>,
    /// Class weight rows `[n_speakers, e]`.
    pub classes: ParamId,
    pub embedding_dim: usize,
}

impl SpeakerHead {
    /// Speaker embeddings `[B, e]` (before normalization) from the tapped
    /// layer of `out`.
    pub fn embed(&self, g: &mut Graph, params: &ParamSet, out: &EncoderOutput) -> Result<Var> {
        let x = out.tap(self.tap)?;
        self.pool(g, params, x, &out.frames)
    }

    pub fn pool(&self, g: &mut Graph, params: &ParamSet, x: Var, frames: &[usize]) -> Result<Var> {
        match self.pooling {
            Pooling::Mean => pool_mean(g, x, frames),
            Pooling::First => pool_first(g, x),
            Pooling::Ecapa => {
                let e = self.ecapa.as_ref().expect("ecapa head built for ecapa pooling");
                for (item, &f) in frames.iter().enumerate() {
                    if f < 2 {
                        return Err(HeadError::TooFewFrames {
                            pooling: Pooling::Ecapa,
                            item,
                            need: 2,
                            got: f,
                        });
                    }
                }
                let padded = frames.iter().any(|&f| f < g.shape(x)[1]);
                let mut h = g.transpose(x)?;
                for conv in &e.convs {
                    h = conv.forward(g, params, h)?;
                    h = g.gelu(h);
                    if padded {
                        h = g.mask_lengths(h, 2, frames)?;
                    }
                }
                let h = g.transpose(h)?;
                let a = e.att_hidden.forward(g, params, h)?;
                let a = g.tanh(a);
                let a = e.att_out.forward(g, params, a)?;
                let shape = g.shape(a).to_vec();
                let scores = g.reshape(a, &shape[..2])?;
                let stats = attentive_stats(g, h, scores, frames)?;
                e.out.forward(g, params, stats)
                    .map_err(HeadError::from)
            }
        }
    }

    /// Cosine logits `[B, n_speakers]` between embeddings and class rows.
    pub fn classify(&self, g: &mut Graph, params: &ParamSet, emb: Var) -> Result<Var> {
        let d = g.shape(emb)[1];
        for (item, row) in g.value(emb).chunks(d).enumerate() {
            if row.iter().all(|&v| v == 0.0) {
                return Err(HeadError::ZeroNorm { item });
            }
        }
        let e = g.l2_normalize(emb)?;
        let w = g.param(params, self.classes);
        let w = g.l2_normalize(w)?;
        Ok(g.matmul_nt(e, w)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub heads: HeadConfig,
}


/// Encoder plus both heads, with handles into one [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub speech: SpeechHead,
    pub speaker: SpeakerHead,
    pub vocab_size: usize,
    pub n_speakers: usize,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(
        config: ModelConfig,
        vocab_size: usize,
        n_speakers: usize,
        params: &mut ParamSet,
        rng: &mut R,
    ) -> Result<Self> {
        let encoder = Encoder::new(config.encoder.clone(), params, rng)?;
        let d = config.encoder.d_model;
        let layers = encoder.n_layers();
        let tap = config.heads.tap_layer(layers);
        if tap > layers {
            return Err(HeadError::Config(format!("speaker_tap_layer {tap} exceeds {layers} encoder layers")));
        }
        if vocab_size < 2 || n_speakers == 0 {
            return Err(HeadError::Config(format!(
                "need a vocabulary beyond blank and at least one speaker (got {vocab_size}, {n_speakers})"
            )));
        }
        let speech = SpeechHead {
            out: Linear::new(params, "speech_head.out", d, vocab_size, true, rng),
        };
        let ec = &config.heads.ecapa;
        let (ecapa, embedding_dim) = match config.heads.speaker_pooling {
            Pooling::Mean | Pooling::First => (None, d),
            Pooling::Ecapa => {
                if ec.layers == 0 || ec.channels == 0 || ec.kernel.is_multiple_of(2) || ec.attention_dim == 0 {
                    return Err(HeadError::Config(
                        "ecapa needs layers, channels and attention_dim > 0 and an odd kernel".into(),
                    ));
                }
                let e = ec.embedding_dim.unwrap_or(d);
                let mut convs = Vec::new();
                let mut c_in = d;
                for i in 0..ec.layers {
                    convs.push(Conv::new(
                        params,
                        &format!("speaker_head.ecapa.conv{i}"),
                        c_in,
                        ec.channels,
                        ec.kernel,
                        1,
                        ec.kernel / 2,
                        1,
                        true,
                        rng,
                    ));
                    c_in = ec.channels;
                }
                let head = Ecapa {
                    convs,
                    att_hidden: Linear::new(params, "speaker_head.ecapa.att_hidden", ec.channels, ec.attention_dim, true, rng),
                    att_out: Linear::new(params, "speaker_head.ecapa.att_out", ec.attention_dim, 1, false, rng),
                    out: Linear::new(params, "speaker_head.ecapa.out", 2 * ec.channels, e, true, rng),
                };
                (Some(head), e)
            }
        };
        let bound = 1.0 / (embedding_dim as f64).sqrt();
        let classes = params.add("speaker_head.classes", Tensor::uniform(&[n_speakers, embedding_dim], bound, rng));
        let speaker = SpeakerHead {
            pooling: config.heads.speaker_pooling,
            tap,
            ecapa,
            classes,
            embedding_dim,
        };
        Ok(Self {
            config,
            encoder,
            speech,
            speaker,
            vocab_size,
            n_speakers,
        })
    }

    /// Rebuilds handles for parameters created by [`Model::new`] with the
    /// same arguments, e.g. restored from a checkpoint. Names and shapes must
    /// match in registration order.
    pub fn attach(config: ModelConfig, vocab_size: usize, n_speakers: usize, params: &ParamSet) -> Result<Self> {
        let mut probe = ParamSet::new();
        let model = Self::new(config, vocab_size, n_speakers, &mut probe, &mut rand::rngs::mock::StepRng::new(0, 0))?;
        if probe.len() != params.len() {
            return Err(HeadError::Layout(format!("expected {} tensors, found {}", probe.len(), params.len())));
        }
        for id in probe.ids() {
            let (want, got) = (probe.get(id), params.get(id));
            if probe.name(id) != params.name(id) || want.shape() != got.shape() {
                return Err(HeadError::Layout(format!(
                    "tensor {} is {} {:?}, expected {} {:?}",
                    id.0,
                    params.name(id),
                    got.shape(),
                    probe.name(id),
                    want.shape()
                )));
            }
        }
        Ok(model)
    }

    pub fn encode<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        audio: &PaddedAudio,
        rng: Option<&mut R>,
    ) -> Result<EncoderOutput> {
        Ok(self.encoder.encode(g, params, audio, rng)?)
    }

    pub fn speech_log_probs(&self, g: &mut Graph, params: &ParamSet, out: &EncoderOutput) -> Result<Var> {
        self.speech.forward(g, params, out.last())
    }
}
