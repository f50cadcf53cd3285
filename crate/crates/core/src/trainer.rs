//! Training loops for the single-task and multi-task modes, validation,
//! early stopping, model selection and checkpoints.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    crop_samples, generate_trials, CorpusConfig, CorpusError, CorpusManifest, CropMode, SpeakerBatch,
    SpeakerBatchStream, SpeakerIndex, SpeechBatch, SpeechBatchStream, StreamState, TrialList, Utterance,
    Vocabulary, CONFIG_FILE, TRAIN_FILE, VAL_FILE,
};
use crate::encoder::{EncoderConfig, EncoderOutput};
use crate::eval::{self, greedy_decode, EvalError};
use crate::heads::{HeadConfig, HeadError, Model, ModelConfig};
use crate::losses::{aam_softmax_loss, combine, ctc_loss, LossConfig, LossError, LossReport, LossWeights, AAM_MARGIN, AAM_SCALE};
use crate::optim::{
    adam_step, apply_trainable, freeze_mask, lr_at, partition, AdamConfig, AdamState, ClipPlacement, OptimError,
    ParamGroup, ScheduleConfig, Trainable,
};
use crate::tensor::{Graph, ParamSet, Tensor, TensorError, Var};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_JSON: &str = "manifest.json";
pub const PARAMS_BIN: &str = "params.bin";
pub const METRICS_CSV: &str = "metrics.csv";
pub const RESOLVED_CONFIG: &str = "config.json";
/// Optional trial list inside a corpus directory used for validation.
pub const VAL_TRIALS_FILE: &str = "val_trials.txt";

const STEP_SALT: u64 = 0x5354_4550;
const INIT_SALT: u64 = 0x494e_4954;
const TRIAL_SALT: u64 = 0x5452_4941;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Eval(#[from] Box<EvalError>),
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("{task} loss is not finite at step {step}")]
    NonFinite { task: &'static str, step: u64 },
    #[error("utterance {0} has no speaker label")]
    MissingLabel(String),
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("checkpoint format version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint tensor {name} has shape {found:?}, model expects {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint layout: {0}")]
    Layout(String),
    #[error("parameter file holds {found} bytes, expected {expected}")]
    Truncated { expected: usize, found: usize },
    #[error("{path}: {detail}")]
    Manifest { path: PathBuf, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("writing CSV: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

impl From<EvalError> for TrainError {
    fn from(e: EvalError) -> Self {
        TrainError::Eval(Box::new(e))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    StlAsr,
    StlSkr,
    MtlJoint,
    MtlDisjoint,
}

impl Mode {
    pub fn uses_speech(self) -> bool {
        self != Mode::StlSkr
    }

    pub fn uses_speaker(self) -> bool {
        self != Mode::StlAsr
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Random crop length of speaker batches; shorter utterances are used whole.
    pub crop_len_s: f64,
    /// Crop used for speaker validation (first seconds); `None` means `crop_len_s`.
    pub val_crop_len_s: Option<f64>,
    /// Upper bound on `items × longest utterance` for speech batches.
    pub speech_batch_samples: usize,
    pub bucketing: bool,
    pub speaker_batch_items: usize,
    pub schedule: ScheduleConfig,
    pub adam: AdamConfig,
    pub clip: f64,
    pub clip_placement: ClipPlacement,
    pub freeze_base_until: u64,
    pub validate_every: u64,
    pub early_stop_patience: u64,
    pub total_steps: u64,
    /// Trial counts drawn from the validation split when the corpus has no
    /// validation trial list.
    pub val_positive_trials: usize,
    pub val_negative_trials: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::MtlDisjoint,
            crop_len_s: 10.0,
            val_crop_len_s: None,
            speech_batch_samples: 3_200_000,
            bucketing: true,
            speaker_batch_items: 32,
            schedule: ScheduleConfig::default(),
            adam: AdamConfig::default(),
            clip: 1.0,
            clip_placement: ClipPlacement::BeforeSum,
            freeze_base_until: 3000,
            validate_every: 5000,
            early_stop_patience: 40_000,
            total_steps: 200_000,
            val_positive_trials: 100,
            val_negative_trials: 100,
            seed: 0,
        }
    }
}

/// Everything a training run needs besides data.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub heads: HeadConfig,
    pub losses: LossConfig,
    pub trainer: TrainConfig,
}

impl RunConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            heads: self.heads.clone(),
        }
    }

    /// Every problem found, each prefixed with the offending key.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Err(e) = self.encoder.validate() {
            out.push(format!("encoder: {e}"));
        }
        let tap = self.heads.tap_layer(self.encoder.n_layers);
        if tap > self.encoder.n_layers {
            out.push(format!(
                "heads.speaker_tap_layer: {tap} exceeds encoder.n_layers {}",
                self.encoder.n_layers
            ));
        }
        if let Err(e) = self.losses.weights() {
            out.push(format!("losses.lambda_s / losses.lambda_k: {e}"));
        }
        let t = &self.trainer;
        if !(t.crop_len_s > 0.0) {
            out.push(format!("trainer.crop_len_s: {} must be positive", t.crop_len_s));
        }
        if let Some(v) = t.val_crop_len_s {
            if !(v > 0.0) {
                out.push(format!("trainer.val_crop_len_s: {v} must be positive"));
            }
        }
        for (key, v) in [
            ("trainer.speech_batch_samples", t.speech_batch_samples as u64),
            ("trainer.speaker_batch_items", t.speaker_batch_items as u64),
            ("trainer.validate_every", t.validate_every),
        ] {
            if v == 0 {
                out.push(format!("{key}: must be positive"));
            }
        }
        if !(t.clip > 0.0) {
            out.push(format!("trainer.clip: {} must be positive", t.clip));
        }
        if let Err(e) = t.schedule.validate() {
            out.push(format!("trainer.schedule: {e}"));
        }
        for (key, b) in [("trainer.adam.beta1", t.adam.beta1), ("trainer.adam.beta2", t.adam.beta2)] {
            if !(0.0..1.0).contains(&b) {
                out.push(format!("{key}: {b} must lie in [0, 1)"));
            }
        }
        if !(t.adam.eps > 0.0) {
            out.push(format!("trainer.adam.eps: {} must be positive", t.adam.eps));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(TrainError::Config(p))
        }
    }

    /// The weights actually applied: single-task modes put all weight on
    /// their task whatever `losses` says.
    pub fn effective_weights(&self) -> Result<LossWeights> {
        Ok(match self.trainer.mode {
            Mode::StlAsr => LossWeights::new(1.0, 0.0)?,
            Mode::StlSkr => LossWeights::new(0.0, 1.0)?,
            Mode::MtlJoint | Mode::MtlDisjoint => self.losses.weights()?,
        })
    }
}

/// Training and validation data in memory.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub train: Vec<Utterance>,
    pub val: Vec<Utterance>,
    pub val_trials: TrialList,
    pub vocab: Vocabulary,
    pub speakers: SpeakerIndex,
}

impl TrainData {
    /// Reads a corpus directory written by `generate_corpus`. Validation
    /// trials come from `val_trials.txt` when present and are drawn from the
    /// validation split otherwise (only for modes with a speaker task).
    pub fn load(corpus_dir: &Path, config: &RunConfig) -> Result<Self> {
        let cp = corpus_dir.join(CONFIG_FILE);
        let text = fs::read(&cp).map_err(io_err(&cp))?;
        let corpus: CorpusConfig = serde_json::from_slice(&text).map_err(|e| TrainError::Manifest {
            path: cp.clone(),
            detail: e.to_string(),
        })?;
        let vocab = corpus.validate()?;
        let train_m = CorpusManifest::read(&corpus_dir.join(TRAIN_FILE))?;
        let val_m = CorpusManifest::read(&corpus_dir.join(VAL_FILE))?;
        let train = train_m.load()?;
        let val = val_m.load()?;
        let tp = corpus_dir.join(VAL_TRIALS_FILE);
        let val_trials = if tp.exists() {
            TrialList::read(&tp)?
        } else if config.trainer.mode.uses_speaker() {
            let mut rng = ChaCha8Rng::seed_from_u64(config.trainer.seed ^ TRIAL_SALT);
            generate_trials(
                &val_m.rows,
                config.trainer.val_positive_trials,
                config.trainer.val_negative_trials,
                &mut rng,
            )?
        } else {
            TrialList::default()
        };
        let speakers = SpeakerIndex::from_utterances(&train);
        Ok(Self {
            train,
            val,
            val_trials,
            vocab,
            speakers,
        })
    }
}

/// Per-step randomness (masking, dropout, LayerDrop). It depends only on
/// the seed and the step index, so resuming needs no generator state.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ STEP_SALT);
    rng.set_stream(step);
    rng
}

/// Per-tensor gradients indexed like the parameter set; `None` where the
/// loss does not reach a tensor.
pub type Grads = Vec<Option<Vec<f64>>>;

/// Weighted sum of task gradients with elementwise clipping applied to each
/// weighted contribution (`BeforeSum`) or to the sum (`AfterSum`). Tasks
/// with weight 0 contribute nothing.
pub fn combine_gradients(
    params: &ParamSet,
    tasks: &[(f64, &Grads)],
    clip: f64,
    placement: ClipPlacement,
) -> Grads {
    params
        .ids()
        .map(|id| {
            let i = id.0;
            let mut sum: Option<Vec<f64>> = None;
            for &(w, grads) in tasks {
                let Some(g) = grads[i].as_ref().filter(|_| w != 0.0) else { continue };
                let mut part: Vec<f64> = g.iter().map(|x| w * x).collect();
                if placement == ClipPlacement::BeforeSum {
                    crate::optim::clip_values(&mut part, clip);
                }
                match &mut sum {
                    Some(s) => s.iter_mut().zip(&part).for_each(|(a, b)| *a += b),
                    None => sum = Some(part),
                }
            }
            if placement == ClipPlacement::AfterSum {
                if let Some(s) = &mut sum {
                    crate::optim::clip_values(s, clip);
                }
            }
            sum
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub report: LossReport,
    pub lr: f64,
    /// Gradient handed to the optimizer for every trainable tensor.
    pub gradient: Grads,
}

/// Metrics of one validation pass. Column names follow the metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub step: u64,
    pub lr: f64,
    #[serde(rename = "L")]
    pub loss: f64,
    #[serde(rename = "L_s")]
    pub speech_loss: Option<f64>,
    #[serde(rename = "L_k")]
    pub speaker_loss: Option<f64>,
    #[serde(rename = "WER_val")]
    pub wer: Option<f64>,
    #[serde(rename = "EER_val")]
    pub eer: Option<f64>,
}

/// `¼·WER + ¾·EER` when both exist, otherwise whichever metric exists.
pub fn selection_score(wer: Option<f64>, eer: Option<f64>) -> Option<f64> {
    match (wer, eer) {
        (Some(w), Some(e)) => Some(0.25 * w + 0.75 * e),
        (Some(w), None) => Some(w),
        (None, Some(e)) => Some(e),
        (None, None) => None,
    }
}

/// Index of the candidate with the lowest selection score, the earliest
/// step winning ties.
pub fn select_model(candidates: &[ValidationRecord]) -> Option<usize> {
    candidates
        .iter()
        .enumerate()
        .filter_map(|(i, c)| selection_score(c.wer, c.eer).map(|s| (i, s, c.step)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.2.cmp(&b.2)))
        .map(|(i, _, _)| i)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub best_val_loss: Option<f64>,
    pub last_improvement_step: u64,
    /// Selection score and step of the best checkpoint so far.
    pub best_selection: Option<(f64, u64)>,
    pub stopped: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Streams {
    pub speech: Option<StreamState>,
    pub speaker: Option<StreamState>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub adam_steps: u64,
}

/// `manifest.json` of a checkpoint. `params.bin` holds every tensor's
/// values, then Adam's first moments, then second moments, as little-endian
/// f64 in tensor order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config: RunConfig,
    pub step: u64,
    pub vocab: String,
    pub speakers: SpeakerIndex,
    pub history: Vec<ValidationRecord>,
    pub progress: Progress,
    pub streams: Streams,
    pub encoder_forwards: u64,
    pub total_elements: usize,
    pub tensors: Vec<TensorEntry>,
}

/// A model restored from a checkpoint for inference.
#[derive(Debug)]
pub struct LoadedModel {
    pub model: Model,
    pub params: ParamSet,
    pub vocab: Vocabulary,
    pub speakers: SpeakerIndex,
    pub config: RunConfig,
    pub step: u64,
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: Model,
    pub params: ParamSet,
    pub adam: AdamState,
    pub step: u64,
    pub data: TrainData,
    pub history: Vec<ValidationRecord>,
    pub progress: Progress,
    /// Encoder forward passes made by training steps.
    pub encoder_forwards: u64,
    weights: LossWeights,
    groups: Vec<ParamGroup>,
    labels: HashMap<String, usize>,
    speech_stream: Option<SpeechBatchStream>,
    speaker_stream: Option<SpeakerBatchStream>,
}

impl Trainer {
    /// Fresh model initialized from the config seed.
    pub fn new(config: RunConfig, data: TrainData) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.trainer.seed ^ INIT_SALT);
        let model = Model::new(config.model(), data.vocab.size(), data.speakers.len(), &mut params, &mut rng)?;
        let adam = AdamState::new(&params);
        Self::assemble(config, data, model, params, adam, 0, Streams::default())
    }

    fn assemble(
        config: RunConfig,
        data: TrainData,
        model: Model,
        params: ParamSet,
        adam: AdamState,
        step: u64,
        streams: Streams,
    ) -> Result<Self> {
        let weights = config.effective_weights()?;
        let groups = partition(&params)?;
        let mode = config.trainer.mode;
        let t = &config.trainer;
        let speech_stream = if mode.uses_speech() {
            Some(SpeechBatchStream::new(
                &data.train,
                t.speech_batch_samples,
                t.bucketing,
                t.seed,
                streams.speech.unwrap_or_default(),
            )?)
        } else {
            None
        };
        let speaker_stream = if mode == Mode::MtlDisjoint || mode == Mode::StlSkr {
            Some(SpeakerBatchStream::new(
                &data.train,
                data.speakers.clone(),
                t.crop_len_s,
                t.speaker_batch_items,
                t.seed,
                streams.speaker.unwrap_or_default(),
            )?)
        } else {
            None
        };
        let labels = data
            .train
            .iter()
            .chain(&data.val)
            .filter_map(|u| data.speakers.index_of(&u.speaker_id).ok().map(|k| (u.id.clone(), k)))
            .collect();
        Ok(Self {
            config,
            model,
            params,
            adam,
            step,
            data,
            history: Vec::new(),
            progress: Progress::default(),
            encoder_forwards: 0,
            weights,
            groups,
            labels,
            speech_stream,
            speaker_stream,
        })
    }

    pub fn weights(&self) -> LossWeights {
        self.weights
    }

    pub fn lr(&self) -> f64 {
        lr_at(self.step as f64, &self.config.trainer.schedule)
    }

    /// Groups updated at the current step.
    pub fn trainable(&self) -> Trainable {
        let mode = self.config.trainer.mode;
        let mut t = freeze_mask(self.step, self.config.trainer.freeze_base_until);
        t.speech &= mode.uses_speech();
        t.speaker &= mode.uses_speaker();
        t
    }

    /// Sets `requires_grad` for the current step. Called by every step
    /// function; call it before the gradient helpers when using them alone.
    pub fn prepare(&mut self) {
        let t = self.trainable();
        apply_trainable(&mut self.params, &self.groups, t);
    }

    fn encode(&mut self, g: &mut Graph, audio: &crate::corpus::PaddedAudio, rng: &mut ChaCha8Rng) -> Result<EncoderOutput> {
        self.encoder_forwards += 1;
        Ok(self.model.encode(g, &self.params, audio, Some(rng))?)
    }

    fn speech_loss(&self, g: &mut Graph, out: &EncoderOutput, targets: &[Vec<usize>]) -> Result<Var> {
        let lp = self.model.speech_log_probs(g, &self.params, out)?;
        Ok(ctc_loss(g, lp, &out.frames, targets)?)
    }

    fn speaker_loss(&self, g: &mut Graph, out: &EncoderOutput, labels: &[usize]) -> Result<Var> {
        let emb = self.model.speaker.embed(g, &self.params, out)?;
        let cos = self.model.speaker.classify(g, &self.params, emb)?;
        Ok(aam_softmax_loss(g, cos, labels, AAM_SCALE, AAM_MARGIN)?)
    }

    fn finite(&self, task: &'static str, v: f64) -> Result<f64> {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(TrainError::NonFinite { task, step: self.step })
        }
    }

    /// Speech loss and its isolated gradient on `batch`.
    pub fn speech_gradients(&mut self, batch: &SpeechBatch, rng: &mut ChaCha8Rng) -> Result<(f64, Grads)> {
        let mut g = Graph::new();
        let out = self.encode(&mut g, &batch.audio, rng)?;
        let loss = self.speech_loss(&mut g, &out, &batch.targets)?;
        let value = self.finite("speech", g.scalar_value(loss))?;
        Ok((value, g.param_gradients(loss, self.params.len())?))
    }

    /// Speaker loss and its isolated gradient on `batch`.
    pub fn speaker_gradients(&mut self, batch: &SpeakerBatch, rng: &mut ChaCha8Rng) -> Result<(f64, Grads)> {
        let mut g = Graph::new();
        let out = self.encode(&mut g, &batch.audio, rng)?;
        let loss = self.speaker_loss(&mut g, &out, &batch.labels)?;
        let value = self.finite("speaker", g.scalar_value(loss))?;
        Ok((value, g.param_gradients(loss, self.params.len())?))
    }

    /// Both losses from one encoder pass over `batch`, with each task's
    /// gradient kept separate.
    pub fn joint_gradients(&mut self, batch: &SpeechBatch, rng: &mut ChaCha8Rng) -> Result<((f64, Grads), (f64, Grads))> {
        let labels = batch
            .ids
            .iter()
            .map(|id| self.labels.get(id).copied().ok_or_else(|| TrainError::MissingLabel(id.clone())))
            .collect::<Result<Vec<_>>>()?;
        let mut g = Graph::new();
        let out = self.encode(&mut g, &batch.audio, rng)?;
        let ls = self.speech_loss(&mut g, &out, &batch.targets)?;
        let lk = self.speaker_loss(&mut g, &out, &labels)?;
        let vs = self.finite("speech", g.scalar_value(ls))?;
        let vk = self.finite("speaker", g.scalar_value(lk))?;
        let n = self.params.len();
        Ok(((vs, g.param_gradients(ls, n)?), (vk, g.param_gradients(lk, n)?)))
    }

    fn apply(&mut self, speech: Option<(f64, Grads)>, speaker: Option<(f64, Grads)>) -> Result<StepOutcome> {
        let w = self.weights;
        let mut tasks = Vec::new();
        if let Some((_, g)) = &speech {
            tasks.push((w.lambda_s, g));
        }
        if let Some((_, g)) = &speaker {
            tasks.push((w.lambda_k, g));
        }
        let t = &self.config.trainer;
        let combined = combine_gradients(&self.params, &tasks, t.clip, t.clip_placement);
        let report = combine(speech.as_ref().map(|s| s.0), speaker.as_ref().map(|s| s.0), w, self.step)?;
        let lr = self.lr();
        for (id, g) in self.params.ids().collect::<Vec<_>>().into_iter().zip(combined) {
            let tensor = self.params.get_mut(id);
            if tensor.requires_grad() {
                let len = tensor.len();
                tensor.set_grad(Some(g.unwrap_or_else(|| vec![0.0; len])));
            }
        }
        adam_step(&mut self.params, &mut self.adam, &self.config.trainer.adam, lr)?;
        let gradient = self.params.ids().map(|id| {
            let t = self.params.get(id);
            if t.requires_grad() {
                t.grad().map(<[f64]>::to_vec)
            } else {
                None
            }
        });
        let gradient = gradient.collect();
        self.step += 1;
        Ok(StepOutcome { report, lr, gradient })
    }

    /// One disjoint iteration: separate forward passes for the speech and the
    /// speaker batch, gradients combined with the loss weights.
    pub fn disjoint_step(&mut self, speech: &SpeechBatch, speaker: &SpeakerBatch) -> Result<StepOutcome> {
        self.prepare();
        let mut rng = step_rng(self.config.trainer.seed, self.step);
        let s = self.speech_gradients(speech, &mut rng)?;
        let k = self.speaker_gradients(speaker, &mut rng)?;
        self.apply(Some(s), Some(k))
    }

    /// One joint iteration: a single forward pass feeds both heads.
    pub fn joint_step(&mut self, batch: &SpeechBatch) -> Result<StepOutcome> {
        self.prepare();
        let mut rng = step_rng(self.config.trainer.seed, self.step);
        let (s, k) = self.joint_gradients(batch, &mut rng)?;
        self.apply(Some(s), Some(k))
    }

    pub fn speech_step(&mut self, batch: &SpeechBatch) -> Result<StepOutcome> {
        self.prepare();
        let mut rng = step_rng(self.config.trainer.seed, self.step);
        let s = self.speech_gradients(batch, &mut rng)?;
        self.apply(Some(s), None)
    }

    pub fn speaker_step(&mut self, batch: &SpeakerBatch) -> Result<StepOutcome> {
        self.prepare();
        let mut rng = step_rng(self.config.trainer.seed, self.step);
        let k = self.speaker_gradients(batch, &mut rng)?;
        self.apply(None, Some(k))
    }

    pub fn next_speech_batch(&mut self) -> Result<SpeechBatch> {
        let stream = self.speech_stream.as_mut().expect("mode has a speech stream");
        Ok(stream.next_batch(&self.data.train, &self.data.vocab)?)
    }

    pub fn next_speaker_batch(&mut self) -> Result<SpeakerBatch> {
        let stream = self.speaker_stream.as_mut().expect("mode has a speaker stream");
        Ok(stream.next_batch(&self.data.train)?)
    }

    /// Draws the batches the mode needs and takes one step.
    pub fn train_step(&mut self) -> Result<StepOutcome> {
        match self.config.trainer.mode {
            Mode::StlAsr => {
                let b = self.next_speech_batch()?;
                self.speech_step(&b)
            }
            Mode::StlSkr => {
                let b = self.next_speaker_batch()?;
                self.speaker_step(&b)
            }
            Mode::MtlJoint => {
                let b = self.next_speech_batch()?;
                self.joint_step(&b)
            }
            Mode::MtlDisjoint => {
                let s = self.next_speech_batch()?;
                let k = self.next_speaker_batch()?;
                self.disjoint_step(&s, &k)
            }
        }
    }

    /// Eval-mode metrics on the validation split: WER and CTC loss on full
    /// utterances, speaker loss and trial EER on the first
    /// `val_crop_len_s` seconds.
    pub fn validate(&self) -> Result<ValidationRecord> {
        let val = &self.data.val;
        if val.is_empty() {
            return Err(TrainError::EmptyValidation);
        }
        let mode = self.config.trainer.mode;
        let crop_len = self.config.trainer.val_crop_len_s.unwrap_or(self.config.trainer.crop_len_s);
        let crop_n = crop_samples(crop_len);
        let (mut ctc_sum, mut refs, mut hyps) = (0.0, Vec::new(), Vec::new());
        let (mut aam_sum, mut aam_n) = (0.0, 0usize);
        let mut embeddings = std::collections::BTreeMap::new();
        for u in val {
            let mut full: Option<(Graph, EncoderOutput)> = None;
            if mode.uses_speech() {
                let (mut g, out) = eval::encode_eval(&self.model, &self.params, &u.samples)?;
                let targets = vec![self.data.vocab.encode(&u.transcript)?];
                let lp = self.model.speech_log_probs(&mut g, &self.params, &out)?;
                let loss = ctc_loss(&mut g, lp, &out.frames, &targets)?;
                ctc_sum += g.scalar_value(loss);
                hyps.push(greedy_decode(g.value(lp), &self.data.vocab));
                refs.push(u.transcript.as_str());
                full = Some((g, out));
            }
            if mode.uses_speaker() {
                let (mut g, out) = match full.take() {
                    Some(pair) if crop_n >= u.samples.len() => pair,
                    _ => {
                        let audio = crate::corpus::crop(
                            &u.samples,
                            crop_len,
                            CropMode::First,
                            &mut rand::rngs::mock::StepRng::new(0, 0),
                        );
                        eval::encode_eval(&self.model, &self.params, audio)?
                    }
                };
                let emb = self.model.speaker.embed(&mut g, &self.params, &out)?;
                embeddings.insert(u.id.clone(), g.value(emb).to_vec());
                if let Some(&label) = self.labels.get(&u.id) {
                    let cos = self.model.speaker.classify(&mut g, &self.params, emb)?;
                    let l = aam_softmax_loss(&mut g, cos, &[label], AAM_SCALE, AAM_MARGIN)?;
                    aam_sum += g.scalar_value(l);
                    aam_n += 1;
                }
            }
        }
        let (speech_loss, wer) = if mode.uses_speech() {
            let pairs = refs.iter().copied().zip(hyps.iter().map(String::as_str));
            (Some(ctc_sum / val.len() as f64), Some(eval::corpus_wer(pairs)?))
        } else {
            (None, None)
        };
        let (speaker_loss, eer) = if mode.uses_speaker() {
            let scored = eval::score_trials(&self.data.val_trials, &embeddings)?;
            ((aam_n > 0).then(|| aam_sum / aam_n as f64), Some(eval::eer(&scored)?))
        } else {
            (None, None)
        };
        let w = self.weights;
        let loss = speech_loss.map_or(0.0, |l| w.lambda_s * l) + speaker_loss.map_or(0.0, |l| w.lambda_k * l);
        Ok(ValidationRecord {
            step: self.step,
            lr: self.lr(),
            loss,
            speech_loss,
            speaker_loss,
            wer,
            eer,
        })
    }

    /// Appends `record` to the history and updates early stopping. Returns
    /// whether this record is the best so far by the selection score.
    pub fn record(&mut self, record: ValidationRecord) -> bool {
        let p = &mut self.progress;
        if p.best_val_loss.is_none_or(|b| record.loss < b) {
            p.best_val_loss = Some(record.loss);
            p.last_improvement_step = record.step;
        } else if record.step - p.last_improvement_step >= self.config.trainer.early_stop_patience {
            p.stopped = true;
        }
        let score = selection_score(record.wer, record.eer);
        let best = match (score, p.best_selection) {
            (Some(_), None) => true,
            (Some(s), Some((b, _))) => s < b,
            (None, _) => false,
        };
        if best {
            p.best_selection = score.map(|s| (s, record.step));
        }
        self.history.push(record);
        best
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut tensors = Vec::new();
        let mut offset = 0;
        for id in self.params.ids() {
            let t = self.params.get(id);
            tensors.push(TensorEntry {
                name: self.params.name(id).to_owned(),
                shape: t.shape().to_vec(),
                offset,
                adam_steps: self.adam.t[id.0],
            });
            offset += t.len();
        }
        let manifest = CheckpointManifest {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            step: self.step,
            vocab: self.data.vocab.as_str(),
            speakers: self.data.speakers.clone(),
            history: self.history.clone(),
            progress: self.progress,
            streams: Streams {
                speech: self.speech_stream.as_ref().map(SpeechBatchStream::state),
                speaker: self.speaker_stream.as_ref().map(SpeakerBatchStream::state),
            },
            encoder_forwards: self.encoder_forwards,
            total_elements: offset,
            tensors,
        };
        let bin = dir.join(PARAMS_BIN);
        let file = fs::File::create(&bin).map_err(io_err(&bin))?;
        let mut w = BufWriter::new(file);
        let blocks = [
            self.params.ids().map(|id| self.params.get(id).data().to_vec()).collect::<Vec<_>>(),
            self.adam.m.clone(),
            self.adam.v.clone(),
        ];
        for block in &blocks {
            for values in block {
                for v in values {
                    w.write_all(&v.to_le_bytes()).map_err(io_err(&bin))?;
                }
            }
        }
        w.flush().map_err(io_err(&bin))?;
        let mp = dir.join(MANIFEST_JSON);
        fs::write(&mp, serde_json::to_vec_pretty(&manifest).expect("manifest serializes")).map_err(io_err(&mp))?;
        Ok(())
    }

    /// Restores a trainer saved by [`Trainer::save_checkpoint`]. `data` must
    /// be the corpus the run was started with.
    pub fn resume(dir: &Path, data: TrainData) -> Result<Self> {
        let ckpt = read_checkpoint(dir)?;
        let m = ckpt.manifest;
        let model = Model::attach(m.config.model(), data.vocab.size(), data.speakers.len(), &ckpt.params)?;
        let mut trainer = Self::assemble(m.config, data, model, ckpt.params, ckpt.adam, m.step, m.streams)?;
        trainer.history = m.history;
        trainer.progress = m.progress;
        trainer.encoder_forwards = m.encoder_forwards;
        Ok(trainer)
    }

    fn write_metrics(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        if self.history.is_empty() {
            w.write_record(["step", "lr", "L", "L_s", "L_k", "WER_val", "EER_val"])?;
        }
        for r in &self.history {
            w.serialize(r)?;
        }
        w.flush().map_err(io_err(path))?;
        Ok(())
    }
}

/// Parsed checkpoint contents.
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub params: ParamSet,
    pub adam: AdamState,
}

/// Parses and version-checks `manifest.json` without touching the weights.
pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let mp = dir.join(MANIFEST_JSON);
    let text = fs::read(&mp).map_err(io_err(&mp))?;
    let bad = |detail: String| TrainError::Manifest {
        path: mp.clone(),
        detail,
    };
    let value: serde_json::Value = serde_json::from_slice(&text).map_err(|e| bad(e.to_string()))?;
    let found = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| bad("missing field `format_version`".into()))?;
    if found != CHECKPOINT_VERSION as u64 {
        return Err(TrainError::Version {
            found: found as u32,
            expected: CHECKPOINT_VERSION,
        });
    }
    serde_json::from_value(value).map_err(|e| bad(e.to_string()))
}

pub fn read_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    let mp = dir.join(MANIFEST_JSON);
    let bad = |detail: String| TrainError::Manifest {
        path: mp.clone(),
        detail,
    };

    let vocab = Vocabulary::new(&manifest.vocab)?;
    let mut probe = ParamSet::new();
    Model::new(
        manifest.config.model(),
        vocab.size(),
        manifest.speakers.len(),
        &mut probe,
        &mut rand::rngs::mock::StepRng::new(0, 0),
    )?;
    if probe.len() != manifest.tensors.len() {
        return Err(TrainError::Layout(format!(
            "{} tensors listed, model has {}",
            manifest.tensors.len(),
            probe.len()
        )));
    }
    let mut offset = 0;
    for (id, entry) in probe.ids().zip(&manifest.tensors) {
        if probe.name(id) != entry.name {
            return Err(TrainError::Layout(format!("tensor {} is {}, expected {}", id.0, entry.name, probe.name(id))));
        }
        if probe.get(id).shape() != entry.shape.as_slice() {
            return Err(TrainError::Shape {
                name: entry.name.clone(),
                expected: probe.get(id).shape().to_vec(),
                found: entry.shape.clone(),
            });
        }
        if entry.offset != offset {
            return Err(bad(format!("tensors[{}].offset is {}, expected {offset}", id.0, entry.offset)));
        }
        offset += probe.get(id).len();
    }
    if manifest.total_elements != offset {
        return Err(bad(format!("total_elements is {}, expected {offset}", manifest.total_elements)));
    }

    let bin = dir.join(PARAMS_BIN);
    let bytes = fs::read(&bin).map_err(io_err(&bin))?;
    let expected = 3 * offset * 8;
    if bytes.len() != expected {
        return Err(TrainError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let mut params = ParamSet::new();
    let (mut m, mut v, mut t) = (Vec::new(), Vec::new(), Vec::new());
    for entry in &manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let at = |block: usize| values[block * offset + entry.offset..block * offset + entry.offset + n].to_vec();
        params.add(entry.name.clone(), Tensor::new(entry.shape.clone(), at(0))?);
        m.push(at(1));
        v.push(at(2));
        t.push(entry.adam_steps);
    }
    Ok(Checkpoint {
        manifest,
        params,
        adam: AdamState { m, v, t },
    })
}

/// Model, parameters and vocabulary of a checkpoint, for evaluation.
pub fn load_model(dir: &Path) -> Result<LoadedModel> {
    let ckpt = read_checkpoint(dir)?;
    let m = ckpt.manifest;
    let vocab = Vocabulary::new(&m.vocab)?;
    let model = Model::attach(m.config.model(), vocab.size(), m.speakers.len(), &ckpt.params)?;
    Ok(LoadedModel {
        model,
        params: ckpt.params,
        vocab,
        speakers: m.speakers,
        config: m.config,
        step: m.step,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub steps: u64,
    pub stopped_early: bool,
    pub best: Option<ValidationRecord>,
    pub history: Vec<ValidationRecord>,
}

pub const LAST_DIR: &str = "last";
pub const BEST_DIR: &str = "best";
/// Records where the training data came from, next to the resolved config.
pub const SOURCE_FILE: &str = "source.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSource {
    pub corpus: PathBuf,
}

/// Trains to `total_steps` or until early stopping. Validates every
/// `validate_every` steps and at the end, keeps `best/` (by selection
/// score) and `last/` checkpoints, and writes `metrics.csv` and the
/// resolved config and corpus location into `run_dir`. With `resume`,
/// continues from `run_dir/last` under the config stored there.
pub fn run(config: &RunConfig, corpus_dir: &Path, run_dir: &Path, resume: bool) -> Result<RunSummary> {
    let last = run_dir.join(LAST_DIR);
    let config = if resume { read_manifest(&last)?.config } else { config.clone() };
    config.validate()?;
    fs::create_dir_all(run_dir).map_err(io_err(run_dir))?;
    let cp = run_dir.join(RESOLVED_CONFIG);
    fs::write(&cp, serde_json::to_vec_pretty(&config).expect("config serializes")).map_err(io_err(&cp))?;
    let source = RunSource {
        corpus: fs::canonicalize(corpus_dir).unwrap_or_else(|_| corpus_dir.to_path_buf()),
    };
    let sp = run_dir.join(SOURCE_FILE);
    fs::write(&sp, serde_json::to_vec_pretty(&source).expect("source serializes")).map_err(io_err(&sp))?;
    let data = TrainData::load(corpus_dir, &config)?;
    let mut trainer = if resume {
        Trainer::resume(&last, data)?
    } else {
        Trainer::new(config, data)?
    };
    let total = trainer.config.trainer.total_steps;
    let every = trainer.config.trainer.validate_every;
    let metrics = run_dir.join(METRICS_CSV);
    if total == 0 {
        trainer.save_checkpoint(&last)?;
        trainer.write_metrics(&metrics)?;
    }
    while trainer.step < total && !trainer.progress.stopped {
        let outcome = trainer.train_step()?;
        if trainer.step % every == 0 || trainer.step == total {
            let rec = trainer.validate()?;
            log::info!(
                "step {} lr {:.3e} train L {:.4} val L {:.4} WER {:?} EER {:?}",
                rec.step,
                rec.lr,
                outcome.report.total,
                rec.loss,
                rec.wer,
                rec.eer
            );
            if trainer.record(rec) {
                trainer.save_checkpoint(&run_dir.join(BEST_DIR))?;
            }
            trainer.save_checkpoint(&last)?;
            trainer.write_metrics(&metrics)?;
        }
    }
    let best = select_model(&trainer.history).map(|i| trainer.history[i].clone());
    Ok(RunSummary {
        steps: trainer.step,
        stopped_early: trainer.progress.stopped,
        best,
        history: trainer.history,
    })
}
