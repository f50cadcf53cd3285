//! Synthetic jointly-labelled corpus: generation, manifests, cropping,
//! batching and verification trials.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

mod batch;
mod synth;
mod trials;
pub mod wav;

pub use batch::{
    make_speaker_batches, make_speech_batches, padding_overhead, PaddedAudio, SpeakerBatch,
    SpeakerBatchStream, SpeakerIndex, SpeechBatch, SpeechBatchStream, StreamState,
};
pub use synth::{
    sample_transcript, synthesize, SessionCondition, SpeakerProfile, Vocabulary, TONE_SLOTS,
};
pub use trials::{generate_trials, Trial, TrialList, TrialViolation};
pub use wav::{read_wav, write_wav, WavError};

pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error(transparent)]
    Wav(#[from] WavError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("manifest {path}: {detail}")]
    Manifest { path: String, detail: String },
    #[error("invalid corpus configuration: {0}")]
    Config(String),
    #[error("character {0:?} is not in the vocabulary")]
    Vocabulary(char),
    #[error("utterance {id} has {samples} samples, above the batch budget of {budget}")]
    OverBudget {
        id: String,
        samples: usize,
        budget: usize,
    },
    #[error("unknown speaker {0}")]
    UnknownSpeaker(String),
    #[error("cannot build trials: {0}")]
    Trials(String),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sex {
    M,
    F,
}

impl fmt::Display for Sex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sex::M => "M",
            Sex::F => "F",
        })
    }
}

impl FromStr for Sex {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "M" => Ok(Sex::M),
            "F" => Ok(Sex::F),
            other => Err(format!("unknown sex {other:?}")),
        }
    }
}

/// One recording with both speech and speaker labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub samples: Vec<f64>,
    pub transcript: String,
    pub speaker_id: String,
    pub sex: Sex,
    pub session_id: String,
}

impl Utterance {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }
}

/// One manifest row. `wav_path` is relative to the manifest's directory
/// unless absolute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub wav_path: String,
    pub speaker_id: String,
    pub sex: Sex,
    pub session_id: String,
    pub transcript: String,
    pub duration_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusManifest {
    pub rows: Vec<ManifestRow>,
    /// Directory that relative `wav_path`s resolve against.
    pub root: PathBuf,
}

pub const MANIFEST_HEADER: [&str; 7] = [
    "id",
    "wav_path",
    "speaker_id",
    "sex",
    "session_id",
    "transcript",
    "duration_s",
];

impl CorpusManifest {
    pub fn read(path: &Path) -> Result<Self, CorpusError> {
        let manifest_err = |detail: String| CorpusError::Manifest {
            path: path.display().to_string(),
            detail,
        };
        let mut reader = csv::Reader::from_path(path).map_err(|e| manifest_err(e.to_string()))?;
        let header: Vec<String> = reader
            .headers()
            .map_err(|e| manifest_err(e.to_string()))?
            .iter()
            .map(str::to_owned)
            .collect();
        if header != MANIFEST_HEADER {
            return Err(manifest_err(format!(
                "header {header:?} does not match {MANIFEST_HEADER:?}"
            )));
        }
        let rows = reader
            .deserialize()
            .collect::<Result<Vec<ManifestRow>, _>>()
            .map_err(|e| manifest_err(e.to_string()))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let manifest = Self { rows, root };
        let mut seen = HashSet::new();
        for r in &manifest.rows {
            if !seen.insert(&r.id) {
                return Err(manifest_err(format!("duplicate id {}", r.id)));
            }
        }
        Ok(manifest)
    }

    pub fn write(&self, path: &Path) -> Result<(), CorpusError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| CorpusError::Manifest {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| CorpusError::Manifest {
                path: path.display().to_string(),
                detail: e.to_string(),
            })?;
        }
        w.flush().map_err(io_err(path))
    }

    pub fn wav_path(&self, row: &ManifestRow) -> PathBuf {
        let p = Path::new(&row.wav_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Checks id uniqueness, that every file resolves, and that each declared
    /// duration matches its file within one sample.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let mut seen = HashSet::new();
        for r in &self.rows {
            let err = |detail: String| CorpusError::Manifest {
                path: self.root.display().to_string(),
                detail,
            };
            if !seen.insert(&r.id) {
                return Err(err(format!("duplicate id {}", r.id)));
            }
            let n = wav::wav_sample_count(&self.wav_path(r))?;
            let declared = r.duration_s * SAMPLE_RATE as f64;
            if (declared - n as f64).abs() > 1.0 {
                return Err(err(format!(
                    "{}: declared {} s but file holds {n} samples",
                    r.id, r.duration_s
                )));
            }
        }
        Ok(())
    }

    /// Reads every referenced WAV file.
    pub fn load(&self) -> Result<Vec<Utterance>, CorpusError> {
        self.rows
            .iter()
            .map(|r| {
                Ok(Utterance {
                    id: r.id.clone(),
                    samples: read_wav(&self.wav_path(r))?,
                    transcript: r.transcript.clone(),
                    speaker_id: r.speaker_id.clone(),
                    sex: r.sex,
                    session_id: r.session_id.clone(),
                })
            })
            .collect()
    }

    pub fn speakers(&self) -> Vec<String> {
        let mut s: Vec<String> = self.rows.iter().map(|r| r.speaker_id.clone()).collect();
        s.sort();
        s.dedup();
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub sessions_per_speaker: usize,
    /// Characters of the transcript alphabet; a space acts as word separator.
    pub vocab: String,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    /// Recordings per speaker held out into the validation split.
    pub val_utts_per_speaker: usize,
    /// Speakers (the last ones generated) held out entirely into a dev split.
    pub heldout_speakers: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_speakers: 20,
            utts_per_speaker: 20,
            sessions_per_speaker: 2,
            vocab: "abcdefghijk ".into(),
            min_duration_s: 3.0,
            max_duration_s: 6.0,
            val_utts_per_speaker: 5,
            heldout_speakers: 0,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<Vocabulary, CorpusError> {
        let err = |m: &str| Err(CorpusError::Config(m.into()));
        if self.n_speakers < 2 {
            return err("need at least 2 speakers so both sexes are represented");
        }
        if self.sessions_per_speaker < 2 {
            return err("need at least 2 sessions per speaker");
        }
        if self.utts_per_speaker == 0 {
            return err("utts_per_speaker must be positive");
        }
        if !(self.min_duration_s >= 0.5 && self.max_duration_s >= self.min_duration_s) {
            return err("durations must satisfy 0.5 <= min_duration_s <= max_duration_s");
        }
        if self.val_utts_per_speaker >= self.utts_per_speaker {
            return err("val_utts_per_speaker must leave training recordings");
        }
        if self.heldout_speakers >= self.n_speakers {
            return err("heldout_speakers must leave training speakers");
        }
        Vocabulary::new(&self.vocab)
    }
}

/// Manifests written by [`generate_corpus`].
#[derive(Clone, Debug)]
pub struct GeneratedCorpus {
    pub all: CorpusManifest,
    pub train: CorpusManifest,
    pub val: CorpusManifest,
    pub dev: CorpusManifest,
    pub speakers: Vec<SpeakerProfile>,
}

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const TRAIN_FILE: &str = "train.csv";
pub const VAL_FILE: &str = "val.csv";
pub const DEV_FILE: &str = "dev.csv";
pub const SPEAKERS_FILE: &str = "speakers.json";
pub const CONFIG_FILE: &str = "corpus.json";

/// Seeds a generator for one (speaker, item) cell so every utterance can be
/// produced independently of the others.
fn cell_rng(seed: u64, speaker: usize, item: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((speaker as u64) << 32) | item);
    rng
}

/// Synthesizes the corpus into `out_dir` (WAVs under `wavs/`) and writes
/// `manifest.csv`, `train.csv`, `val.csv`, `dev.csv`, `speakers.json` and
/// the config itself as `corpus.json`.
///
/// Speakers alternate M/F. Utterance `u` of a speaker is recorded in
/// session `u % sessions_per_speaker`; the last `val_utts_per_speaker`
/// recordings of each training speaker form the validation split.
pub fn generate_corpus(config: &CorpusConfig, out_dir: &Path) -> Result<GeneratedCorpus, CorpusError> {
    let vocab = config.validate()?;
    let wav_dir = out_dir.join("wavs");
    fs::create_dir_all(&wav_dir).map_err(io_err(&wav_dir))?;
    let mut all = Vec::new();
    let (mut train, mut val, mut dev) = (Vec::new(), Vec::new(), Vec::new());
    let mut speakers = Vec::new();
    let n_train_speakers = config.n_speakers - config.heldout_speakers;
    for s in 0..config.n_speakers {
        let mut rng = cell_rng(config.seed, s, u32::MAX as u64);
        let sex = if s % 2 == 0 { Sex::M } else { Sex::F };
        let speaker_id = format!("spk{s:03}");
        let profile = SpeakerProfile::sample(speaker_id.clone(), sex, &mut rng);
        let sessions: Vec<SessionCondition> = (0..config.sessions_per_speaker)
            .map(|k| SessionCondition::sample(format!("{speaker_id}-s{k}"), &mut rng))
            .collect();
        for u in 0..config.utts_per_speaker {
            let mut rng = cell_rng(config.seed, s, u as u64);
            let session = &sessions[u % sessions.len()];
            let target = rng.gen_range(config.min_duration_s..=config.max_duration_s);
            let transcript = sample_transcript(&vocab, target, &mut rng);
            let samples = synthesize(&vocab, &profile, session, &transcript, config.min_duration_s, &mut rng)?;
            let id = format!("{speaker_id}-u{u:03}");
            let rel = format!("wavs/{id}.wav");
            // Store the quantized signal so manifests agree with disk.
            write_wav(&samples, &out_dir.join(&rel))?;
            let row = ManifestRow {
                id,
                wav_path: rel,
                speaker_id: speaker_id.clone(),
                sex,
                session_id: session.session_id.clone(),
                transcript,
                duration_s: samples.len() as f64 / SAMPLE_RATE as f64,
            };
            if s >= n_train_speakers {
                dev.push(row.clone());
            } else if u >= config.utts_per_speaker - config.val_utts_per_speaker {
                val.push(row.clone());
            } else {
                train.push(row.clone());
            }
            all.push(row);
        }
        speakers.push(profile);
    }
    let make = |rows| CorpusManifest {
        rows,
        root: out_dir.to_path_buf(),
    };
    let out = GeneratedCorpus {
        all: make(all),
        train: make(train),
        val: make(val),
        dev: make(dev),
        speakers,
    };
    out.all.write(&out_dir.join(MANIFEST_FILE))?;
    out.train.write(&out_dir.join(TRAIN_FILE))?;
    out.val.write(&out_dir.join(VAL_FILE))?;
    out.dev.write(&out_dir.join(DEV_FILE))?;
    let profiles = serde_json::to_vec_pretty(&out.speakers).expect("profiles serialize");
    let sp = out_dir.join(SPEAKERS_FILE);
    fs::write(&sp, profiles).map_err(io_err(&sp))?;
    let cp = out_dir.join(CONFIG_FILE);
    fs::write(&cp, serde_json::to_vec_pretty(config).expect("config serializes")).map_err(io_err(&cp))?;
    Ok(out)
}

/// Where a crop starts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropMode {
    /// Uniformly random offset.
    Random,
    /// Offset 0: the first `crop_len_s` seconds.
    First,
}

/// Number of samples in a crop of `crop_len_s` seconds.
pub fn crop_samples(crop_len_s: f64) -> usize {
    (crop_len_s * SAMPLE_RATE as f64).round() as usize
}

/// Start offset of a crop of `len` samples taken from `total` samples.
/// Utterances shorter than the crop are returned whole (offset 0).
pub fn crop_offset<R: Rng + ?Sized>(total: usize, len: usize, mode: CropMode, rng: &mut R) -> usize {
    if total <= len {
        return 0;
    }
    match mode {
        CropMode::First => 0,
        CropMode::Random => rng.gen_range(0..=total - len),
    }
}

/// A crop of `crop_len_s` seconds; shorter inputs pass through unpadded.
pub fn crop<'a, R: Rng + ?Sized>(
    samples: &'a [f64],
    crop_len_s: f64,
    mode: CropMode,
    rng: &mut R,
) -> &'a [f64] {
    let len = crop_samples(crop_len_s);
    let start = crop_offset(samples.len(), len, mode, rng);
    &samples[start..(start + len).min(samples.len())]
}
