#![allow(dead_code)]

use std::path::Path;
use std::sync::{Mutex, MutexGuard};

use mtl_speech::corpus::{generate_corpus, CorpusConfig};
use mtl_speech::encoder::MaskConfig;
use mtl_speech::tensor::ParamSet;
use mtl_speech::trainer::{Mode, RunConfig, TrainData, Trainer};
use tempfile::TempDir;

/// Serializes the long-running tests so their wall-clock limits are not
/// distorted by each other.
pub fn heavy() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

/// Four speakers with five short recordings each, two held out per speaker
/// for validation.
pub fn tiny_corpus() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let cfg = CorpusConfig {
        n_speakers: 4,
        utts_per_speaker: 5,
        sessions_per_speaker: 2,
        vocab: "ab ".into(),
        min_duration_s: 0.5,
        max_duration_s: 0.8,
        val_utts_per_speaker: 2,
        heldout_speakers: 0,
        seed: 5,
    };
    generate_corpus(&cfg, dir.path()).unwrap();
    dir
}

pub fn tiny_config(mode: Mode) -> RunConfig {
    let mut c = RunConfig::default();
    c.encoder.conv_channels = vec![8; 4];
    c.encoder.d_model = 16;
    c.encoder.n_heads = 2;
    c.encoder.ffn_dim = 24;
    c.encoder.pos_conv_kernel = 5;
    c.encoder.pos_conv_groups = 2;
    c.encoder.mask = MaskConfig {
        time_prob: 0.1,
        time_span: 2,
        feature_prob: 0.1,
        feature_span: 2,
    };
    c.heads.ecapa.channels = 8;
    c.heads.ecapa.attention_dim = 4;
    let t = &mut c.trainer;
    t.mode = mode;
    t.crop_len_s = 0.6;
    t.speech_batch_samples = 3 * 13_000;
    t.speaker_batch_items = 4;
    t.freeze_base_until = 0;
    t.schedule.peak_lr = 1e-3;
    t.schedule.total_steps = 100;
    t.total_steps = 100;
    t.validate_every = 5;
    t.val_positive_trials = 4;
    t.val_negative_trials = 4;
    c
}

pub fn trainer(dir: &Path, config: RunConfig) -> Trainer {
    let data = TrainData::load(dir, &config).unwrap();
    Trainer::new(config, data).unwrap()
}

/// Every parameter value, tensor by tensor.
pub fn values(params: &ParamSet) -> Vec<Vec<f64>> {
    params.ids().map(|id| params.get(id).data().to_vec()).collect()
}
