//! Greedy CTC decoding, WER, cosine trial scoring, EER, cross-condition
//! evaluation and the per-layer speaker probe.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{crop, CropMode, PaddedAudio, TrialList, Utterance, Vocabulary};
use crate::encoder::EncoderOutput;
use crate::heads::{pool_mean, HeadError, Model};
use crate::losses::BLANK;
use crate::tensor::{Graph, ParamSet};
use crate::trainer::{load_model, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Checkpoint(#[from] Box<TrainError>),
    #[error("reference transcript {0:?} has no words")]
    EmptyReference(String),
    #[error("no embedding for utterance {0}")]
    MissingEmbedding(String),
    #[error("embedding of utterance {0} has zero norm")]
    ZeroNorm(String),
    #[error("EER needs positive and negative trials (got {positives} and {negatives})")]
    SingleClass { positives: usize, negatives: usize },
    #[error("non-finite score for trial {a} {b}")]
    NonFinite { a: String, b: String },
    #[error("unknown condition {0:?}; expected \"full\" or \"first_<seconds>s\"")]
    Condition(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("writing CSV: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

impl From<TrainError> for EvalError {
    fn from(e: TrainError) -> Self {
        EvalError::Checkpoint(Box::new(e))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Per-frame argmax of a `m × v` row-major matrix, repeats collapsed and
/// blanks removed.
pub fn greedy_tokens(log_probs: &[f64], v: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = BLANK;
    for row in log_probs.chunks(v) {
        let best = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc })
            .0;
        if best != prev && best != BLANK {
            out.push(best);
        }
        prev = best;
    }
    out
}

pub fn greedy_decode(log_probs: &[f64], vocab: &Vocabulary) -> String {
    vocab.decode(&greedy_tokens(log_probs, vocab.size()))
}

fn words(s: &str) -> Vec<&str> {
    s.split(Vocabulary::SEPARATOR).filter(|w| !w.is_empty()).collect()
}

/// Word-level Levenshtein distance and reference length.
pub fn word_edits(reference: &str, hypothesis: &str) -> Result<(usize, usize)> {
    let r = words(reference);
    if r.is_empty() {
        return Err(EvalError::EmptyReference(reference.to_owned()));
    }
    let h = words(hypothesis);
    let mut prev: Vec<usize> = (0..=h.len()).collect();
    for (i, rw) in r.iter().enumerate() {
        let mut cur = vec![i + 1; h.len() + 1];
        for (j, hw) in h.iter().enumerate() {
            cur[j + 1] = (prev[j + 1] + 1).min(cur[j] + 1).min(prev[j] + usize::from(rw != hw));
        }
        prev = cur;
    }
    Ok((prev[h.len()], r.len()))
}

pub fn wer(reference: &str, hypothesis: &str) -> Result<f64> {
    let (e, n) = word_edits(reference, hypothesis)?;
    Ok(e as f64 / n as f64)
}

/// Total edits over total reference words.
pub fn corpus_wer<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<f64> {
    let (mut edits, mut total) = (0, 0);
    for (r, h) in pairs {
        let (e, n) = word_edits(r, h)?;
        edits += e;
        total += n;
    }
    if total == 0 {
        return Err(EvalError::EmptyReference(String::new()));
    }
    Ok(edits as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredTrial {
    pub positive: bool,
    pub a: String,
    pub b: String,
    pub score: f64,
}

impl fmt::Display for ScoredTrial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {}", u8::from(self.positive), self.a, self.b, self.score)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (norm(a) * norm(b))
}

pub fn score_trials(trials: &TrialList, embeddings: &BTreeMap<String, Vec<f64>>) -> Result<Vec<ScoredTrial>> {
    let get = |id: &str| {
        let e = embeddings.get(id).ok_or_else(|| EvalError::MissingEmbedding(id.to_owned()))?;
        if norm(e) == 0.0 {
            return Err(EvalError::ZeroNorm(id.to_owned()));
        }
        Ok(e)
    };
    trials
        .trials
        .iter()
        .map(|t| {
            let score = cosine(get(&t.a)?, get(&t.b)?);
            if !score.is_finite() {
                return Err(EvalError::NonFinite {
                    a: t.a.clone(),
                    b: t.b.clone(),
                });
            }
            Ok(ScoredTrial {
                positive: t.positive,
                a: t.a.clone(),
                b: t.b.clone(),
                score,
            })
        })
        .collect()
}

/// Equal error rate. Thresholds sweep the observed scores (accepting
/// `score >= t`) plus one above them all; the crossing of FAR and FRR is
/// interpolated linearly between neighbouring operating points.
pub fn eer(scored: &[ScoredTrial]) -> Result<f64> {
    let pairs: Vec<(f64, bool)> = scored.iter().map(|s| (s.score, s.positive)).collect();
    eer_from_pairs(&pairs)
}

pub fn eer_from_pairs(pairs: &[(f64, bool)]) -> Result<f64> {
    let positives = pairs.iter().filter(|p| p.1).count();
    let negatives = pairs.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(EvalError::SingleClass { positives, negatives });
    }
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|x, y| x.0.total_cmp(&y.0));
    let (p, n) = (positives as f64, negatives as f64);
    let (mut pos_below, mut neg_below) = (0usize, 0usize);
    let mut prev: Option<(f64, f64)> = None;
    let mut i = 0;
    loop {
        let far = (negatives - neg_below) as f64 / n;
        let frr = pos_below as f64 / p;
        let d = far - frr;
        if d <= 0.0 {
            return Ok(match prev {
                Some((far0, frr0)) if d < 0.0 => {
                    let d0 = far0 - frr0;
                    let alpha = d0 / (d0 - d);
                    far0 + alpha * (far - far0)
                }
                _ => far,
            });
        }
        prev = Some((far, frr));
        // Raise the threshold past every trial tied at the current score.
        let s = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == s {
            if sorted[i].1 {
                pos_below += 1;
            } else {
                neg_below += 1;
            }
            i += 1;
        }
    }
}

/// Audio used for an utterance at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Condition {
    Full,
    /// The first `seconds` of the utterance (whole if shorter).
    First(f64),
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::Full => write!(f, "full"),
            Condition::First(s) => write!(f, "first_{s}s"),
        }
    }
}

impl FromStr for Condition {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "full" {
            return Ok(Condition::Full);
        }
        s.strip_prefix("first_")
            .and_then(|r| r.strip_suffix('s'))
            .and_then(|r| r.parse::<f64>().ok())
            .filter(|x| *x > 0.0)
            .map(Condition::First)
            .ok_or_else(|| EvalError::Condition(s.to_owned()))
    }
}

impl Condition {
    pub fn apply<'a>(&self, samples: &'a [f64]) -> &'a [f64] {
        match self {
            Condition::Full => samples,
            Condition::First(s) => crop(samples, *s, CropMode::First, &mut rand::rngs::mock::StepRng::new(0, 0)),
        }
    }
}

/// Eval-mode forward pass of one utterance.
pub fn encode_eval(model: &Model, params: &ParamSet, samples: &[f64]) -> Result<(Graph, EncoderOutput)> {
    let mut g = Graph::new();
    let audio = PaddedAudio::from_slices(&[samples]);
    let out = model.encode(&mut g, params, &audio, None::<&mut rand_chacha::ChaCha8Rng>)?;
    Ok((g, out))
}

pub fn transcribe(model: &Model, params: &ParamSet, samples: &[f64], vocab: &Vocabulary) -> Result<String> {
    let (mut g, out) = encode_eval(model, params, samples)?;
    let lp = model.speech_log_probs(&mut g, params, &out)?;
    Ok(greedy_decode(g.value(lp), vocab))
}

/// Speaker-head embedding of one utterance.
pub fn embed(model: &Model, params: &ParamSet, samples: &[f64]) -> Result<Vec<f64>> {
    let (mut g, out) = encode_eval(model, params, samples)?;
    let e = model.speaker.embed(&mut g, params, &out)?;
    Ok(g.value(e).to_vec())
}

/// Mean-pooled output of every encoder layer `0..=L`.
pub fn layer_means(model: &Model, params: &ParamSet, samples: &[f64]) -> Result<Vec<Vec<f64>>> {
    let (mut g, out) = encode_eval(model, params, samples)?;
    out.layers
        .iter()
        .map(|&c| {
            let p = pool_mean(&mut g, c, &out.frames)?;
            Ok(g.value(p).to_vec())
        })
        .collect()
}

pub fn embed_corpus(
    model: &Model,
    params: &ParamSet,
    utts: &[Utterance],
    condition: Condition,
) -> Result<BTreeMap<String, Vec<f64>>> {
    utts.iter()
        .map(|u| Ok((u.id.clone(), embed(model, params, condition.apply(&u.samples))?)))
        .collect()
}

pub fn transcribe_corpus(model: &Model, params: &ParamSet, utts: &[Utterance], vocab: &Vocabulary) -> Result<f64> {
    let hyps = utts
        .iter()
        .map(|u| transcribe(model, params, &u.samples, vocab))
        .collect::<Result<Vec<_>>>()?;
    corpus_wer(utts.iter().zip(&hyps).map(|(u, h)| (u.transcript.as_str(), h.as_str())))
}

/// Utterances referenced by `trials`, in the order given.
fn trial_utterances<'a>(trials: &TrialList, utts: &'a [Utterance]) -> Result<Vec<&'a Utterance>> {
    let wanted: std::collections::BTreeSet<&str> =
        trials.trials.iter().flat_map(|t| [t.a.as_str(), t.b.as_str()]).collect();
    let picked: Vec<&Utterance> = utts.iter().filter(|u| wanted.contains(u.id.as_str())).collect();
    if picked.len() < wanted.len() {
        let have: std::collections::BTreeSet<&str> = picked.iter().map(|u| u.id.as_str()).collect();
        let missing = wanted.iter().find(|w| !have.contains(*w)).expect("a missing id");
        return Err(EvalError::MissingEmbedding((*missing).to_owned()));
    }
    Ok(picked)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub layer: usize,
    pub eer: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub checkpoint: String,
    pub trials: String,
    pub rows: Vec<ProbeRow>,
}

/// EER of mean-pooled `C^n` for every layer `n = 0..=L`, on full
/// utterances, whatever pooling the speaker head was trained with.
pub fn layer_probe(model: &Model, params: &ParamSet, utts: &[Utterance], trials: &TrialList) -> Result<Vec<ProbeRow>> {
    let picked = trial_utterances(trials, utts)?;
    let mut per_layer: Vec<BTreeMap<String, Vec<f64>>> = vec![BTreeMap::new(); model.encoder.n_layers() + 1];
    for u in picked {
        for (n, e) in layer_means(model, params, &u.samples)?.into_iter().enumerate() {
            per_layer[n].insert(u.id.clone(), e);
        }
    }
    per_layer
        .iter()
        .enumerate()
        .map(|(layer, emb)| {
            Ok(ProbeRow {
                layer,
                eer: eer(&score_trials(trials, emb)?)?,
            })
        })
        .collect()
}

pub fn write_probe_csv(rows: &[ProbeRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Report keys are fixed; `wer` is absent when no transcripts were scored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub wer: Option<f64>,
    pub eer_by_condition: BTreeMap<String, f64>,
    pub n_trials: usize,
    pub checkpoint: String,
    pub conditions: Vec<String>,
}

/// WER over `utts` (when `with_wer`) and EER under each condition.
/// Returns the report and the scored trials per condition.
pub fn evaluate_model(
    model: &Model,
    params: &ParamSet,
    vocab: &Vocabulary,
    utts: &[Utterance],
    trials: &TrialList,
    conditions: &[Condition],
    with_wer: bool,
) -> Result<(EvalReport, BTreeMap<String, Vec<ScoredTrial>>)> {
    let wer = if with_wer {
        Some(transcribe_corpus(model, params, utts, vocab)?)
    } else {
        None
    };
    let mut eer_by_condition = BTreeMap::new();
    let mut scores = BTreeMap::new();
    if !conditions.is_empty() {
        let picked: Vec<Utterance> = trial_utterances(trials, utts)?.into_iter().cloned().collect();
        for c in conditions {
            let emb = embed_corpus(model, params, &picked, *c)?;
            let scored = score_trials(trials, &emb)?;
            eer_by_condition.insert(c.to_string(), eer(&scored)?);
            scores.insert(c.to_string(), scored);
        }
    }
    let report = EvalReport {
        wer,
        eer_by_condition,
        n_trials: trials.len(),
        checkpoint: String::new(),
        conditions: conditions.iter().map(Condition::to_string).collect(),
    };
    Ok((report, scores))
}

/// Loads a checkpoint, evaluates it and writes `report.json`, `report.csv`
/// and one `scores_<condition>.txt` per condition into `out_dir`.
pub fn evaluate(
    checkpoint: &Path,
    utts: &[Utterance],
    trials: &TrialList,
    conditions: &[Condition],
    with_wer: bool,
    out_dir: &Path,
) -> Result<EvalReport> {
    let loaded = load_model(checkpoint)?;
    let (mut report, scores) = evaluate_model(
        &loaded.model,
        &loaded.params,
        &loaded.vocab,
        utts,
        trials,
        conditions,
        with_wer,
    )?;
    report.checkpoint = checkpoint.display().to_string();
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let json = out_dir.join("report.json");
    std::fs::write(&json, serde_json::to_vec_pretty(&report).expect("report serializes")).map_err(io_err(&json))?;
    let mut w = csv::Writer::from_path(out_dir.join("report.csv"))?;
    w.write_record(["metric", "condition", "value"])?;
    if let Some(x) = report.wer {
        w.write_record(["wer", "", &x.to_string()])?;
    }
    for (c, x) in &report.eer_by_condition {
        w.write_record(["eer", c, &x.to_string()])?;
    }
    w.flush().map_err(io_err(out_dir))?;
    for (c, scored) in &scores {
        let path = out_dir.join(format!("scores_{c}.txt"));
        let text: String = scored.iter().map(|s| format!("{s}\n")).collect();
        std::fs::write(&path, text).map_err(io_err(&path))?;
    }
    Ok(report)
}

/// Loads a checkpoint, probes every layer and writes the CSV to `out`
/// plus a JSON sidecar naming the checkpoint and trial list.
pub fn probe(checkpoint: &Path, utts: &[Utterance], trials: &TrialList, trials_name: &str, out: &Path) -> Result<ProbeReport> {
    let loaded = load_model(checkpoint)?;
    let rows = layer_probe(&loaded.model, &loaded.params, utts, trials)?;
    write_probe_csv(&rows, out)?;
    let report = ProbeReport {
        checkpoint: checkpoint.display().to_string(),
        trials: trials_name.to_owned(),
        rows,
    };
    let side = out.with_extension("json");
    std::fs::write(&side, serde_json::to_vec_pretty(&report).expect("probe serializes")).map_err(io_err(&side))?;
    Ok(report)
}
