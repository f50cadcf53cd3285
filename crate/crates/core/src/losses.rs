//! CTC speech loss, additive angular margin speaker loss, and their weighted
//! combination.

use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, TensorError, Var};

pub const BLANK: usize = 0;
pub const AAM_SCALE: f64 = 30.0;
pub const AAM_MARGIN: f64 = 0.2;
const COSINE_SLACK: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("item {item}: target of {target_len} tokens needs at least {needed} frames, got {frames}")]
    CtcInfeasible {
        item: usize,
        target_len: usize,
        needed: usize,
        frames: usize,
    },
    #[error("item {item}: target position {pos} is the blank symbol")]
    BlankInTarget { item: usize, pos: usize },
    #[error("item {item}: token {token} outside vocabulary of {vocab}")]
    TokenRange { item: usize, token: usize, vocab: usize },
    #[error("cosine logit {value} outside [-1, 1]; inputs must be normalized")]
    CosineRange { value: f64 },
    #[error("target class {target} outside {classes} classes")]
    ClassRange { target: usize, classes: usize },
    #[error("batch of {got} items does not match {expected} targets")]
    BatchSize { expected: usize, got: usize },
    #[error("{what} loss is not finite ({value})")]
    NonFinite { what: &'static str, value: f64 },
    #[error("invalid loss weights: {0}")]
    Weights(String),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Frames needed to emit `target` under CTC: one per token plus one blank
/// between each pair of equal neighbours.
pub fn ctc_min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Negative log-likelihood of `target` under per-frame log-probabilities
/// `log_probs: [T, V]`, from the alpha recursion in log space.
pub fn ctc_loss_single(g: &mut Graph, log_probs: Var, target: &[usize]) -> Result<Var> {
    ctc_item(g, log_probs, target, 0)
}

fn ctc_item(g: &mut Graph, lp: Var, target: &[usize], item: usize) -> Result<Var> {
    let shape = g.shape(lp).to_vec();
    let (t_len, vocab) = (shape[0], shape[1]);
    for (pos, &tok) in target.iter().enumerate() {
        if tok == BLANK {
            return Err(LossError::BlankInTarget { item, pos });
        }
        if tok >= vocab {
            return Err(LossError::TokenRange { item, token: tok, vocab });
        }
    }
    let needed = ctc_min_frames(target);
    if t_len < needed.max(1) {
        return Err(LossError::CtcInfeasible {
            item,
            target_len: target.len(),
            needed,
            frames: t_len,
        });
    }
    let mut ext = vec![BLANK; 2 * target.len() + 1];
    for (i, &tok) in target.iter().enumerate() {
        ext[2 * i + 1] = tok;
    }
    let s_len = ext.len();
    let emissions = g.gather_last(lp, &ext.iter().map(|&k| Some(k)).collect::<Vec<_>>())?;
    let shift1: Vec<Option<usize>> = (0..s_len).map(|s| s.checked_sub(1)).collect();
    let shift2: Vec<Option<usize>> = (0..s_len)
        .map(|s| (s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2]).then(|| s - 2))
        .collect();
    let start: Vec<Option<usize>> = (0..s_len).map(|s| (s < 2).then_some(s)).collect();

    let e0 = g.slice(emissions, 0, 0, 1)?;
    let e0 = g.reshape(e0, &[s_len])?;
    let mut alpha = g.gather_last(e0, &start)?;
    for t in 1..t_len {
        let a1 = g.gather_last(alpha, &shift1)?;
        let a2 = g.gather_last(alpha, &shift2)?;
        let stacked = g.concat(&[alpha, a1, a2], 0)?;
        let stacked = g.reshape(stacked, &[3, s_len])?;
        let merged = g.logsumexp(stacked, 0)?;
        let e = g.slice(emissions, 0, t, 1)?;
        let e = g.reshape(e, &[s_len])?;
        alpha = g.add(merged, e)?;
    }
    let finals: Vec<Option<usize>> = if s_len == 1 {
        vec![Some(0)]
    } else {
        vec![Some(s_len - 1), Some(s_len - 2)]
    };
    let last = g.gather_last(alpha, &finals)?;
    let ll = g.logsumexp(last, 0)?;
    Ok(g.neg(ll))
}

/// Mean CTC loss over a batch. `log_probs` is `[B, m, V]`; item `b` uses its
/// first `frames[b]` frames.
pub fn ctc_loss(g: &mut Graph, log_probs: Var, frames: &[usize], targets: &[Vec<usize>]) -> Result<Var> {
    let shape = g.shape(log_probs).to_vec();
    let (b, m, v) = (shape[0], shape[1], shape[2]);
    if frames.len() != b || targets.len() != b {
        return Err(LossError::BatchSize {
            expected: targets.len(),
            got: b,
        });
    }
    let mut losses = Vec::with_capacity(b);
    for (item, (&f, target)) in frames.iter().zip(targets).enumerate() {
        let row = g.slice(log_probs, 0, item, 1)?;
        let row = g.reshape(row, &[m, v])?;
        let row = if f < m { g.slice(row, 0, 0, f)? } else { row };
        let l = ctc_item(g, row, target, item)?;
        losses.push(g.reshape(l, &[1])?);
    }
    let all = g.concat(&losses, 0)?;
    let loss = g.mean(all, 0)?;
    check_finite("speech", g.scalar_value(loss))?;
    Ok(loss)
}

fn check_finite(what: &'static str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(LossError::NonFinite { what, value })
    }
}

/// Scaled logits `s·cos θ_j`, with the target entry replaced by
/// `s·cos(θ_y + margin)`.
pub fn aam_logits(g: &mut Graph, cosines: Var, targets: &[usize], scale: f64, margin: f64) -> Result<Var> {
    let shape = g.shape(cosines).to_vec();
    let (b, n) = (shape[0], shape[1]);
    if targets.len() != b {
        return Err(LossError::BatchSize {
            expected: targets.len(),
            got: b,
        });
    }
    if let Some(&value) = g.value(cosines).iter().find(|c| !(c.abs() <= 1.0 + COSINE_SLACK)) {
        return Err(LossError::CosineRange { value });
    }
    let mut onehot = vec![0.0; b * n];
    for (item, &t) in targets.iter().enumerate() {
        if t >= n {
            return Err(LossError::ClassRange { target: t, classes: n });
        }
        onehot[item * n + t] = 1.0;
    }
    let rest: Vec<f64> = onehot.iter().map(|v| 1.0 - v).collect();
    let onehot = g.constant_from(&[b, n], onehot)?;
    let rest = g.constant_from(&[b, n], rest)?;
    let shifted = g.angular_margin(cosines, margin);
    let target_part = g.mul(shifted, onehot)?;
    let other_part = g.mul(cosines, rest)?;
    let logits = g.add(target_part, other_part)?;
    Ok(g.mul_scalar(logits, scale))
}

/// Batch-mean cross-entropy on [`aam_logits`].
pub fn aam_softmax_loss(g: &mut Graph, cosines: Var, targets: &[usize], scale: f64, margin: f64) -> Result<Var> {
    let logits = aam_logits(g, cosines, targets, scale, margin)?;
    let loss = cross_entropy(g, logits, targets)?;
    check_finite("speaker", g.scalar_value(loss))?;
    Ok(loss)
}

/// Batch-mean cross-entropy of `[B, n]` logits against class targets.
pub fn cross_entropy(g: &mut Graph, logits: Var, targets: &[usize]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    let (b, n) = (shape[0], shape[1]);
    let mut onehot = vec![0.0; b * n];
    for (item, &t) in targets.iter().enumerate() {
        if t >= n {
            return Err(LossError::ClassRange { target: t, classes: n });
        }
        onehot[item * n + t] = 1.0;
    }
    let onehot = g.constant_from(&[b, n], onehot)?;
    let lsm = g.log_softmax(logits, 1)?;
    let picked = g.mul(lsm, onehot)?;
    let total = g.sum_all(picked);
    Ok(g.mul_scalar(total, -1.0 / b as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_s: f64,
    pub lambda_k: f64,
}

impl LossWeights {
    pub fn new(lambda_s: f64, lambda_k: f64) -> Result<Self> {
        let w = Self { lambda_s, lambda_k };
        w.validate()?;
        Ok(w)
    }

    /// Speech weight `lambda_s` with `lambda_k = 1 - lambda_s`.
    pub fn speech(lambda_s: f64) -> Result<Self> {
        Self::new(lambda_s, 1.0 - lambda_s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_s >= 0.0 && self.lambda_k >= 0.0) {
            return Err(LossError::Weights(format!(
                "weights must be nonnegative (lambda_s {}, lambda_k {})",
                self.lambda_s, self.lambda_k
            )));
        }
        if (self.lambda_s + self.lambda_k - 1.0).abs() > 1e-9 {
            return Err(LossError::Weights(format!(
                "lambda_s + lambda_k must be 1, got {}",
                self.lambda_s + self.lambda_k
            )));
        }
        Ok(())
    }
}

/// Loss weights as configured: `lambda_k` defaults to `1 - lambda_s`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_s: f64,
    pub lambda_k: Option<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_s: 0.5,
            lambda_k: None,
        }
    }
}

impl LossConfig {
    pub fn weights(&self) -> Result<LossWeights> {
        LossWeights::new(self.lambda_s, self.lambda_k.unwrap_or(1.0 - self.lambda_s))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub total: f64,
    pub speech: Option<f64>,
    pub speaker: Option<f64>,
}

/// Weighted sum of the task losses. A missing loss counts as 0 and its
/// weight as 0.
pub fn combine(speech: Option<f64>, speaker: Option<f64>, weights: LossWeights, step: u64) -> Result<LossReport> {
    for (what, v) in [("speech", speech), ("speaker", speaker)] {
        if let Some(v) = v {
            check_finite(what, v)?;
        }
    }
    let total = speech.map_or(0.0, |l| weights.lambda_s * l) + speaker.map_or(0.0, |l| weights.lambda_k * l);
    Ok(LossReport {
        step,
        total,
        speech,
        speaker,
    })
}
