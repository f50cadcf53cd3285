//! Adam, the tri-stage learning-rate schedule, elementwise gradient clipping
//! and the parameter partition used for freezing.

use serde::{Deserialize, Serialize};

use crate::encoder::{BASE_PREFIX, FEATURE_EXTRACTOR_PREFIX};
use crate::heads::{SPEAKER_PREFIX, SPEECH_PREFIX};
use crate::tensor::{ParamId, ParamSet};

#[derive(Debug, thiserror::Error)]
pub enum OptimError {
    #[error("trainable parameter {0} has no gradient")]
    MissingGrad(String),
    #[error("parameter {0} belongs to no group")]
    Ungrouped(String),
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("optimizer state covers {state} tensors but the model has {params}")]
    StateSize { state: usize, params: usize },
}

pub type Result<T> = std::result::Result<T, OptimError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub peak_lr: f64,
    pub total_steps: u64,
    pub warmup_frac: f64,
    pub hold_frac: f64,
    pub decay_frac: f64,
    pub init_scale: f64,
    pub final_scale: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-4,
            total_steps: 200_000,
            warmup_frac: 0.1,
            hold_frac: 0.4,
            decay_frac: 0.5,
            init_scale: 0.01,
            final_scale: 0.05,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        let fracs = [self.warmup_frac, self.hold_frac, self.decay_frac];
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) || (fracs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(OptimError::Schedule(format!("phase fractions {fracs:?} must be in [0, 1] and sum to 1")));
        }
        for (name, s) in [("init_scale", self.init_scale), ("final_scale", self.final_scale)] {
            if !(s > 0.0 && s <= 1.0) {
                return Err(OptimError::Schedule(format!("{name} {s} must lie in (0, 1]")));
            }
        }
        if !(self.peak_lr >= 0.0) {
            return Err(OptimError::Schedule(format!("peak_lr {} must be nonnegative", self.peak_lr)));
        }
        Ok(())
    }
}

/// Tri-stage learning rate at a (possibly fractional) step: linear warmup
/// from `init_scale·peak`, constant `peak`, exponential decay to
/// `final_scale·peak` at `total_steps`, then constant.
pub fn lr_at(step: f64, cfg: &ScheduleConfig) -> f64 {
    let total = cfg.total_steps as f64;
    let warmup = cfg.warmup_frac * total;
    let hold_end = warmup + cfg.hold_frac * total;
    let decay = cfg.decay_frac * total;
    if step >= total {
        cfg.final_scale * cfg.peak_lr
    } else if step < warmup {
        cfg.peak_lr * (cfg.init_scale + (1.0 - cfg.init_scale) * step / warmup)
    } else if step < hold_end {
        cfg.peak_lr
    } else {
        cfg.peak_lr * (cfg.final_scale.ln() * (step - hold_end) / decay).exp()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipPlacement {
    /// Clip each task's gradient before the weighted sum.
    BeforeSum,
    /// Clip the summed gradient.
    AfterSum,
}

/// Clamps every value into `[-bound, bound]`.
pub fn clip_values(values: &mut [f64], bound: f64) {
    for v in values {
        *v = v.clamp(-bound, bound);
    }
}

/// Clamps the gradients of the given tensors.
pub fn clip_gradients(params: &mut ParamSet, ids: impl IntoIterator<Item = ParamId>, bound: f64) {
    for id in ids {
        if let Some(g) = params.get_mut(id).grad_mut() {
            clip_values(g, bound);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    FeatureExtractor,
    Base,
    Speech,
    Speaker,
}

/// The group of every tensor in `params`, by name prefix.
pub fn partition(params: &ParamSet) -> Result<Vec<ParamGroup>> {
    params
        .ids()
        .map(|id| {
            let name = params.name(id);
            if name.starts_with(FEATURE_EXTRACTOR_PREFIX) {
                Ok(ParamGroup::FeatureExtractor)
            } else if name.starts_with(BASE_PREFIX) {
                Ok(ParamGroup::Base)
            } else if name.starts_with(SPEECH_PREFIX) {
                Ok(ParamGroup::Speech)
            } else if name.starts_with(SPEAKER_PREFIX) {
                Ok(ParamGroup::Speaker)
            } else {
                Err(OptimError::Ungrouped(name.to_owned()))
            }
        })
        .collect()
}

/// Which groups an optimizer step may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trainable {
    pub base: bool,
    pub speech: bool,
    pub speaker: bool,
}

impl Trainable {
    pub fn contains(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::FeatureExtractor => false,
            ParamGroup::Base => self.base,
            ParamGroup::Speech => self.speech,
            ParamGroup::Speaker => self.speaker,
        }
    }
}

/// Heads only before `freeze_base_until`, heads and base afterwards. The
/// feature extractor is never trainable.
pub fn freeze_mask(step: u64, freeze_base_until: u64) -> Trainable {
    Trainable {
        base: step >= freeze_base_until,
        speech: true,
        speaker: true,
    }
}

/// Sets `requires_grad` on every tensor according to its group.
pub fn apply_trainable(params: &mut ParamSet, groups: &[ParamGroup], trainable: Trainable) {
    for (id, &group) in params.ids().collect::<Vec<_>>().into_iter().zip(groups) {
        params.get_mut(id).set_requires_grad(trainable.contains(group));
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-tensor first and second moments and step counts.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: Vec<u64>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            m: params.ids().map(|id| vec![0.0; params.get(id).len()]).collect(),
            v: params.ids().map(|id| vec![0.0; params.get(id).len()]).collect(),
            t: vec![0; params.len()],
        }
    }
}

/// Adam with bias correction on every tensor with `requires_grad`. Other
/// tensors and their moments are left exactly as they are.
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState, cfg: &AdamConfig, lr: f64) -> Result<()> {
    if state.t.len() != params.len() {
        return Err(OptimError::StateSize {
            state: state.t.len(),
            params: params.len(),
        });
    }
    for id in params.ids().collect::<Vec<_>>() {
        if !params.get(id).requires_grad() {
            continue;
        }
        let name = params.name(id).to_owned();
        let i = id.0;
        let tensor = params.get_mut(id);
        let grad = tensor.take_grad().ok_or(OptimError::MissingGrad(name))?;
        state.t[i] += 1;
        let t = state.t[i] as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((p, &g), mi), vi) in tensor.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
            *p -= lr * (*mi / c1) / ((*vi / c2).sqrt() + cfg.eps);
        }
        tensor.set_grad(Some(grad));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn reference_schedule() -> ScheduleConfig {
        ScheduleConfig::default()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn schedule_boundaries() {
        let c = reference_schedule();
        assert!(rel(lr_at(20_000.0, &c), 1e-4) < 1e-15);
        assert!(rel(lr_at(100_000.0, &c), 1e-4) < 1e-15);
        assert!(rel(lr_at(200_000.0, &c), 5e-6) < 1e-15);
        assert!(rel(lr_at(0.0, &c), 1e-6) < 1e-15);
        assert_eq!(lr_at(1e9, &c), lr_at(200_000.0, &c));
        for b in [20_000.0, 100_000.0, 200_000.0] {
            let left = lr_at(b - b * 1e-15, &c);
            let right = lr_at(b, &c);
            assert!(rel(left, right) < 1e-14, "{b}: {left} vs {right}");
        }
        assert!(c.validate().is_ok());
        let bad = ScheduleConfig {
            hold_frac: 0.5,
            ..c
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn schedule_is_monotone_within_phases() {
        let c = reference_schedule();
        let mut prev = 0.0;
        for s in (0..=20_000).step_by(500) {
            let lr = lr_at(s as f64, &c);
            assert!(lr >= prev);
            prev = lr;
        }
        for s in (100_000..=200_000).step_by(500) {
            let lr = lr_at(s as f64, &c);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn clipping() {
        let mut g = [-2.0, 0.5, 3.0];
        clip_values(&mut g, 1.0);
        assert_eq!(g, [-1.0, 0.5, 1.0]);
        let before = g;
        clip_values(&mut g, 1.0);
        assert_eq!(g, before);

        // Two tasks contribute 0.8 each.
        let mut a = [0.8];
        let mut b = [0.8];
        clip_values(&mut a, 1.0);
        clip_values(&mut b, 1.0);
        let before_sum = a[0] + b[0];
        let mut after = [0.8 + 0.8];
        clip_values(&mut after, 1.0);
        assert_eq!(before_sum, 1.6);
        assert_eq!(after[0], 1.0);
    }

    fn one_param(value: f64, grad: f64) -> ParamSet {
        let mut p = ParamSet::new();
        let id = p.add("speech_head.w", Tensor::scalar(value).with_requires_grad(true));
        p.get_mut(id).set_grad(Some(vec![grad]));
        p
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        for g in [0.3, -5.0, 1e-3] {
            let mut p = one_param(1.0, g);
            let mut s = AdamState::new(&p);
            adam_step(&mut p, &mut s, &AdamConfig::default(), 0.01).unwrap();
            let moved = 1.0 - p.get(ParamId(0)).data()[0];
            assert!((moved - 0.01 * g.signum()).abs() < 1e-4 * 0.01, "{moved}");
        }
    }

    #[test]
    fn adam_fixed_points() {
        let mut p = one_param(2.5, 0.0);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &mut s, &AdamConfig::default(), 0.1).unwrap();
        assert_eq!(p.get(ParamId(0)).data()[0], 2.5);

        let mut p = one_param(2.5, 0.7);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &mut s, &AdamConfig::default(), 0.0).unwrap();
        assert_eq!(p.get(ParamId(0)).data()[0], 2.5);

        let mut p = one_param(2.5, 0.7);
        p.get_mut(ParamId(0)).zero_grad();
        let mut s = AdamState::new(&p);
        assert!(matches!(adam_step(&mut p, &mut s, &AdamConfig::default(), 0.1), Err(OptimError::MissingGrad(_))));
    }

    #[test]
    fn frozen_tensors_and_moments_stay_put() {
        let mut p = ParamSet::new();
        let fe = p.add("encoder.fe.conv0.weight", Tensor::new(vec![2], vec![0.1, 0.2]).unwrap());
        let base = p.add("encoder.proj.weight", Tensor::new(vec![2], vec![0.3, 0.4]).unwrap());
        let head = p.add("speech_head.out.weight", Tensor::new(vec![2], vec![0.5, 0.6]).unwrap());
        let groups = partition(&p).unwrap();
        assert_eq!(groups, vec![ParamGroup::FeatureExtractor, ParamGroup::Base, ParamGroup::Speech]);
        let mut s = AdamState::new(&p);
        let fe_before = p.get(fe).data().to_vec();
        let base_before = p.get(base).data().to_vec();
        for step in 0..100 {
            apply_trainable(&mut p, &groups, freeze_mask(step, 3000));
            for id in [fe, base, head] {
                p.get_mut(id).set_grad(Some(vec![0.5, -0.5]));
            }
            adam_step(&mut p, &mut s, &AdamConfig::default(), 0.01).unwrap();
        }
        assert_eq!(p.get(fe).data(), fe_before.as_slice());
        assert_eq!(p.get(base).data(), base_before.as_slice());
        assert_eq!((s.t[0], s.t[1], s.t[2]), (0, 0, 100));
        assert_eq!(s.m[1], vec![0.0, 0.0]);
    }

    #[test]
    fn freeze_boundaries() {
        assert!(!freeze_mask(0, 3000).base);
        assert!(!freeze_mask(2999, 3000).base);
        assert!(freeze_mask(3000, 3000).base);
        for step in [0, 2999, 3000, 1_000_000] {
            let t = freeze_mask(step, 3000);
            assert!(t.speech && t.speaker);
            assert!(!t.contains(ParamGroup::FeatureExtractor));
        }
    }

    #[test]
    fn unknown_names_are_rejected() {
        let mut p = ParamSet::new();
        p.add("mystery", Tensor::scalar(0.0));
        assert!(matches!(partition(&p), Err(OptimError::Ungrouped(_))));
    }
}
