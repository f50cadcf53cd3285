//! Reference oracles and the checks built on them: finite differences for
//! every graph op and for a small model end to end, CTC against path
//! enumeration, and EER against a direct threshold sweep.

use std::fmt;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::PaddedAudio;
use crate::encoder::{EncoderConfig, MaskConfig};
use crate::eval::eer_from_pairs;
use crate::heads::{HeadConfig, Model, ModelConfig, Pooling};
use crate::losses::{aam_softmax_loss, ctc_loss, ctc_loss_single, ctc_min_frames, AAM_MARGIN, AAM_SCALE, BLANK};
use crate::tensor::{finite_diff_check, FdOptions, Graph, ParamId, ParamSet, ReduceKind, Result, Tensor, UnaryKind, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub worst: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.worst <= self.tolerance
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {} (worst {:.3e}, tolerance {:.0e})", self.name, self.worst, self.tolerance)
    }
}

/// `-ln` of the total probability of all length-`t_len` paths that collapse
/// to `target`, by enumerating all `vocab^t_len` paths.
pub fn brute_force_ctc(lp: &[f64], t_len: usize, vocab: usize, target: &[usize]) -> f64 {
    let mut total = 0.0;
    let mut path = vec![0usize; t_len];
    loop {
        let mut collapsed = Vec::new();
        let mut prev = None;
        for &k in &path {
            if Some(k) != prev && k != BLANK {
                collapsed.push(k);
            }
            prev = Some(k);
        }
        if collapsed == target {
            total += path.iter().enumerate().map(|(t, &k)| lp[t * vocab + k]).sum::<f64>().exp();
        }
        let mut i = 0;
        loop {
            if i == t_len {
                return -total.ln();
            }
            path[i] += 1;
            if path[i] < vocab {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

pub fn log_softmax_rows(x: &[f64], vocab: usize) -> Vec<f64> {
    x.chunks(vocab)
        .flat_map(|r| {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + r.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            r.iter().map(move |v| v - lse).collect::<Vec<_>>()
        })
        .collect()
}

/// EER by counting false accepts and rejects at every observed score and
/// one threshold above all of them, then interpolating the first sign
/// change of `FAR - FRR` linearly.
pub fn sweep_eer(pairs: &[(f64, bool)]) -> f64 {
    let p = pairs.iter().filter(|x| x.1).count() as f64;
    let n = pairs.len() as f64 - p;
    let mut ts: Vec<f64> = pairs.iter().map(|x| x.0).collect();
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    ts.push(f64::INFINITY);
    let points: Vec<(f64, f64)> = ts
        .iter()
        .map(|&t| {
            let fa = pairs.iter().filter(|x| !x.1 && x.0 >= t).count();
            let fr = pairs.iter().filter(|x| x.1 && x.0 < t).count();
            (fa as f64 / n, fr as f64 / p)
        })
        .collect();
    for k in 0..points.len() {
        let (far, frr) = points[k];
        let d = far - frr;
        if d <= 0.0 {
            if d == 0.0 || k == 0 {
                return far;
            }
            let (far0, frr0) = points[k - 1];
            let d0 = far0 - frr0;
            return far0 + d0 / (d0 - d) * (far - far0);
        }
    }
    unreachable!("the last operating point has FAR 0")
}

/// Largest gap between the CTC loss and path enumeration over `draws`
/// random instances with `T <= 6`, `|target| <= 3`, `|V| <= 4`.
pub fn check_ctc(draws: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < draws {
        let vocab = rng.gen_range(2..=4);
        let t_len = rng.gen_range(1..=6);
        let u = rng.gen_range(0..=3);
        let target: Vec<usize> = (0..u).map(|_| rng.gen_range(1..vocab)).collect();
        if ctc_min_frames(&target).max(1) > t_len {
            continue;
        }
        let raw: Vec<f64> = (0..t_len * vocab).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let lp = log_softmax_rows(&raw, vocab);
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![t_len, vocab], lp.clone()).expect("shape matches"));
        let ours = ctc_loss_single(&mut g, x, &target).map(|l| g.scalar_value(l)).unwrap_or(f64::NAN);
        let gap = (ours - brute_force_ctc(&lp, t_len, vocab, &target)).abs();
        worst = worst.max(if gap.is_nan() { f64::INFINITY } else { gap });
        done += 1;
    }
    CheckResult {
        name: format!("CTC vs path enumeration ({draws} draws)"),
        worst,
        tolerance: 1e-9,
    }
}

/// Largest gap between `eer` and [`sweep_eer`] over random score lists
/// (ties included), plus the three fixed examples.
pub fn check_eer(lists: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let labelled = |pos: &[f64], neg: &[f64]| -> Vec<(f64, bool)> {
        pos.iter().map(|&s| (s, true)).chain(neg.iter().map(|&s| (s, false))).collect()
    };
    for (pairs, want) in [
        (labelled(&[0.9, 0.8], &[0.1, 0.2]), 0.0),
        (labelled(&[0.9, 0.7, 0.4], &[0.5, 0.2, 0.1]), 1.0 / 3.0),
        (labelled(&[0.1, 0.2], &[0.9, 0.8]), 1.0),
    ] {
        let got = eer_from_pairs(&pairs).unwrap_or(f64::NAN);
        worst = worst.max((got - want).abs()).max(if got.is_nan() { f64::INFINITY } else { 0.0 });
    }
    for _ in 0..lists {
        let n = rng.gen_range(2..=1000);
        let mut pairs: Vec<(f64, bool)> = (0..n)
            .map(|_| {
                let positive = rng.gen_bool(0.5);
                let shift = if positive { rng.gen_range(0.0..0.5) } else { 0.0 };
                ((((rng.gen::<f64>() + shift) * 64.0).round()) / 64.0, positive)
            })
            .collect();
        pairs[0].1 = true;
        pairs[1].1 = false;
        let got = eer_from_pairs(&pairs).unwrap_or(f64::NAN);
        let gap = (got - sweep_eer(&pairs)).abs();
        worst = worst.max(if gap.is_nan() { f64::INFINITY } else { gap });
    }
    CheckResult {
        name: format!("EER vs threshold sweep ({lists} lists + 3 fixed)"),
        worst,
        tolerance: 1e-12,
    }
}

fn random_params(shapes: &[&[usize]], rng: &mut StdRng) -> (ParamSet, Vec<ParamId>) {
    let mut ps = ParamSet::new();
    let ids = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| ps.add(format!("p{i}"), Tensor::uniform(s, 1.0, rng).with_requires_grad(true)))
        .collect();
    (ps, ids)
}

type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// Finite-difference error of one op under a random positive read-out.
fn op_error(shapes: &[&[usize]], seed: u64, op: &OpFn) -> Result<f64> {
    let mut rng = StdRng::seed_from_u64(seed);
    let (mut ps, ids) = random_params(shapes, &mut rng);
    let mut weights: Option<Vec<f64>> = None;
    finite_diff_check(&mut ps, &FdOptions::default(), |ps, g| {
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(ps, id)).collect();
        let out = op(g, &vars)?;
        let n = g.value(out).len();
        let w = weights.get_or_insert_with(|| (0..n).map(|_| rng.gen_range(0.5..1.5)).collect()).clone();
        let shape = g.shape(out).to_vec();
        let wv = g.constant(Tensor::new(shape, w)?);
        let prod = g.mul(out, wv)?;
        Ok(g.sum_all(prod))
    })
}

fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    fn case(
        name: &'static str,
        shapes: &[&[usize]],
        f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
    ) -> (&'static str, Vec<Vec<usize>>, OpFn) {
        (name, shapes.iter().map(|s| s.to_vec()).collect(), Box::new(f))
    }
    let mut cases = vec![
        case("add", &[&[3, 4], &[3, 4]], |g, v| g.add(v[0], v[1])),
        case("add broadcast", &[&[2, 3, 4], &[4]], |g, v| g.add(v[0], v[1])),
        case("sub", &[&[3, 4], &[4]], |g, v| g.sub(v[0], v[1])),
        case("mul", &[&[3, 4], &[3, 4]], |g, v| g.mul(v[0], v[1])),
        case("div", &[&[3, 4], &[4]], |g, v| {
            let d = g.add_scalar(v[1], 2.0);
            g.div(v[0], d)
        }),
        case("scalar ops", &[&[5]], |g, v| {
            let a = g.mul_scalar(v[0], -1.7);
            Ok(g.add_scalar(a, 0.3))
        }),
        case("exp", &[&[6]], |g, v| g.unary(UnaryKind::Exp, v[0])),
        case("log", &[&[6]], |g, v| {
            let p = g.add_scalar(v[0], 1.5);
            g.log(p)
        }),
        case("tanh", &[&[6]], |g, v| Ok(g.tanh(v[0]))),
        case("gelu", &[&[6]], |g, v| Ok(g.gelu(v[0]))),
        case("relu", &[&[6]], |g, v| {
            // Keep inputs away from the kink.
            let s = g.mul_scalar(v[0], 10.0);
            let shifted = g.add_scalar(s, 0.5);
            Ok(g.relu(shifted))
        }),
        case("neg", &[&[6]], |g, v| Ok(g.neg(v[0]))),
        case("pow", &[&[6]], |g, v| {
            let p = g.add_scalar(v[0], 2.0);
            g.powf(p, 1.5)
        }),
        case("angular margin", &[&[7]], |g, v| {
            let c = g.tanh(v[0]);
            Ok(g.angular_margin(c, AAM_MARGIN))
        }),
        case("dropout", &[&[4, 5]], |g, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            Ok(g.dropout(v[0], 0.3, &mut rng))
        }),
        case("matmul", &[&[3, 4], &[4, 5]], |g, v| g.matmul(v[0], v[1])),
        case("matmul batched", &[&[2, 3, 4], &[2, 4, 5]], |g, v| g.matmul(v[0], v[1])),
        case("matmul shared rhs", &[&[2, 3, 4], &[4, 5]], |g, v| g.matmul(v[0], v[1])),
        case("matmul_nt", &[&[2, 3, 4], &[2, 5, 4]], |g, v| g.matmul_nt(v[0], v[1])),
        case("sum_all", &[&[3, 4]], |g, v| Ok(g.sum_all(v[0]))),
        case("layer_norm", &[&[3, 6], &[6], &[6]], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
        case("l2_normalize", &[&[3, 5]], |g, v| g.l2_normalize(v[0])),
        case("conv1d grouped", &[&[2, 4, 11], &[6, 2, 3], &[6]], |g, v| {
            g.conv1d(v[0], v[1], Some(v[2]), 2, 1, 2)
        }),
        case("conv1d strided", &[&[1, 13], &[3, 1, 4]], |g, v| g.conv1d(v[0], v[1], None, 3, 0, 1)),
        case("reshape", &[&[2, 6]], |g, v| g.reshape(v[0], &[3, 4])),
        case("permute", &[&[2, 3, 4]], |g, v| g.permute(v[0], &[2, 0, 1])),
        case("transpose", &[&[2, 3, 4]], |g, v| g.transpose(v[0])),
        case("slice", &[&[2, 5, 3]], |g, v| g.slice(v[0], 1, 1, 3)),
        case("concat", &[&[2, 2, 3], &[2, 1, 3]], |g, v| g.concat(&[v[0], v[1], v[0]], 1)),
        case("gather_last", &[&[3, 4]], |g, v| {
            let sel = g.gather_last(v[0], &[Some(1), Some(1), Some(3), Some(0)])?;
            g.reshape(sel, &[12])
        }),
        case("mask_lengths", &[&[2, 4, 3]], |g, v| g.mask_lengths(v[0], 1, &[2, 4])),
    ];
    for (kind, name) in [
        (ReduceKind::Sum, "sum"),
        (ReduceKind::Mean, "mean"),
        (ReduceKind::Max, "max"),
        (ReduceKind::LogSumExp, "logsumexp"),
        (ReduceKind::Softmax, "softmax"),
        (ReduceKind::LogSoftmax, "log_softmax"),
    ] {
        for axis in 0..3 {
            let label: &'static str = Box::leak(format!("{name} axis {axis}").into_boxed_str());
            cases.push(case(label, &[&[2, 3, 4]], move |g, v| g.reduce(kind, v[0], axis)));
        }
    }
    cases
}

/// Finite-difference error of every graph op, each against `1e-6`.
pub fn check_ops(seed: u64) -> Vec<CheckResult> {
    op_cases()
        .into_iter()
        .enumerate()
        .map(|(i, (name, shapes, f))| {
            let shapes: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
            let worst = op_error(&shapes, seed.wrapping_add(i as u64), &f).unwrap_or(f64::INFINITY);
            CheckResult {
                name: format!("gradient of {name}"),
                worst,
                tolerance: 1e-6,
            }
        })
        .collect()
}

/// A 2-layer model small enough for exhaustive finite differences.
pub fn toy_model_config(pooling: Pooling) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            conv_channels: vec![4, 4],
            conv_kernels: vec![4, 3],
            conv_strides: vec![3, 2],
            conv_paddings: vec![0, 0],
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            ffn_dim: 12,
            dropout: 0.1,
            layerdrop: 0.0,
            mask: MaskConfig {
                time_prob: 0.1,
                time_span: 2,
                feature_prob: 0.1,
                feature_span: 2,
            },
            pos_conv_kernel: 3,
            pos_conv_groups: 2,
        },
        heads: HeadConfig {
            speaker_pooling: pooling,
            speaker_tap_layer: Some(1),
            ecapa: crate::heads::EcapaConfig {
                channels: 6,
                kernel: 3,
                layers: 1,
                attention_dim: 4,
                embedding_dim: Some(5),
            },
        },
    }
}

/// Finite-difference check of `λ·CTC + (1-λ)·AAM` through the whole toy
/// model, every parameter included, in training mode with fixed
/// randomness. Tolerance `1e-4` relative.
pub fn check_model(pooling: Pooling, seed: u64) -> CheckResult {
    let run = || -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let model = Model::new(toy_model_config(pooling), 4, 3, &mut params, &mut rng)
            .map_err(|e| crate::tensor::TensorError::Domain {
                op: "selfcheck",
                detail: e.to_string(),
            })?;
        for id in params.ids().collect::<Vec<_>>() {
            params.get_mut(id).set_requires_grad(true);
        }
        let long: Vec<f64> = (0..80).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let short: Vec<f64> = (0..62).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let audio = PaddedAudio::from_slices(&[&long, &short]);
        let targets = vec![vec![1, 2], vec![3]];
        let labels = [0, 2];
        let as_tensor_err = |e: &dyn fmt::Display| crate::tensor::TensorError::Domain {
            op: "selfcheck",
            detail: e.to_string(),
        };
        finite_diff_check(
            &mut params,
            &FdOptions {
                eps: 1e-5,
                max_coords_per_tensor: Some(6),
                // The loss is O(10), so quotients resolve about 1e-9; tiny
                // non-target class gradients sit below that.
                floor: 1e-6,
            },
            |ps, g| {
                let mut step = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
                let out = model.encode(g, ps, &audio, Some(&mut step)).map_err(|e| as_tensor_err(&e))?;
                let lp = model.speech_log_probs(g, ps, &out).map_err(|e| as_tensor_err(&e))?;
                let ls = ctc_loss(g, lp, &out.frames, &targets).map_err(|e| as_tensor_err(&e))?;
                let emb = model.speaker.embed(g, ps, &out).map_err(|e| as_tensor_err(&e))?;
                let cos = model.speaker.classify(g, ps, emb).map_err(|e| as_tensor_err(&e))?;
                let lk = aam_softmax_loss(g, cos, &labels, AAM_SCALE, AAM_MARGIN).map_err(|e| as_tensor_err(&e))?;
                let a = g.mul_scalar(ls, 0.5);
                let b = g.mul_scalar(lk, 0.5);
                g.add(a, b)
            },
        )
    };
    CheckResult {
        name: format!("gradient of the toy model end to end ({pooling:?} pooling)"),
        worst: run().unwrap_or(f64::INFINITY),
        tolerance: 1e-4,
    }
}

/// Every oracle check, as run by the `selfcheck` command.
pub fn run_all() -> Vec<CheckResult> {
    let mut out = check_ops(1);
    for pooling in [Pooling::Mean, Pooling::First, Pooling::Ecapa] {
        out.push(check_model(pooling, 2));
    }
    out.push(check_ctc(500, 3));
    out.push(check_eer(200, 4));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracles_agree_on_known_values() {
        // Two frames, one token: paths "1-", "-1", "11".
        let lp = log_softmax_rows(&[0.0, 0.0, 0.0, 0.0], 2);
        assert!((brute_force_ctc(&lp, 2, 2, &[1]) - -(0.75f64).ln()).abs() < 1e-12);
        let pairs = [(0.9, true), (0.7, true), (0.4, true), (0.5, false), (0.2, false), (0.1, false)];
        assert!((sweep_eer(&pairs) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn every_op_passes() {
        for r in check_ops(9) {
            assert!(r.passed(), "{r}");
        }
    }

    #[test]
    fn ctc_and_eer_checks_pass() {
        let c = check_ctc(100, 5);
        assert!(c.passed(), "{c}");
        let e = check_eer(20, 6);
        assert!(e.passed(), "{e}");
    }

    #[test]
    fn toy_model_gradients_match() {
        for pooling in [Pooling::Mean, Pooling::First, Pooling::Ecapa] {
            let r = check_model(pooling, 11);
            assert!(r.passed(), "{r}");
        }
    }
}
