//! One test per acceptance criterion. Each prints a single PASS line with
//! the measured quantity; failures carry the measurement in the panic.

mod common;

use std::fs;
use std::time::{Duration, Instant};

use common::{heavy, tiny_config, tiny_corpus, trainer, values};
use mtl_speech::corpus::{generate_corpus, CorpusConfig, CorpusManifest};
use mtl_speech::eval::{self, ScoredTrial};
use mtl_speech::losses::{aam_logits, aam_softmax_loss, cross_entropy, AAM_MARGIN, AAM_SCALE};
use mtl_speech::optim::{lr_at, partition, ClipPlacement, ParamGroup, ScheduleConfig};
use mtl_speech::selfcheck::{check_ctc, check_eer, check_model, check_ops};
use mtl_speech::tensor::{Graph, ParamSet, Tensor};
use mtl_speech::trainer::{combine_gradients, step_rng, Grads, Mode, RunConfig, TrainData, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pass(n: u32, what: &str) {
    println!("criterion {n}: PASS {what}");
}

#[test]
fn criterion_1_ctc_matches_path_enumeration() {
    let t = Instant::now();
    let r = check_ctc(500, 2024);
    assert!(r.passed(), "{r}");
    assert!(t.elapsed() < Duration::from_secs(60), "took {:?}", t.elapsed());
    pass(1, &format!("{}: worst {:.1e} (tol {:.0e}) in {:?}", r.name, r.worst, r.tolerance, t.elapsed()));
}

#[test]
fn criterion_2_gradients_match_finite_differences() {
    let t = Instant::now();
    let ops = check_ops(2024);
    let failed: Vec<String> = ops.iter().filter(|r| !r.passed()).map(|r| r.to_string()).collect();
    assert!(failed.is_empty(), "{failed:#?}");
    let worst_op = ops.iter().map(|r| r.worst).fold(0.0, f64::max);
    let mut worst_model: f64 = 0.0;
    for pooling in [mtl_speech::heads::Pooling::Mean, mtl_speech::heads::Pooling::First, mtl_speech::heads::Pooling::Ecapa] {
        let r = check_model(pooling, 2024);
        assert!(r.passed(), "{r}");
        worst_model = worst_model.max(r.worst);
    }
    assert!(t.elapsed() < Duration::from_secs(300), "took {:?}", t.elapsed());
    pass(
        2,
        &format!("{} ops worst {worst_op:.2e} (tol 1e-6), toy model worst {worst_model:.2e} (tol 1e-4)", ops.len()),
    );
}

#[test]
fn criterion_3_disjoint_step_is_weighted_sum_of_task_gradients() {
    let dir = tiny_corpus();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut lambdas = vec![0.0, 0.5, 0.9, 1.0];
    lambdas.extend((0..16).map(|_| rng.gen::<f64>()));
    let mut worst: f64 = 0.0;
    for (draw, &lambda_s) in lambdas.iter().enumerate() {
        let mut c = tiny_config(Mode::MtlDisjoint);
        c.losses.lambda_s = lambda_s;
        c.trainer.clip = f64::MAX;
        c.trainer.seed = draw as u64;
        let mut reference = trainer(dir.path(), c.clone());
        // Move the streams forward so draws see different batches.
        for _ in 0..draw % 4 {
            reference.next_speech_batch().unwrap();
            reference.next_speaker_batch().unwrap();
        }
        let speech = reference.next_speech_batch().unwrap();
        let speaker = reference.next_speaker_batch().unwrap();
        reference.prepare();
        let mut step = step_rng(c.trainer.seed, 0);
        let (_, gs) = reference.speech_gradients(&speech, &mut step).unwrap();
        let (_, gk) = reference.speaker_gradients(&speaker, &mut step).unwrap();
        let lambda_k = reference.weights().lambda_k;

        let mut t = trainer(dir.path(), c);
        let out = t.disjoint_step(&speech, &speaker).unwrap();
        let groups = partition(&t.params).unwrap();
        for (i, group) in groups.iter().enumerate() {
            if *group != ParamGroup::Base {
                continue;
            }
            let got = out.gradient[i].as_ref().expect("base is trainable");
            for (j, g) in got.iter().enumerate() {
                let want = lambda_k * gk[i].as_ref().map_or(0.0, |v| v[j]) + lambda_s * gs[i].as_ref().map_or(0.0, |v| v[j]);
                worst = worst.max((g - want).abs());
            }
        }
    }
    assert!(worst <= 1e-12, "largest deviation {worst:e}");
    pass(3, &format!("20 draws, largest deviation {worst:.1e} (tol 1e-12)"));
}

#[test]
fn criterion_4_aam_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cos: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let targets = [0, 4, 2];
    let mut g = Graph::new();
    let c = g.constant(Tensor::new(vec![3, 5], cos).unwrap());
    let aam = aam_softmax_loss(&mut g, c, &targets, 1.0, 0.0).unwrap();
    let ce = cross_entropy(&mut g, c, &targets).unwrap();
    let gap = (g.scalar_value(aam) - g.scalar_value(ce)).abs();
    assert!(gap <= 1e-12, "gap {gap:e}");

    let mut g = Graph::new();
    let c = g.constant(Tensor::new(vec![1, 3], vec![0.3, 1.0, -0.2]).unwrap());
    let logits = aam_logits(&mut g, c, &[1], AAM_SCALE, AAM_MARGIN).unwrap();
    let target = g.value(logits)[1];
    let want = 30.0 * 0.2f64.cos();
    assert!((target - want).abs() <= 1e-10, "{target} vs {want}");
    pass(4, &format!("s=1,m=0 gap {gap:.1e}; target logit {target:.12} vs 30cos(0.2)"));
}

#[test]
fn criterion_5_eer_matches_threshold_sweep() {
    let r = check_eer(200, 2024);
    assert!(r.passed(), "{r}");
    let st = |score: f64, positive: bool| ScoredTrial {
        positive,
        a: "a".into(),
        b: "b".into(),
        score,
    };
    let list = |pos: &[f64], neg: &[f64]| -> Vec<ScoredTrial> {
        pos.iter().map(|&s| st(s, true)).chain(neg.iter().map(|&s| st(s, false))).collect()
    };
    assert_eq!(eval::eer(&list(&[0.9, 0.8], &[0.1, 0.2])).unwrap(), 0.0);
    assert!((eval::eer(&list(&[0.9, 0.7, 0.4], &[0.5, 0.2, 0.1])).unwrap() - 1.0 / 3.0).abs() <= 1e-12);
    assert_eq!(eval::eer(&list(&[0.1, 0.2], &[0.9, 0.8])).unwrap(), 1.0);
    pass(5, &format!("{}: worst {:.1e} (tol {:.0e}); fixed examples 0, 1/3, 1", r.name, r.worst, r.tolerance));
}

#[test]
fn criterion_6_schedule_boundaries() {
    let cfg = ScheduleConfig {
        peak_lr: 1e-4,
        total_steps: 200_000,
        warmup_frac: 0.1,
        hold_frac: 0.4,
        decay_frac: 0.5,
        ..ScheduleConfig::default()
    };
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
    for (step, want) in [(0.0, 1e-6), (20_000.0, 1e-4), (100_000.0, 1e-4), (200_000.0, 5e-6)] {
        let got = lr_at(step, &cfg);
        assert!(rel(got, want) <= 1e-15, "lr({step}) = {got:e}, want {want:e}");
    }
    for b in [20_000.0, 100_000.0] {
        let (l, r) = (lr_at(b - 1e-6, &cfg), lr_at(b, &cfg));
        assert!(rel(l, r) < 1e-9, "jump at {b}: {l:e} vs {r:e}");
    }
    pass(6, "1e-6 / 1e-4 / 1e-4 / 5e-6 at 0 / 20k / 100k / 200k, continuous at 20k and 100k");
}

#[test]
fn criterion_7_protocol_invariants() {
    let _guard = heavy();
    let dir = tiny_corpus();

    // Freezing: base constant before step 3000, extractor constant always.
    let mut c = tiny_config(Mode::MtlDisjoint);
    c.trainer.freeze_base_until = 3000;
    c.trainer.schedule.total_steps = 3010;
    let mut t = trainer(dir.path(), c);
    let groups = partition(&t.params).unwrap();
    let pick = |p: &ParamSet, g: ParamGroup| -> Vec<Vec<f64>> {
        values(p).into_iter().zip(&groups).filter(|(_, x)| **x == g).map(|(v, _)| v).collect()
    };
    let base0 = pick(&t.params, ParamGroup::Base);
    let fe0 = pick(&t.params, ParamGroup::FeatureExtractor);
    let heads0 = pick(&t.params, ParamGroup::Speech);
    while t.step < 3000 {
        t.train_step().unwrap();
        assert!(pick(&t.params, ParamGroup::Base) == base0, "base moved at step {}", t.step);
    }
    assert_ne!(pick(&t.params, ParamGroup::Speech), heads0);
    for _ in 0..5 {
        t.train_step().unwrap();
    }
    assert_ne!(pick(&t.params, ParamGroup::Base), base0, "base should train from step 3000");
    assert!(pick(&t.params, ParamGroup::FeatureExtractor) == fe0);

    // Clip placement on the ±0.8 example.
    let mut ps = ParamSet::new();
    ps.add("w", Tensor::zeros(&[2]));
    let g: Grads = vec![Some(vec![0.8, -0.8])];
    let before = combine_gradients(&ps, &[(1.0, &g), (1.0, &g)], 1.0, ClipPlacement::BeforeSum);
    let after = combine_gradients(&ps, &[(1.0, &g), (1.0, &g)], 1.0, ClipPlacement::AfterSum);
    assert_eq!(before, vec![Some(vec![1.6, -1.6])]);
    assert_eq!(after, vec![Some(vec![1.0, -1.0])]);

    // Resume: 5 + save/load + 5 against 10 uninterrupted steps.
    let c = tiny_config(Mode::MtlDisjoint);
    let mut straight = trainer(dir.path(), c.clone());
    let mut split = trainer(dir.path(), c.clone());
    for _ in 0..5 {
        straight.train_step().unwrap();
        split.train_step().unwrap();
    }
    let ck = tempfile::tempdir().unwrap();
    split.save_checkpoint(ck.path()).unwrap();
    drop(split);
    let mut resumed = Trainer::resume(ck.path(), TrainData::load(dir.path(), &c).unwrap()).unwrap();
    for _ in 0..5 {
        straight.train_step().unwrap();
        resumed.train_step().unwrap();
    }
    let bits = |t: &Trainer| -> Vec<u64> { values(&t.params).concat().iter().map(|v| v.to_bits()).collect() };
    assert!(bits(&straight) == bits(&resumed), "resumed parameters differ");
    assert_eq!(straight.adam, resumed.adam);

    // Seed determinism over 200 steps.
    let run = |seed: u64| {
        let mut c = tiny_config(Mode::MtlDisjoint);
        c.trainer.seed = seed;
        let mut t = trainer(dir.path(), c);
        for _ in 0..200 {
            t.train_step().unwrap();
        }
        bits(&t)
    };
    let a = run(1);
    assert!(a == run(1), "same seed diverged");
    assert!(a != run(2), "different seeds agreed");
    pass(7, "freeze to step 3000, clip 1.6 vs 1.0, 10-step resume and 200-step runs bitwise equal");
}

/// Trains `mode` on the desk-scale corpus until its metrics clear the
/// thresholds, checking every 250 steps. Returns (steps, WER, EER, time).
fn desk_scale_run(corpus: &std::path::Path, mode: Mode) -> (u64, Option<f64>, Option<f64>, Duration) {
    let mut c = RunConfig::default();
    c.encoder.dropout = 0.0;
    c.encoder.layerdrop = 0.0;
    c.encoder.mask.time_prob = 0.0;
    c.encoder.mask.feature_prob = 0.0;
    c.losses.lambda_s = 0.5;
    let t = &mut c.trainer;
    t.mode = mode;
    t.crop_len_s = 10.0;
    t.speech_batch_samples = 3 * 96_000;
    t.speaker_batch_items = 6;
    t.freeze_base_until = 100;
    t.clip_placement = ClipPlacement::AfterSum;
    t.schedule.peak_lr = 1e-3;
    t.schedule.total_steps = 3000;
    t.total_steps = 5000;
    let data = TrainData::load(corpus, &c).unwrap();
    let train = data.train.clone();
    let mut tr = Trainer::new(c, data).unwrap();
    let start = Instant::now();
    let limit = Duration::from_secs(3600);
    loop {
        tr.train_step().unwrap();
        if !tr.step.is_multiple_of(250) {
            continue;
        }
        let wer = mode
            .uses_speech()
            .then(|| eval::transcribe_corpus(&tr.model, &tr.params, &train, &tr.data.vocab).unwrap());
        let eer = if mode.uses_speaker() { tr.validate().unwrap().eer } else { None };
        println!("{mode:?} step {} train WER {wer:?} val EER {eer:?} at {:?}", tr.step, start.elapsed());
        let done = wer.is_none_or(|w| w <= 0.15) && eer.is_none_or(|e| e <= 0.10);
        if done || tr.step >= 5000 || start.elapsed() >= limit {
            return (tr.step, wer, eer, start.elapsed());
        }
    }
}

#[test]
fn criterion_8_desk_scale_training() {
    let _guard = heavy();
    let dir = tempfile::tempdir().unwrap();
    let cfg = CorpusConfig::default();
    assert_eq!((cfg.n_speakers, cfg.utts_per_speaker, cfg.vocab.chars().count()), (20, 20, 12));
    generate_corpus(&cfg, dir.path()).unwrap();
    let mut lines = Vec::new();
    for mode in [Mode::MtlDisjoint, Mode::StlAsr, Mode::StlSkr] {
        let (steps, wer, eer, took) = desk_scale_run(dir.path(), mode);
        let ok = wer.is_none_or(|w| w <= 0.15) && eer.is_none_or(|e| e <= 0.10) && took < Duration::from_secs(3600);
        lines.push(format!("{mode:?}: {steps} steps, train WER {wer:?}, val EER {eer:?}, {took:.0?}"));
        assert!(ok, "{}", lines.join("; "));
    }
    pass(8, &lines.join("; "));
}

#[test]
fn criterion_9_cross_condition_harness() {
    let _guard = heavy();
    let corpus = tempfile::tempdir().unwrap();
    let cfg = CorpusConfig {
        n_speakers: 4,
        utts_per_speaker: 5,
        sessions_per_speaker: 2,
        vocab: "ab ".into(),
        min_duration_s: 2.5,
        max_duration_s: 3.5,
        val_utts_per_speaker: 2,
        heldout_speakers: 0,
        seed: 9,
    };
    generate_corpus(&cfg, corpus.path()).unwrap();
    let mut c = tiny_config(Mode::MtlDisjoint);
    c.trainer.crop_len_s = 2.0;
    c.trainer.speech_batch_samples = 2 * 56_000;
    c.trainer.total_steps = 10;
    let run = tempfile::tempdir().unwrap();
    mtl_speech::trainer::run(&c, corpus.path(), run.path(), false).unwrap();
    let ckpt = run.path().join("best");

    let val = corpus.path().join("val.csv");
    let rows = CorpusManifest::read(&val).unwrap().rows;
    let trials = mtl_speech::corpus::generate_trials(&rows, 4, 6, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let utts = CorpusManifest::read(&val).unwrap().load().unwrap();
    let out = tempfile::tempdir().unwrap();
    let conditions = ["first_2s".parse().unwrap(), "full".parse().unwrap()];
    let report = eval::evaluate(&ckpt, &utts, &trials, &conditions, true, out.path()).unwrap();
    let keys: Vec<&str> = report.eer_by_condition.keys().map(String::as_str).collect();
    assert_eq!(keys, ["first_2s", "full"]);
    let json: serde_json::Value = serde_json::from_slice(&fs::read(out.path().join("report.json")).unwrap()).unwrap();
    for key in ["wer", "eer_by_condition", "n_trials", "checkpoint", "conditions"] {
        assert!(json.get(key).is_some(), "report.json lacks {key}");
    }

    let csv = out.path().join("probe.csv");
    let probe = eval::probe(&ckpt, &utts, &trials, "val", &csv).unwrap();
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("layer,eer"));
    assert_eq!(lines.count(), c.encoder.n_layers + 1);
    let tap = c.heads.tap_layer(c.encoder.n_layers);
    let at_tap = probe.rows[tap].eer;
    let full = report.eer_by_condition["full"];
    assert!((at_tap - full).abs() <= 1e-12, "probe {at_tap} vs evaluate {full}");
    pass(
        9,
        &format!(
            "EER first_2s {:.3} full {full:.3}; probe has {} rows, layer {tap} matches",
            report.eer_by_condition["first_2s"],
            probe.rows.len()
        ),
    );
}
