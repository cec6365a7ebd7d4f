//! Acceptance suite. Prints one PASS/FAIL line per criterion and fails if any
//! criterion fails. Every expected value here is computed independently of
//! the library (closed forms, brute force or finite differences).
//!
//! ```text
//! cargo test -p av-affect --test acceptance -- --nocapture
//! ```

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use av_affect::audio::{compute_mel_spectrogram, MelConfig, TdnnConfig};
use av_affect::dataset::{
    deduplicate_validation, generate_synthetic_dataset, DatasetSplit, DedupMode, SynthConfig, Task,
    NUM_AUS, NUM_EXPRESSIONS,
};
use av_affect::losses::{
    focal_loss, focal_loss_logit_grad, weighted_bce, weighted_bce_logit_grad, BceParams, FocalParams,
};
use av_affect::metrics::{composite_score, MetricOptions, MetricReport};
use av_affect::nn::hash_params;
use av_affect::orchestrator::{
    cmd_evaluate, cmd_prepare_data, cmd_synth, cmd_train_sequence, cmd_train_visual, file_sha256,
    PipelineConfig, RunPaths,
};
use av_affect::sequence::{audio_row, predict_track, AudioSequenceModel, SequenceConfig, VideoTrack};
use av_affect::visual::{
    train_multitask_with, AlternationMode, AlternationSchedule, LossConfig, ResidualCnnConfig,
    VisualModel, VisualTrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn central_diff(f: impl Fn(&[f64]) -> f64, z: &[f64], h: f64) -> Vec<f64> {
    (0..z.len())
        .map(|i| {
            let mut a = z.to_vec();
            let mut b = z.to_vec();
            a[i] += h;
            b[i] -= h;
            (f(&a) - f(&b)) / (2.0 * h)
        })
        .collect()
}

fn metric_arithmetic() -> Outcome {
    let cases = [
        (Task::Au, 0.545, 0.879, 0.712),
        (Task::Expression, 0.402, 0.630, 0.477),
        (Task::Au, 0.40, 0.22, 0.31),
        (Task::Expression, 0.30, 0.50, 0.366),
    ];
    let mut worst = 0.0f64;
    for (task, f1, acc, expected) in cases {
        worst = worst.max((composite_score(task, f1, acc) - expected).abs());
    }
    outcome(worst <= 5e-3, format!("max |error| {worst:.2e} (tol 5e-3)"))
}

fn loss_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut eq_ce = 0.0f64;
    let mut eq_bce = 0.0f64;
    let ce = FocalParams::cross_entropy();
    let plain = BceParams::unweighted();
    for _ in 0..1000 {
        let z: Vec<f64> = (0..NUM_EXPRESSIONS).map(|_| rng.gen_range(-6.0..6.0)).collect();
        let t = rng.gen_range(0..NUM_EXPRESSIONS);
        let p = softmax(&z);
        let oracle = -p[t].ln();
        eq_ce = eq_ce.max((focal_loss(&p, t, &ce).unwrap() - oracle).abs());

        let probs: Vec<f64> = (0..NUM_AUS).map(|_| rng.gen_range(0.001..0.999)).collect();
        let targets: Vec<u8> = (0..NUM_AUS).map(|_| rng.gen_range(0..2u8)).collect();
        let oracle = -probs
            .iter()
            .zip(&targets)
            .map(|(&p, &t)| t as f64 * p.ln() + (1.0 - t as f64) * (1.0 - p).ln())
            .sum::<f64>()
            / NUM_AUS as f64;
        eq_bce = eq_bce.max((weighted_bce(&probs, &targets, &plain).unwrap() - oracle).abs());
    }

    let h = 1e-4;
    let mut grad_bce = 0.0f64;
    let mut grad_focal = 0.0f64;
    for _ in 0..200 {
        let mut w = [1.0; NUM_AUS];
        for v in w.iter_mut() {
            *v = rng.gen_range(0.5..10.0);
        }
        let bp = BceParams::new(w).unwrap();
        let z: Vec<f64> = (0..NUM_AUS).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let targets: Vec<u8> = (0..NUM_AUS).map(|_| rng.gen_range(0..2u8)).collect();
        let f = |z: &[f64]| {
            let p: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();
            weighted_bce(&p, &targets, &bp).unwrap()
        };
        let numeric = central_diff(f, &z, h);
        grad_bce = grad_bce.max(rel_err(&weighted_bce_logit_grad(&z, &targets, &bp).unwrap(), &numeric));

        let mut alpha = [1.0; NUM_EXPRESSIONS];
        for a in alpha.iter_mut() {
            *a = rng.gen_range(0.1..3.0);
        }
        let gamma = [0.0, 0.5, 1.0, 2.0, 3.7][rng.gen_range(0..5)];
        let fp = FocalParams::new(alpha, gamma).unwrap();
        let z: Vec<f64> = (0..NUM_EXPRESSIONS).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let t = rng.gen_range(0..NUM_EXPRESSIONS);
        let f = |z: &[f64]| focal_loss(&softmax(z), t, &fp).unwrap();
        let numeric = central_diff(f, &z, h);
        grad_focal = grad_focal.max(rel_err(&focal_loss_logit_grad(&z, t, &fp).unwrap(), &numeric));
    }
    let pass = eq_ce <= 1e-6 && eq_bce <= 1e-6 && grad_bce < 1e-4 && grad_focal < 1e-4;
    outcome(
        pass,
        format!(
            "focal(g=0,a=1) vs CE {eq_ce:.1e}, bce(w=1) vs BCE {eq_bce:.1e} (tol 1e-6); \
             grad rel err bce {grad_bce:.1e}, focal {grad_focal:.1e} (tol 1e-4)"
        ),
    )
}

fn alternation_isolation() -> Outcome {
    let synth = SynthConfig {
        n_videos: 2,
        n_val_videos: 1,
        frames_per_video: 40,
        ..SynthConfig::default()
    };
    let ds = generate_synthetic_dataset(&synth, 21).unwrap();
    let au = ds.train.task_view(Task::Au);
    let expr = ds.train.task_view(Task::Expression);
    let losses = LossConfig::from_split(&ds.train, 10.0, 2.0).unwrap();
    let mut notes = Vec::new();
    let mut pass = true;
    // momentum 0.9 checks that stale velocity never leaks into the idle head;
    // momentum 0 ties every backbone change to a nonzero gradient of that step
    for mode in [AlternationMode::EpochByEpoch, AlternationMode::BatchByBatch] {
        for momentum in [0.9, 0.0] {
            let mut model = VisualModel::residual(
                ResidualCnnConfig {
                    widths: vec![4, 8],
                    embed_dim: 512,
                },
                5,
            )
            .unwrap();
            let mut cfg = VisualTrainConfig {
                batch_size: 8,
                epochs: 100,
                max_steps: Some(20),
                schedule: AlternationSchedule {
                    mode,
                    first_task: Task::Expression,
                },
                ..VisualTrainConfig::default()
            };
            cfg.optimizer.momentum = momentum;
            let snap = |m: &VisualModel| {
                (
                    hash_params(&m.backbone_params()).unwrap(),
                    hash_params(&m.head_params(Task::Au)).unwrap(),
                    hash_params(&m.head_params(Task::Expression)).unwrap(),
                )
            };
            let mut prev = snap(&model);
            let mut violations = 0;
            let mut tasks = Vec::new();
            let history = train_multitask_with(&mut model, &au, &expr, &cfg, &losses, |rec, m| {
                let now = snap(m);
                let (active_before, idle_before, active_now, idle_now) = match rec.task {
                    Task::Au => (&prev.1, &prev.2, &now.1, &now.2),
                    Task::Expression => (&prev.2, &prev.1, &now.2, &now.1),
                };
                if idle_before != idle_now || active_before == active_now || prev.0 == now.0 {
                    violations += 1;
                }
                tasks.push(rec.task);
                prev = now;
                Ok(())
            })
            .unwrap();
            let both = tasks.contains(&Task::Au) && tasks.contains(&Task::Expression);
            let ok = violations == 0 && history.steps.len() == 20 && both;
            pass &= ok;
            notes.push(format!("{mode:?}/m={momentum}: {} steps, {violations} violations", history.steps.len()));
        }
    }
    outcome(pass, notes.join("; "))
}

fn mel_framing() -> Outcome {
    let cfg = MelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut bad = 0;
    for _ in 0..50 {
        let n = rng.gen_range(160..48_000usize);
        let wave: Vec<f32> = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let spec = compute_mel_spectrogram(&wave, 16_000, &cfg).unwrap();
        if spec.frames() != (n - 160) / 80 + 1 {
            bad += 1;
        }
    }
    let one_second = compute_mel_spectrogram(&vec![0.1f32; 16_000], 16_000, &cfg).unwrap().frames();
    outcome(
        bad == 0 && one_second == 199,
        format!("{bad}/50 mismatches, 1 s -> T={one_second}"),
    )
}

fn shape_alignment() -> Outcome {
    let frames = 73;
    let synth = SynthConfig {
        n_videos: 1,
        n_val_videos: 0,
        frames_per_video: frames,
        ..SynthConfig::default()
    };
    let ds = generate_synthetic_dataset(&synth, 8).unwrap();
    let video = ds.train.videos.values().next().unwrap();
    let mut visual = VisualModel::residual(
        ResidualCnnConfig {
            widths: vec![4],
            embed_dim: 512,
        },
        0,
    )
    .unwrap();
    visual.freeze();
    let tdnn = TdnnConfig {
        hidden: 16,
        ..TdnnConfig::default()
    };
    let seq = SequenceConfig {
        ff_dim: 64,
        ..SequenceConfig::default()
    };
    let model = AudioSequenceModel::new(MelConfig::default(), tdnn, seq, 0).unwrap();
    let track = VideoTrack::from_video(video, (0..frames).collect(), &visual, &model.mel).unwrap();
    let preds = predict_track(&track, &model).unwrap();
    let width = track.window(60, 13, 30, &model.audio, &model.mel).unwrap().width();
    let row = audio_row(30, 30.0, 0.005, 10_000);
    outcome(
        preds.len() == frames && width == 1024 && row == 200,
        format!("{frames} frames -> {} predictions, fused width {width}, t=1.0 s -> row {row}", preds.len()),
    )
}

fn e2e_config(root: &std::path::Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.data_dir = root.join("data");
    cfg.out_dir = root.join("run");
    for (k, v) in [
        ("visual.widths", "8,16,32,64"),
        ("audio.hidden", "128"),
        ("sequence.steps", "150"),
        ("sequence.lr", "0.02"),
        ("sequence.clip_norm", "1.0"),
    ] {
        cfg.apply(k, v).unwrap();
    }
    cfg
}

struct E2e {
    elapsed: Duration,
    au: f64,
    expr: f64,
    report: String,
    visual_ckpt: String,
    sequence_ckpt: String,
    visual_frozen: bool,
}

fn run_e2e(root: &std::path::Path) -> av_affect::Result<E2e> {
    let cfg = e2e_config(root);
    let paths = RunPaths::new(&cfg.out_dir);
    let t = Instant::now();
    cmd_synth(&cfg)?;
    cmd_prepare_data(&cfg)?;
    let vis = cmd_train_visual(&cfg)?;
    let ckpt_after_visual = file_sha256(&paths.visual_checkpoint())?;
    let seq = cmd_train_sequence(&cfg)?;
    let eval = cmd_evaluate(&cfg)?;
    let elapsed = t.elapsed();
    let visual_ckpt = file_sha256(&paths.visual_checkpoint())?;
    let reloaded = VisualModel::load(&paths.visual_checkpoint())?.hash()?;
    let visual_frozen = visual_ckpt == ckpt_after_visual
        && seq.visual_hash_before == seq.visual_hash_after
        && reloaded == vis.hash;
    let report_path = paths.eval_dir().join("report.json");
    Ok(E2e {
        elapsed,
        au: eval.au.composite,
        expr: eval.expr.composite,
        report: std::fs::read_to_string(&report_path).map_err(|e| av_affect::Error::io(&report_path, e))?,
        visual_ckpt,
        sequence_ckpt: file_sha256(&paths.sequence_checkpoint())?,
        visual_frozen,
    })
}

fn metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let opts = MetricOptions::default();
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(1..=1000usize);
        let density: f64 = rng.gen_range(0.0..1.0);
        let flip: f64 = rng.gen_range(0.0..0.6);
        let mut labels = Vec::with_capacity(n);
        let mut preds = Vec::with_capacity(n);
        for _ in 0..n {
            let mut l = [0u8; NUM_AUS];
            let mut p = [0u8; NUM_AUS];
            for k in 0..NUM_AUS {
                l[k] = rng.gen_bool(density) as u8;
                p[k] = if rng.gen_bool(flip) { 1 - l[k] } else { l[k] };
            }
            labels.push(l);
            preds.push(p);
        }
        let report = MetricReport::au(&preds, &labels, &opts).unwrap();
        let mut correct = 0usize;
        for k in 0..NUM_AUS {
            let mut m = [[0usize; 2]; 2];
            for (p, l) in preds.iter().zip(&labels) {
                m[l[k] as usize][p[k] as usize] += 1;
            }
            correct += m[0][0] + m[1][1];
            let (tp, fp, fn_) = (m[1][1], m[0][1], m[1][0]);
            let f1 = if tp + fp + fn_ == 0 {
                1.0
            } else {
                2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
            };
            worst = worst.max((report.per_class_f1[k] - f1).abs());
        }
        let acc = correct as f64 / (n * NUM_AUS) as f64;
        worst = worst.max((report.total_accuracy - acc).abs());

        // sometimes restrict to a few classes so absent classes are exercised
        let classes = if rng.gen_bool(0.3) { rng.gen_range(1..NUM_EXPRESSIONS) } else { NUM_EXPRESSIONS };
        let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..classes) as u8).collect();
        let preds: Vec<u8> = labels
            .iter()
            .map(|&l| if rng.gen_bool(flip) { rng.gen_range(0..classes) as u8 } else { l })
            .collect();
        let report = MetricReport::expression(&preds, &labels, &opts).unwrap();
        let mut m = [[0usize; NUM_EXPRESSIONS]; NUM_EXPRESSIONS];
        for (&p, &l) in preds.iter().zip(&labels) {
            m[l as usize][p as usize] += 1;
        }
        let trace: usize = (0..NUM_EXPRESSIONS).map(|c| m[c][c]).sum();
        for c in 0..NUM_EXPRESSIONS {
            let tp = m[c][c];
            let row: usize = m[c].iter().sum();
            let col: usize = (0..NUM_EXPRESSIONS).map(|r| m[r][c]).sum();
            let (fp, fn_) = (col - tp, row - tp);
            let f1 = if tp + fp + fn_ == 0 {
                1.0
            } else {
                2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
            };
            worst = worst.max((report.per_class_f1[c] - f1).abs());
        }
        worst = worst.max((report.total_accuracy - trace as f64 / n as f64).abs());
    }
    outcome(worst <= 1e-12, format!("max |error| {worst:.1e} over 100 instances (tol 1e-12)"))
}

fn plant_overlap(val: &DatasetSplit, train: &DatasetSplit, ids: &[String]) -> DatasetSplit {
    let mut out = val.clone();
    for id in ids {
        out.videos.insert(id.clone(), train.videos[id].clone());
        out.annotations
            .extend(train.annotations.iter().filter(|a| &a.video_id == id).cloned());
    }
    out
}

fn dedup() -> Outcome {
    let ds = generate_synthetic_dataset(&SynthConfig::default(), 4).unwrap();
    let au_train = ds.train.task_view(Task::Au);
    let expr_train = ds.train.task_view(Task::Expression);
    let planted: Vec<String> = expr_train.videos.keys().take(5).cloned().collect();
    let au_val = plant_overlap(&ds.val.task_view(Task::Au), &ds.train.task_view(Task::Au), &planted);
    let expr_val = ds.val.task_view(Task::Expression);
    let mut notes = Vec::new();
    let mut pass = true;
    for mode in [DedupMode::Video, DedupMode::Frame] {
        let out = deduplicate_validation(&au_train, &au_val, &expr_train, &expr_val, mode);
        let left_ids: BTreeSet<&str> = out.au_val.annotations.iter().map(|a| a.video_id.as_str()).collect();
        let train_ids: BTreeSet<&str> = expr_train.annotations.iter().map(|a| a.video_id.as_str()).collect();
        let left_keys: BTreeSet<(&str, usize)> = out.au_val.annotations.iter().map(|a| a.key()).collect();
        let train_keys: BTreeSet<(&str, usize)> = expr_train.annotations.iter().map(|a| a.key()).collect();
        let empty = match mode {
            DedupMode::Video => left_ids.is_disjoint(&train_ids),
            DedupMode::Frame => left_keys.is_disjoint(&train_keys),
        };
        let reported: BTreeSet<&String> = out.report.au_val_removed_videos.iter().collect();
        let expected: BTreeSet<&String> = planted.iter().collect();
        let ok = empty
            && reported == expected
            && out.report.au_val_removed_frames == 5 * 60
            && out.au_val.annotations.len() == ds.val.count(Task::Au);
        pass &= ok;
        notes.push(format!(
            "{mode:?}: {} videos / {} frames reported, intersection empty: {empty}",
            reported.len(),
            out.report.au_val_removed_frames
        ));
    }
    outcome(pass, notes.join("; "))
}

#[test]
fn acceptance() {
    let mut results: Vec<(&str, Outcome)> = vec![
        ("metric arithmetic reproduction", metric_arithmetic()),
        ("loss suite", loss_suite()),
        ("alternation isolation", alternation_isolation()),
        ("mel framing", mel_framing()),
        ("shape/alignment suite", shape_alignment()),
        ("metrics oracle", metrics_oracle()),
        ("dedup", dedup()),
    ];

    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = run_e2e(a.path());
    let second = run_e2e(b.path());
    match (first, second) {
        (Ok(x), Ok(y)) => {
            results.push((
                "freeze contract",
                outcome(x.visual_frozen && y.visual_frozen, "visual checkpoint and parameter hash unchanged by sequence training and evaluation"),
            ));
            let limit = Duration::from_secs(600);
            let deterministic =
                x.report == y.report && x.visual_ckpt == y.visual_ckpt && x.sequence_ckpt == y.sequence_ckpt;
            results.push((
                "end-to-end learning",
                outcome(
                    x.au >= 0.75 && x.expr >= 0.60 && x.elapsed < limit && y.elapsed < limit && deterministic,
                    format!(
                        "AU composite {:.4} (>= 0.75), expression composite {:.4} (>= 0.60), \
                         runs {:.0?} / {:.0?} (< 10 min), identical reports and checkpoints: {deterministic}",
                        x.au, x.expr, x.elapsed, y.elapsed
                    ),
                ),
            ));
        }
        (x, y) => {
            let err = x.err().or(y.err()).map(|e| e.to_string()).unwrap_or_default();
            results.push(("freeze contract", outcome(false, format!("pipeline failed: {err}"))));
            results.push(("end-to-end learning", outcome(false, format!("pipeline failed: {err}"))));
        }
    }

    println!();
    println!("NOTE paper's absolute Aff-Wild2 validation scores: not reproducible at desk scale, replaced by the criteria below");
    for (name, o) in &results {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed: Vec<&str> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
