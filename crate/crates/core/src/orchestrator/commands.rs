use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{PipelineConfig, Stage};
use super::manifest::{dir_sha256, file_sha256, RunLock, RunManifest, StageRecord};
use crate::audio::{MelConfig, TdnnConfig};
use crate::dataset::{
    compute_balance_stats, deduplicate_validation, filter_missing_crops, generate_synthetic_dataset,
    merge_auxiliary_au, parse_annotations, read_fps_table, write_stats_csv, BalanceStats, DatasetSplit,
    DedupReport, FrameAnnotation, SyntheticDataset, Task, DEFAULT_FPS,
};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::sequence::{
    evaluate_split, train_sequence, write_prediction_csv, write_probability_csv, AudioSequenceModel,
    SequenceConfig, SequenceTrainConfig,
};
use crate::visual::{
    train_multitask, AugmentConfig, LossConfig, ResidualCnnConfig, TrainHistory, VisualModel,
    VisualTrainConfig, VISUAL_FEATURE_DIM,
};

/// Locations of everything a run writes below its output directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn prepared(&self) -> PathBuf {
        self.root.join("prepared")
    }

    pub fn prepared_split(&self, name: &str) -> PathBuf {
        self.prepared().join(format!("{name}.json"))
    }

    pub fn dedup_report(&self) -> PathBuf {
        self.prepared().join("dedup_report.json")
    }

    pub fn au_stats(&self) -> PathBuf {
        self.prepared().join("au_stats.csv")
    }

    pub fn expr_stats(&self) -> PathBuf {
        self.prepared().join("expr_stats.csv")
    }

    pub fn visual_checkpoint(&self) -> PathBuf {
        self.root.join("visual").join("visual.ckpt")
    }

    pub fn visual_history(&self) -> PathBuf {
        self.root.join("visual").join("history.csv")
    }

    pub fn sequence_checkpoint(&self) -> PathBuf {
        self.root.join("sequence").join("audio_sequence.ckpt")
    }

    pub fn sequence_history(&self) -> PathBuf {
        self.root.join("sequence").join("history.csv")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn config_snapshot(&self) -> PathBuf {
        self.root.join("config.txt")
    }
}

const SPLITS: [&str; 6] = ["train", "val", "au_train", "au_val", "expr_train", "expr_val"];

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Holds the run lock and the manifest while a command runs.
struct Run {
    paths: RunPaths,
    manifest: RunManifest,
    _lock: RunLock,
}

impl Run {
    fn open(cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let paths = RunPaths::new(&cfg.out_dir);
        let lock = RunLock::acquire(&paths.root)?;
        let mut manifest = RunManifest::load_or_default(&paths.root)?;
        manifest.config = cfg
            .entries()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        std::fs::write(paths.config_snapshot(), cfg.to_text())
            .map_err(|e| Error::io(paths.config_snapshot(), e))?;
        Ok(Self {
            paths,
            manifest,
            _lock: lock,
        })
    }

    fn record(&mut self, path: &Path) -> Result<()> {
        self.manifest.record_file(&self.paths.root, path)
    }

    fn finish(mut self) -> Result<()> {
        let snap = self.paths.config_snapshot();
        self.record(&snap)?;
        self.manifest.save(&self.paths.root)
    }
}

/// Write the synthetic corpus to `cfg.data_dir`.
pub fn cmd_synth(cfg: &PipelineConfig) -> Result<SyntheticDataset> {
    let ds = generate_synthetic_dataset(&cfg.synth, cfg.stage_seed(Stage::Synth))?;
    ds.write_to(&cfg.data_dir)?;
    log::info!(
        "synthetic dataset: {} train / {} val videos in {}",
        ds.train.videos.len(),
        ds.val.videos.len(),
        cfg.data_dir.display()
    );
    Ok(ds)
}

fn existing(p: PathBuf) -> Option<PathBuf> {
    p.is_dir().then_some(p)
}

/// Parse `<data_dir>/<name>/{au,expr}` with frame paths under the frames dir.
pub fn load_raw_split(cfg: &PipelineConfig, name: &str) -> Result<DatasetSplit> {
    let base = cfg.data_dir.join(name);
    let au = existing(base.join("au"));
    let expr = existing(base.join("expr"));
    if au.is_none() && expr.is_none() {
        return Err(Error::Data(format!(
            "missing annotation directories {0}/au and {0}/expr",
            base.display()
        )));
    }
    let mut split = parse_annotations(name, au.as_deref(), expr.as_deref())?;
    split.rebase_frames(&cfg.frames_dir());
    let fps_table = cfg.data_dir.join("videos.csv");
    if fps_table.exists() {
        split.set_fps(&read_fps_table(&fps_table)?, DEFAULT_FPS);
    }
    Ok(split)
}

/// Annotations of `au` (AU labels only) and `expr` (expression labels only),
/// merged frame by frame.
pub fn combine_task_views(name: &str, au: &DatasetSplit, expr: &DatasetSplit) -> DatasetSplit {
    let mut frames: BTreeMap<(String, usize), FrameAnnotation> = BTreeMap::new();
    for a in au.annotations.iter().filter(|a| a.au.is_some()) {
        let e = frames
            .entry((a.video_id.clone(), a.frame_index))
            .or_insert_with(|| FrameAnnotation {
                video_id: a.video_id.clone(),
                frame_index: a.frame_index,
                au: None,
                expr: None,
            });
        e.au = a.au;
    }
    for a in expr.annotations.iter().filter(|a| a.expr.is_some()) {
        let e = frames
            .entry((a.video_id.clone(), a.frame_index))
            .or_insert_with(|| FrameAnnotation {
                video_id: a.video_id.clone(),
                frame_index: a.frame_index,
                au: None,
                expr: None,
            });
        e.expr = a.expr;
    }
    let mut out = DatasetSplit::new(name);
    out.annotations = frames.into_values().collect();
    for s in [au, expr] {
        for (k, v) in &s.videos {
            out.videos.entry(k.clone()).or_insert_with(|| v.clone());
        }
    }
    out.prune_videos();
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepareSummary {
    pub dedup: DedupReport,
    pub missing_crops: usize,
    pub aux_frames: usize,
    pub stats: BalanceStats,
    pub counts: BTreeMap<String, usize>,
}

/// Parse, drop frames without crops, merge auxiliary AU data, de-duplicate
/// validation against the other task's training set, and write the cleaned
/// splits and label statistics.
pub fn cmd_prepare_data(cfg: &PipelineConfig) -> Result<PrepareSummary> {
    let mut run = Run::open(cfg)?;
    let train = load_raw_split(cfg, "train")?;
    let val = load_raw_split(cfg, "val")?;
    let (mut train, missing_train) = filter_missing_crops(&train);
    let (val, missing_val) = filter_missing_crops(&val);

    let mut aux_frames = 0;
    let aux_dir = cfg.aux_au_dir();
    if aux_dir.is_dir() {
        let mut aux = parse_annotations("aux", Some(&aux_dir), None)?;
        aux.rebase_frames(&cfg.frames_dir());
        let (aux, _) = filter_missing_crops(&aux);
        aux_frames = aux.annotations.len();
        train = merge_auxiliary_au(&train, &aux)?;
        log::info!("merged {aux_frames} auxiliary AU frames");
    }

    train.name = "train".into();
    let au_train = train.task_view(Task::Au);
    let expr_train = train.task_view(Task::Expression);
    let outcome = deduplicate_validation(
        &au_train,
        &val.task_view(Task::Au),
        &expr_train,
        &val.task_view(Task::Expression),
        cfg.dedup,
    );
    let mut au_train = au_train;
    let mut expr_train = expr_train;
    au_train.name = "au_train".into();
    expr_train.name = "expr_train".into();
    let mut au_val = outcome.au_val;
    let mut expr_val = outcome.expr_val;
    au_val.name = "au_val".into();
    expr_val.name = "expr_val".into();
    let val = combine_task_views("val", &au_val, &expr_val);

    for (s, what) in [(&au_train, "AU training"), (&expr_train, "expression training")] {
        if s.annotations.is_empty() {
            return Err(Error::Data(format!("{what} split is empty after preparation")));
        }
    }

    let stats = compute_balance_stats(&train);
    let paths = run.paths.clone();
    create_dir(&paths.prepared())?;
    let mut counts = BTreeMap::new();
    for s in [&train, &val, &au_train, &au_val, &expr_train, &expr_val] {
        let p = paths.prepared_split(&s.name);
        write_json(&p, s)?;
        run.record(&p)?;
        counts.insert(s.name.clone(), s.annotations.len());
    }
    write_json(&paths.dedup_report(), &outcome.report)?;
    write_stats_csv(&stats, &paths.au_stats(), &paths.expr_stats())?;
    for p in [paths.dedup_report(), paths.au_stats(), paths.expr_stats()] {
        run.record(&p)?;
    }
    let mut inputs = BTreeMap::new();
    for name in ["train", "val"] {
        let d = cfg.data_dir.join(name);
        inputs.insert(d.display().to_string(), dir_sha256(&d)?);
    }
    run.manifest.record_stage(
        "prepare",
        StageRecord {
            checkpoint: None,
            inputs,
            seed: cfg.seed,
        },
    );
    log::info!(
        "prepared data: dedup removed {} val frames ({} AU videos, {} expression videos)",
        outcome.report.total_removed_frames(),
        outcome.report.au_val_removed_videos.len(),
        outcome.report.expr_val_removed_videos.len()
    );
    run.finish()?;
    Ok(PrepareSummary {
        dedup: outcome.report,
        missing_crops: missing_train + missing_val,
        aux_frames,
        stats,
        counts,
    })
}

/// Label statistics of the prepared training split (or of the raw training
/// annotations when data has not been prepared yet).
pub fn cmd_stats(cfg: &PipelineConfig) -> Result<BalanceStats> {
    let paths = RunPaths::new(&cfg.out_dir);
    let train = if paths.prepared_split("train").exists() {
        load_prepared(&paths, "train")?
    } else {
        load_raw_split(cfg, "train")?
    };
    let stats = compute_balance_stats(&train);
    create_dir(&paths.prepared())?;
    write_stats_csv(&stats, &paths.au_stats(), &paths.expr_stats())?;
    Ok(stats)
}

pub fn load_prepared(paths: &RunPaths, name: &str) -> Result<DatasetSplit> {
    debug_assert!(SPLITS.contains(&name));
    let p = paths.prepared_split(name);
    if !p.exists() {
        return Err(Error::Data(format!(
            "prepared split {} not found; run prepare-data first",
            p.display()
        )));
    }
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let split: DatasetSplit = serde_json::from_str(&text)?;
    split.validate()?;
    Ok(split)
}

fn loss_config(cfg: &PipelineConfig, train: &DatasetSplit) -> Result<LossConfig> {
    if cfg.loss.class_weights {
        LossConfig::from_split(train, cfg.loss.w_max, cfg.loss.gamma)
    } else {
        let mut l = LossConfig::default();
        l.focal.gamma = cfg.loss.gamma;
        Ok(l)
    }
}

#[derive(Debug, Clone)]
pub struct VisualRunSummary {
    pub history: TrainHistory,
    pub checkpoint: PathBuf,
    pub hash: String,
}

pub fn visual_train_config(cfg: &PipelineConfig) -> VisualTrainConfig {
    VisualTrainConfig {
        optimizer: cfg.visual.optimizer,
        batch_size: cfg.visual.batch_size,
        epochs: cfg.visual.epochs,
        schedule: cfg.schedule(),
        augment: if cfg.visual.augment {
            AugmentConfig::default()
        } else {
            AugmentConfig::none()
        },
        seed: cfg.stage_seed(Stage::Visual),
        max_steps: cfg.visual.max_steps,
        workers: cfg.workers,
    }
}

pub fn cmd_train_visual(cfg: &PipelineConfig) -> Result<VisualRunSummary> {
    let mut run = Run::open(cfg)?;
    let paths = run.paths.clone();
    let au_train = load_prepared(&paths, "au_train")?;
    let expr_train = load_prepared(&paths, "expr_train")?;
    let train = load_prepared(&paths, "train")?;
    let losses = loss_config(cfg, &train)?;
    let seed = cfg.stage_seed(Stage::Visual);
    let mut model = VisualModel::residual(
        ResidualCnnConfig {
            widths: cfg.visual.widths.clone(),
            embed_dim: VISUAL_FEATURE_DIM,
        },
        seed,
    )?;
    let history = train_multitask(&mut model, &au_train, &expr_train, &visual_train_config(cfg), &losses)?;

    let ckpt = paths.visual_checkpoint();
    create_dir(ckpt.parent().expect("has parent"))?;
    model.save(&ckpt)?;
    history.write_csv(&paths.visual_history())?;
    run.record(&ckpt)?;
    run.record(&paths.visual_history())?;
    let mut inputs = BTreeMap::new();
    for name in ["au_train", "expr_train", "train"] {
        let p = paths.prepared_split(name);
        inputs.insert(p.display().to_string(), file_sha256(&p)?);
    }
    run.manifest.record_stage(
        "visual",
        StageRecord {
            checkpoint: Some(ckpt.display().to_string()),
            inputs,
            seed,
        },
    );
    let hash = model.hash()?;
    log::info!(
        "visual stage: {} steps, final losses AU {:?} / expression {:?}",
        history.steps.len(),
        history.final_loss(Task::Au),
        history.final_loss(Task::Expression)
    );
    run.finish()?;
    Ok(VisualRunSummary {
        history,
        checkpoint: ckpt,
        hash,
    })
}

fn load_frozen_visual(paths: &RunPaths) -> Result<VisualModel> {
    let p = paths.visual_checkpoint();
    if !p.exists() {
        return Err(Error::Checkpoint(format!(
            "visual checkpoint {} not found; run train-visual first",
            p.display()
        )));
    }
    let mut m = VisualModel::load(&p)?;
    m.freeze();
    Ok(m)
}

#[derive(Debug, Clone)]
pub struct SequenceRunSummary {
    pub history: TrainHistory,
    pub checkpoint: PathBuf,
    pub visual_hash_before: String,
    pub visual_hash_after: String,
}

pub fn sequence_model_config(cfg: &PipelineConfig) -> (TdnnConfig, SequenceConfig) {
    let s = &cfg.sequence;
    let tdnn = TdnnConfig {
        hidden: s.audio_hidden,
        ..TdnnConfig::default()
    };
    let seq = SequenceConfig {
        heads: s.heads,
        ff_dim: s.ff_dim,
        dropout: s.dropout,
        window: s.window,
        encoder_layers: s.encoder_layers,
        positional_encoding: s.positional_encoding,
        ..SequenceConfig::default()
    };
    (tdnn, seq)
}

pub fn cmd_train_sequence(cfg: &PipelineConfig) -> Result<SequenceRunSummary> {
    let mut run = Run::open(cfg)?;
    let paths = run.paths.clone();
    let visual = load_frozen_visual(&paths)?;
    let visual_file_hash = file_sha256(&paths.visual_checkpoint())?;
    let before = visual.hash()?;
    let mut train = load_prepared(&paths, "train")?;
    train.attach_audio(&cfg.audio_dir())?;
    let losses = loss_config(cfg, &train)?;
    let seed = cfg.stage_seed(Stage::Sequence);
    let (tdnn, seq) = sequence_model_config(cfg);
    let mut model = AudioSequenceModel::new(MelConfig::default(), tdnn, seq, seed)?;
    let tcfg = SequenceTrainConfig {
        optimizer: cfg.sequence.optimizer,
        steps: cfg.sequence.steps,
        batch_videos: cfg.sequence.batch_videos,
        first_task: cfg.visual.first_task,
        seed,
        workers: cfg.workers,
    };
    let history = train_sequence(&train, &visual, &mut model, &tcfg, &losses)?;
    let after = visual.hash()?;
    if after != before || file_sha256(&paths.visual_checkpoint())? != visual_file_hash {
        return Err(Error::contract("visual checkpoint changed during sequence training"));
    }

    let ckpt = paths.sequence_checkpoint();
    create_dir(ckpt.parent().expect("has parent"))?;
    model.save(&ckpt)?;
    history.write_csv(&paths.sequence_history())?;
    run.record(&ckpt)?;
    run.record(&paths.sequence_history())?;
    let mut inputs = BTreeMap::new();
    inputs.insert(paths.visual_checkpoint().display().to_string(), visual_file_hash);
    let p = paths.prepared_split("train");
    inputs.insert(p.display().to_string(), file_sha256(&p)?);
    run.manifest.record_stage(
        "sequence",
        StageRecord {
            checkpoint: Some(ckpt.display().to_string()),
            inputs,
            seed,
        },
    );
    log::info!(
        "sequence stage: {} steps, final losses AU {:?} / expression {:?}",
        history.steps.len(),
        history.final_loss(Task::Au),
        history.final_loss(Task::Expression)
    );
    run.finish()?;
    Ok(SequenceRunSummary {
        history,
        checkpoint: ckpt,
        visual_hash_before: before,
        visual_hash_after: after,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub au: MetricReport,
    pub expr: MetricReport,
    pub videos: usize,
}

/// Inference over the prepared validation split with per-video prediction
/// files and JSON/CSV metric reports.
pub fn cmd_evaluate(cfg: &PipelineConfig) -> Result<EvalSummary> {
    let mut run = Run::open(cfg)?;
    let paths = run.paths.clone();
    let visual = load_frozen_visual(&paths)?;
    let sp = paths.sequence_checkpoint();
    if !sp.exists() {
        return Err(Error::Checkpoint(format!(
            "sequence checkpoint {} not found; run train-audio-sequence first",
            sp.display()
        )));
    }
    let model = AudioSequenceModel::load(&sp)?;
    if let Some(h) = &model.visual_hash {
        if *h != visual.hash()? {
            log::warn!("sequence checkpoint was trained against a different visual model");
        }
    }
    let mut val = load_prepared(&paths, "val")?;
    val.attach_audio(&cfg.audio_dir())?;
    let outcome = evaluate_split(&val, &visual, &model, &cfg.metrics, cfg.workers)?;

    let eval = paths.eval_dir();
    let pred_dir = eval.join("predictions");
    let prob_dir = eval.join("probabilities");
    create_dir(&pred_dir)?;
    create_dir(&prob_dir)?;
    for v in &outcome.videos {
        let a = pred_dir.join(format!("{}.csv", v.video_id));
        let b = prob_dir.join(format!("{}.csv", v.video_id));
        write_prediction_csv(&a, v, cfg.metrics.threshold)?;
        write_probability_csv(&b, v)?;
        run.record(&a)?;
        run.record(&b)?;
    }
    let summary = EvalSummary {
        au: outcome.au,
        expr: outcome.expr,
        videos: outcome.videos.len(),
    };
    let json = eval.join("report.json");
    write_json(&json, &summary)?;
    let csv = eval.join("report.csv");
    let text = format!(
        "{}\n{}\n{}\n",
        MetricReport::csv_header(),
        summary.au.csv_line(),
        summary.expr.csv_line()
    );
    std::fs::write(&csv, text).map_err(|e| Error::io(&csv, e))?;
    run.record(&json)?;
    run.record(&csv)?;
    run.manifest.reports = vec![summary.au.clone(), summary.expr.clone()];
    let mut inputs = BTreeMap::new();
    for p in [paths.visual_checkpoint(), sp, paths.prepared_split("val")] {
        inputs.insert(p.display().to_string(), file_sha256(&p)?);
    }
    run.manifest.record_stage(
        "evaluate",
        StageRecord {
            checkpoint: None,
            inputs,
            seed: cfg.stage_seed(Stage::Evaluate),
        },
    );
    log::info!(
        "evaluation: AU composite {:.4}, expression composite {:.4}",
        summary.au.composite,
        summary.expr.composite
    );
    run.finish()?;
    Ok(summary)
}

#[derive(Debug, Clone)]
pub struct PipelineSummary {
    pub prepare: PrepareSummary,
    pub visual: VisualRunSummary,
    pub sequence: SequenceRunSummary,
    pub eval: EvalSummary,
}

/// All stages in order on already-present data.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineSummary> {
    Ok(PipelineSummary {
        prepare: cmd_prepare_data(cfg)?,
        visual: cmd_train_visual(cfg)?,
        sequence: cmd_train_sequence(cfg)?,
        eval: cmd_evaluate(cfg)?,
    })
}
