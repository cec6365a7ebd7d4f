use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{DedupMode, SynthConfig, Task};
use crate::error::{Error, Result};
use crate::metrics::MetricOptions;
use crate::nn::SgdConfig;
use crate::visual::{AlternationMode, AlternationSchedule};

/// Which pipeline stage a derived seed belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Synth,
    Visual,
    Sequence,
    Evaluate,
}

impl Stage {
    pub fn seed_offset(self) -> u64 {
        match self {
            Stage::Synth => 0,
            Stage::Visual => 1,
            Stage::Sequence => 2,
            Stage::Evaluate => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualStageConfig {
    pub optimizer: SgdConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub alternation: AlternationMode,
    pub first_task: Task,
    pub widths: Vec<usize>,
    pub augment: bool,
    pub max_steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceStageConfig {
    pub optimizer: SgdConfig,
    pub steps: usize,
    pub batch_videos: usize,
    pub window: usize,
    pub encoder_layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout: f32,
    pub positional_encoding: bool,
    pub audio_hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossStageConfig {
    /// Derive BCE positive weights and focal alphas from training labels.
    pub class_weights: bool,
    pub w_max: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub frames_dir: Option<PathBuf>,
    pub audio_dir: Option<PathBuf>,
    pub aux_au_dir: Option<PathBuf>,
    pub seed: u64,
    pub workers: usize,
    pub dedup: DedupMode,
    pub visual: VisualStageConfig,
    pub sequence: SequenceStageConfig,
    pub loss: LossStageConfig,
    pub metrics: MetricOptions,
    pub synth: SynthConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            out_dir: "runs/default".into(),
            frames_dir: None,
            audio_dir: None,
            aux_au_dir: None,
            seed: 0,
            workers: 1,
            dedup: DedupMode::Video,
            visual: VisualStageConfig {
                optimizer: SgdConfig {
                    lr: 0.001,
                    momentum: 0.9,
                    clip_norm: None,
                },
                batch_size: 64,
                epochs: 4,
                alternation: AlternationMode::EpochByEpoch,
                first_task: Task::Expression,
                widths: vec![16, 32, 64, 128],
                augment: true,
                max_steps: None,
            },
            sequence: SequenceStageConfig {
                optimizer: SgdConfig {
                    lr: 0.01,
                    momentum: 0.9,
                    clip_norm: None,
                },
                steps: 200,
                batch_videos: 8,
                window: 30,
                encoder_layers: 1,
                heads: 8,
                ff_dim: 2048,
                dropout: 0.1,
                positional_encoding: true,
                audio_hidden: 512,
            },
            loss: LossStageConfig {
                class_weights: true,
                w_max: 10.0,
                gamma: 2.0,
            },
            metrics: MetricOptions::default(),
            synth: SynthConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key} = {value:?}: expected a boolean"))),
    }
}

fn parse_task(key: &str, value: &str) -> Result<Task> {
    match value {
        "au" => Ok(Task::Au),
        "expression" | "expr" => Ok(Task::Expression),
        _ => Err(Error::Config(format!("{key} = {value:?}: expected au|expression"))),
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn parse_opt(key: &str, v: &str) -> Result<Option<f64>> {
    if v.is_empty() {
        Ok(None)
    } else {
        parse(key, v).map(Some)
    }
}

fn show_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl PipelineConfig {
    /// Set one `key = value` entry.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "data_dir" => self.data_dir = v.into(),
            "out_dir" => self.out_dir = v.into(),
            "frames_dir" => self.frames_dir = opt_path(v),
            "audio_dir" => self.audio_dir = opt_path(v),
            "aux_au_dir" => self.aux_au_dir = opt_path(v),
            "seed" => self.seed = parse(key, v)?,
            "workers" => self.workers = parse(key, v)?,
            "dedup" => self.dedup = parse(key, v)?,
            "visual.lr" => self.visual.optimizer.lr = parse(key, v)?,
            "visual.momentum" => self.visual.optimizer.momentum = parse(key, v)?,
            "visual.clip_norm" => self.visual.optimizer.clip_norm = parse_opt(key, v)?,
            "visual.batch_size" => self.visual.batch_size = parse(key, v)?,
            "visual.epochs" => self.visual.epochs = parse(key, v)?,
            "visual.alternation" => self.visual.alternation = parse(key, v)?,
            "visual.first_task" => self.visual.first_task = parse_task(key, v)?,
            "visual.widths" => {
                self.visual.widths = v
                    .split(',')
                    .map(|w| parse(key, w.trim()))
                    .collect::<Result<_>>()?
            }
            "visual.augment" => self.visual.augment = parse_bool(key, v)?,
            "visual.max_steps" => {
                self.visual.max_steps = if v.is_empty() { None } else { Some(parse(key, v)?) }
            }
            "sequence.lr" => self.sequence.optimizer.lr = parse(key, v)?,
            "sequence.momentum" => self.sequence.optimizer.momentum = parse(key, v)?,
            "sequence.clip_norm" => self.sequence.optimizer.clip_norm = parse_opt(key, v)?,
            "sequence.steps" => self.sequence.steps = parse(key, v)?,
            "sequence.batch_videos" => self.sequence.batch_videos = parse(key, v)?,
            "sequence.window" => self.sequence.window = parse(key, v)?,
            "sequence.encoder_layers" => self.sequence.encoder_layers = parse(key, v)?,
            "sequence.heads" => self.sequence.heads = parse(key, v)?,
            "sequence.ff_dim" => self.sequence.ff_dim = parse(key, v)?,
            "sequence.dropout" => self.sequence.dropout = parse(key, v)?,
            "sequence.positional_encoding" => self.sequence.positional_encoding = parse_bool(key, v)?,
            "audio.hidden" => self.sequence.audio_hidden = parse(key, v)?,
            "loss.class_weights" => self.loss.class_weights = parse_bool(key, v)?,
            "loss.w_max" => self.loss.w_max = parse(key, v)?,
            "loss.gamma" => self.loss.gamma = parse(key, v)?,
            "metrics.threshold" => self.metrics.threshold = parse(key, v)?,
            "metrics.degenerate_f1" => self.metrics.degenerate_f1 = parse(key, v)?,
            "synth.n_videos" => self.synth.n_videos = parse(key, v)?,
            "synth.n_val_videos" => self.synth.n_val_videos = parse(key, v)?,
            "synth.frames_per_video" => self.synth.frames_per_video = parse(key, v)?,
            "synth.fps" => self.synth.fps = parse(key, v)?,
            "synth.sample_rate" => self.synth.sample_rate = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a stable order.
    pub fn entries(&self) -> BTreeMap<&'static str, String> {
        let mut m = BTreeMap::new();
        m.insert("data_dir", self.data_dir.display().to_string());
        m.insert("out_dir", self.out_dir.display().to_string());
        m.insert("frames_dir", show_path(&self.frames_dir));
        m.insert("audio_dir", show_path(&self.audio_dir));
        m.insert("aux_au_dir", show_path(&self.aux_au_dir));
        m.insert("seed", self.seed.to_string());
        m.insert("workers", self.workers.to_string());
        m.insert(
            "dedup",
            match self.dedup {
                DedupMode::Frame => "frame",
                DedupMode::Video => "video",
            }
            .into(),
        );
        let v = &self.visual;
        m.insert("visual.lr", v.optimizer.lr.to_string());
        m.insert("visual.momentum", v.optimizer.momentum.to_string());
        m.insert("visual.clip_norm", show_opt(v.optimizer.clip_norm));
        m.insert("visual.batch_size", v.batch_size.to_string());
        m.insert("visual.epochs", v.epochs.to_string());
        m.insert(
            "visual.alternation",
            match v.alternation {
                AlternationMode::EpochByEpoch => "epoch",
                AlternationMode::BatchByBatch => "batch",
            }
            .into(),
        );
        m.insert("visual.first_task", v.first_task.to_string());
        m.insert(
            "visual.widths",
            v.widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(","),
        );
        m.insert("visual.augment", v.augment.to_string());
        m.insert(
            "visual.max_steps",
            v.max_steps.map(|s| s.to_string()).unwrap_or_default(),
        );
        let s = &self.sequence;
        m.insert("sequence.lr", s.optimizer.lr.to_string());
        m.insert("sequence.momentum", s.optimizer.momentum.to_string());
        m.insert("sequence.clip_norm", show_opt(s.optimizer.clip_norm));
        m.insert("sequence.steps", s.steps.to_string());
        m.insert("sequence.batch_videos", s.batch_videos.to_string());
        m.insert("sequence.window", s.window.to_string());
        m.insert("sequence.encoder_layers", s.encoder_layers.to_string());
        m.insert("sequence.heads", s.heads.to_string());
        m.insert("sequence.ff_dim", s.ff_dim.to_string());
        m.insert("sequence.dropout", s.dropout.to_string());
        m.insert("sequence.positional_encoding", s.positional_encoding.to_string());
        m.insert("audio.hidden", s.audio_hidden.to_string());
        m.insert("loss.class_weights", self.loss.class_weights.to_string());
        m.insert("loss.w_max", self.loss.w_max.to_string());
        m.insert("loss.gamma", self.loss.gamma.to_string());
        m.insert("metrics.threshold", self.metrics.threshold.to_string());
        m.insert("metrics.degenerate_f1", self.metrics.degenerate_f1.to_string());
        m.insert("synth.n_videos", self.synth.n_videos.to_string());
        m.insert("synth.n_val_videos", self.synth.n_val_videos.to_string());
        m.insert("synth.frames_per_video", self.synth.frames_per_video.to_string());
        m.insert("synth.fps", self.synth.fps.to_string());
        m.insert("synth.sample_rate", self.synth.sample_rate.to_string());
        m
    }

    /// Apply a flat `key = value` text on top of the current values. Blank
    /// lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}:{}: expected key = value", origin.display(), n + 1))
            })?;
            self.apply(k.trim(), v.trim()).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("{}:{}: {msg}", origin.display(), n + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, path)?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.visual.optimizer.validate()?;
        self.sequence.optimizer.validate()?;
        if self.visual.batch_size == 0 || self.sequence.batch_videos == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.sequence.window == 0 || self.sequence.encoder_layers == 0 {
            return Err(Error::Config("sequence window and encoder_layers must be >= 1".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        if !(self.loss.w_max >= 1.0) || !(self.loss.gamma >= 0.0) {
            return Err(Error::Config("loss.w_max must be >= 1 and loss.gamma >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.metrics.threshold) {
            return Err(Error::Config("metrics.threshold must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        self.seed.wrapping_add(stage.seed_offset())
    }

    pub fn schedule(&self) -> AlternationSchedule {
        AlternationSchedule {
            mode: self.visual.alternation,
            first_task: self.visual.first_task,
        }
    }

    pub fn frames_dir(&self) -> PathBuf {
        self.frames_dir.clone().unwrap_or_else(|| self.data_dir.join("frames"))
    }

    pub fn audio_dir(&self) -> PathBuf {
        self.audio_dir.clone().unwrap_or_else(|| self.data_dir.join("audio"))
    }

    pub fn aux_au_dir(&self) -> PathBuf {
        self.aux_au_dir.clone().unwrap_or_else(|| self.data_dir.join("aux_au"))
    }
}
