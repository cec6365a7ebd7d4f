use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{augment, frames_to_tensor, AugmentConfig, VisualModel};
use crate::dataset::media::{load_frames, Frame};
use crate::dataset::{compute_balance_stats, positive_weights, AuVector, BalanceStats, DatasetSplit, FrameRef, Task};
use crate::error::{Error, Result};
use crate::losses::{focal_loss_tensor, weighted_bce_tensor, BceParams, FocalParams};
use crate::nn::{self, Sgd, SgdConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlternationMode {
    EpochByEpoch,
    BatchByBatch,
}

impl std::str::FromStr for AlternationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "epoch" | "epoch_by_epoch" => Ok(AlternationMode::EpochByEpoch),
            "batch" | "batch_by_batch" => Ok(AlternationMode::BatchByBatch),
            _ => Err(format!("unknown alternation {s:?} (expected epoch|batch)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlternationSchedule {
    pub mode: AlternationMode,
    pub first_task: Task,
}

impl Default for AlternationSchedule {
    fn default() -> Self {
        Self {
            mode: AlternationMode::EpochByEpoch,
            first_task: Task::Expression,
        }
    }
}

/// Task trained at a given (1-based) epoch and (0-based) batch. Epoch mode
/// looks only at epoch parity, batch mode only at batch parity; `first_task`
/// takes epoch 1 / batch 0.
pub fn select_task(schedule: &AlternationSchedule, epoch: usize, batch: usize) -> Task {
    let phase = match schedule.mode {
        AlternationMode::EpochByEpoch => epoch.saturating_sub(1),
        AlternationMode::BatchByBatch => batch,
    };
    if phase % 2 == 0 {
        schedule.first_task
    } else {
        schedule.first_task.other()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub bce: BceParams,
    pub focal: FocalParams,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            bce: BceParams::unweighted(),
            focal: FocalParams::new([1.0; 7], FocalParams::DEFAULT_GAMMA).expect("valid"),
        }
    }
}

impl LossConfig {
    /// Positive weights and focal alphas derived from the training labels.
    pub fn from_split(split: &DatasetSplit, w_max: f64, gamma: f64) -> Result<Self> {
        Self::from_stats(&compute_balance_stats(split), w_max, gamma)
    }

    pub fn from_stats(stats: &BalanceStats, w_max: f64, gamma: f64) -> Result<Self> {
        Ok(Self {
            bce: BceParams::new(positive_weights(stats, w_max)?)?,
            focal: FocalParams::inverse_frequency(&stats.expr_counts, gamma)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualTrainConfig {
    pub optimizer: SgdConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: AlternationSchedule,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Stop after this many optimizer steps, whatever the epoch count.
    pub max_steps: Option<usize>,
    /// Threads used to decode frames; training itself is single-threaded.
    pub workers: usize,
}

impl Default for VisualTrainConfig {
    fn default() -> Self {
        Self {
            optimizer: SgdConfig {
                lr: 0.001,
                momentum: 0.9,
                clip_norm: None,
            },
            batch_size: 64,
            epochs: 2,
            schedule: AlternationSchedule::default(),
            augment: AugmentConfig::default(),
            seed: 0,
            max_steps: None,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub batch: usize,
    pub task: Task,
    pub batch_size: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
}

impl TrainHistory {
    pub fn tasks(&self) -> Vec<Task> {
        self.steps.iter().map(|s| s.task).collect()
    }

    pub fn losses(&self, task: Task) -> Vec<f64> {
        self.steps
            .iter()
            .filter(|s| s.task == task)
            .map(|s| s.loss)
            .collect()
    }

    pub fn final_loss(&self, task: Task) -> Option<f64> {
        self.losses(task).last().copied()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut s = String::from("step,epoch,batch,task,batch_size,loss\n");
        for r in &self.steps {
            writeln!(
                s,
                "{},{},{},{},{},{:.8}",
                r.step, r.epoch, r.batch, r.task, r.batch_size, r.loss
            )
            .unwrap();
        }
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

/// Frames and labels for one task, indexing into a shared frame cache.
struct TaskSamples {
    frame_idx: Vec<usize>,
    au: Vec<AuVector>,
    expr: Vec<u32>,
}

impl TaskSamples {
    fn len(&self) -> usize {
        self.frame_idx.len()
    }
}

struct FrameCache {
    frames: Vec<Frame>,
    index: BTreeMap<(String, usize), usize>,
}

impl FrameCache {
    fn build(splits: &[(&DatasetSplit, Task)], workers: usize) -> Result<(Self, Vec<TaskSamples>)> {
        let mut refs: Vec<FrameRef> = Vec::new();
        let mut index = BTreeMap::new();
        let mut samples = Vec::new();
        for (split, task) in splits {
            let mut s = TaskSamples {
                frame_idx: vec![],
                au: vec![],
                expr: vec![],
            };
            for a in split.annotations.iter().filter(|a| a.has(*task)) {
                let key = (a.video_id.clone(), a.frame_index);
                let idx = match index.get(&key) {
                    Some(&i) => i,
                    None => {
                        let r = split
                            .videos
                            .get(&a.video_id)
                            .and_then(|v| v.frame_paths.get(a.frame_index))
                            .ok_or_else(|| {
                                Error::Data(format!(
                                    "no frame for {}#{}",
                                    a.video_id, a.frame_index
                                ))
                            })?;
                        refs.push(r.clone());
                        index.insert(key, refs.len() - 1);
                        refs.len() - 1
                    }
                };
                s.frame_idx.push(idx);
                match task {
                    Task::Au => s.au.push(a.au.expect("filtered")),
                    Task::Expression => s.expr.push(a.expr.expect("filtered") as u32),
                }
            }
            samples.push(s);
        }
        let frames = load_frames(&refs, workers)?;
        Ok((Self { frames, index }, samples))
    }
}

struct Loader {
    order: Vec<usize>,
    pos: usize,
}

impl Loader {
    fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
        }
    }

    /// Next batch, reshuffling when the current pass is exhausted.
    fn next(&mut self, batch: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        if self.pos >= self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let end = (self.pos + batch).min(self.order.len());
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        out
    }

    fn batches_per_pass(&self, batch: usize) -> usize {
        self.order.len().div_ceil(batch)
    }
}

pub fn train_multitask(
    model: &mut VisualModel,
    au_data: &DatasetSplit,
    expr_data: &DatasetSplit,
    cfg: &VisualTrainConfig,
    losses: &LossConfig,
) -> Result<TrainHistory> {
    train_multitask_with(model, au_data, expr_data, cfg, losses, |_, _| Ok(()))
}

/// Alternating multi-task training. An expression step updates the backbone
/// and the expression head only; an AU step the backbone and the AU head.
/// `on_step` runs after every optimizer step.
pub fn train_multitask_with<F>(
    model: &mut VisualModel,
    au_data: &DatasetSplit,
    expr_data: &DatasetSplit,
    cfg: &VisualTrainConfig,
    losses: &LossConfig,
    mut on_step: F,
) -> Result<TrainHistory>
where
    F: FnMut(&StepRecord, &VisualModel) -> Result<()>,
{
    if model.is_frozen() {
        return Err(Error::Config("visual model is frozen".into()));
    }
    cfg.optimizer.validate()?;
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    for (split, task) in [(au_data, Task::Au), (expr_data, Task::Expression)] {
        if split.count(task) == 0 {
            return Err(Error::Config(format!(
                "no {task}-labelled frames in split {}",
                split.name
            )));
        }
    }

    let (cache, samples) = FrameCache::build(
        &[(au_data, Task::Au), (expr_data, Task::Expression)],
        cfg.workers,
    )?;
    log::info!(
        "visual training on {} AU / {} expression frames ({} decoded)",
        samples[0].len(),
        samples[1].len(),
        cache.index.len()
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(cfg.optimizer)?;
    let mut loaders = [Loader::new(samples[0].len()), Loader::new(samples[1].len())];
    let slot = |t: Task| match t {
        Task::Au => 0,
        Task::Expression => 1,
    };
    let mut history = TrainHistory::default();
    let limit = cfg.max_steps.unwrap_or(usize::MAX);

    'outer: for epoch in 1..=cfg.epochs {
        let steps_this_epoch = match cfg.schedule.mode {
            AlternationMode::EpochByEpoch => {
                let t = select_task(&cfg.schedule, epoch, 0);
                // start a fresh pass over the active task
                let l = &mut loaders[slot(t)];
                l.pos = l.order.len();
                l.batches_per_pass(cfg.batch_size)
            }
            AlternationMode::BatchByBatch => {
                2 * loaders
                    .iter()
                    .map(|l| l.batches_per_pass(cfg.batch_size))
                    .max()
                    .unwrap_or(0)
            }
        };
        for batch in 0..steps_this_epoch {
            if history.steps.len() >= limit {
                break 'outer;
            }
            let task = select_task(&cfg.schedule, epoch, batch);
            let data = &samples[slot(task)];
            let chosen = loaders[slot(task)].next(cfg.batch_size, &mut rng);
            let frames: Vec<Frame> = chosen
                .iter()
                .map(|&i| augment(&cache.frames[data.frame_idx[i]], &cfg.augment, &mut rng))
                .collect();
            let loss = step_loss(model, task, &frames, data, &chosen, losses)?;
            let loss_value = loss.to_scalar::<f32>()? as f64;
            if !loss_value.is_finite() {
                return Err(Error::Data(format!("non-finite {task} loss at step {}", history.steps.len())));
            }
            let grads = loss.backward()?;
            let mut trainable = nn::prefixed("backbone.", model.backbone_params());
            trainable.extend(nn::prefixed(&format!("{task}_head."), model.head_params(task)));
            opt.step(&trainable, &grads)?;

            let rec = StepRecord {
                step: history.steps.len(),
                epoch,
                batch,
                task,
                batch_size: chosen.len(),
                loss: loss_value,
            };
            log::debug!("visual step {} epoch {epoch} {task} loss {loss_value:.5}", rec.step);
            on_step(&rec, model)?;
            history.steps.push(rec);
        }
    }
    model.schedule = Some(cfg.schedule);
    Ok(history)
}

fn step_loss(
    model: &VisualModel,
    task: Task,
    frames: &[Frame],
    data: &TaskSamples,
    chosen: &[usize],
    losses: &LossConfig,
) -> Result<Tensor> {
    let x = frames_to_tensor(frames)?;
    let emb = model.embed_batch(&x)?;
    let logits = model.task_logits(&emb, task)?;
    match task {
        Task::Au => {
            let t: Vec<f32> = chosen
                .iter()
                .flat_map(|&i| data.au[i].iter().map(|&v| v as f32))
                .collect();
            let t = Tensor::from_vec(t, logits.dims(), &nn::device())?;
            weighted_bce_tensor(&logits, &t, &losses.bce, None)
        }
        Task::Expression => {
            let t: Vec<u32> = chosen.iter().map(|&i| data.expr[i]).collect();
            focal_loss_tensor(&logits, &t, &losses.focal, None)
        }
    }
}
