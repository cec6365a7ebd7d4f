use candle_core::Tensor;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::track::{batch_windows, tracks_from_split, VideoTrack};
use super::AudioSequenceModel;
use crate::dataset::{DatasetSplit, Task, NUM_AUS};
use crate::error::{Error, Result};
use crate::losses::{focal_loss_tensor, weighted_bce_tensor};
use crate::nn::{self, Sgd, SgdConfig};
use crate::visual::{select_task, AlternationMode, AlternationSchedule, LossConfig, StepRecord, TrainHistory, VisualModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceTrainConfig {
    pub optimizer: SgdConfig,
    pub steps: usize,
    /// Videos sampled per step, one random window each.
    pub batch_videos: usize,
    pub first_task: Task,
    pub seed: u64,
    pub workers: usize,
}

impl Default for SequenceTrainConfig {
    fn default() -> Self {
        Self {
            optimizer: SgdConfig {
                lr: 0.01,
                momentum: 0.9,
                clip_norm: None,
            },
            steps: 200,
            batch_videos: 8,
            first_task: Task::Expression,
            seed: 0,
            workers: 1,
        }
    }
}

/// Joint audio + sequence training with the visual stream frozen.
pub fn train_sequence(
    split: &DatasetSplit,
    visual: &VisualModel,
    model: &mut AudioSequenceModel,
    cfg: &SequenceTrainConfig,
    losses: &LossConfig,
) -> Result<TrainHistory> {
    if !visual.is_frozen() {
        return Err(Error::contract("visual model must be frozen before sequence training"));
    }
    let before = visual.hash()?;
    let tracks = tracks_from_split(split, visual, &model.mel, cfg.workers)?;
    let history = train_sequence_on_tracks(&tracks, model, cfg, losses, |_, _| Ok(()))?;
    let after = visual.hash()?;
    if before != after {
        return Err(Error::contract("visual parameters changed during sequence training"));
    }
    model.visual_hash = Some(after);
    Ok(history)
}

/// Batch-level alternation between the AU and expression heads. Each step
/// updates the TDNN, the encoder and the active head only.
pub fn train_sequence_on_tracks<F>(
    tracks: &[VideoTrack],
    model: &mut AudioSequenceModel,
    cfg: &SequenceTrainConfig,
    losses: &LossConfig,
    mut on_step: F,
) -> Result<TrainHistory>
where
    F: FnMut(&StepRecord, &AudioSequenceModel) -> Result<()>,
{
    cfg.optimizer.validate()?;
    if cfg.batch_videos == 0 {
        return Err(Error::Config("batch_videos must be positive".into()));
    }
    let tracks: Vec<&VideoTrack> = tracks.iter().filter(|t| !t.is_empty()).collect();
    for task in [Task::Au, Task::Expression] {
        if !tracks.iter().any(|t| t.has_labels(task)) {
            return Err(Error::Config(format!("no {task} labels for sequence training")));
        }
    }
    let schedule = AlternationSchedule {
        mode: AlternationMode::BatchByBatch,
        first_task: cfg.first_task,
    };
    let window = model.sequence.config().window;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(cfg.optimizer)?;
    let mut history = TrainHistory::default();

    for step in 0..cfg.steps {
        let task = select_task(&schedule, 1, step);
        let eligible: Vec<&VideoTrack> = tracks.iter().copied().filter(|t| t.has_labels(task)).collect();
        let k = cfg.batch_videos.min(eligible.len());
        let mut picked: Vec<usize> = sample(&mut rng, eligible.len(), k).into_vec();
        picked.sort_unstable();

        let mut seqs = Vec::with_capacity(k);
        let mut labels = Vec::with_capacity(k);
        for &i in &picked {
            let t = eligible[i];
            let len = t.len().min(window);
            let start = rng.gen_range(0..=t.len() - len);
            seqs.push(t.window(start, len, window, &model.audio, &model.mel)?);
            labels.push((t, start, len));
        }
        let (x, mask) = batch_windows(&seqs)?;
        let enc = model.sequence.encode_batch(&x, &mask, Some(&mut rng))?;
        let (b, l, d) = enc.dims3()?;
        let flat = enc.reshape((b * l, d))?;
        let logits = model.sequence.logits(&flat, task)?;

        let mut weight = vec![0f32; b * l];
        let loss = match task {
            Task::Au => {
                let mut target = vec![0f32; b * l * NUM_AUS];
                for (row, (t, start, len)) in labels.iter().enumerate() {
                    for j in 0..*len {
                        if let Some(au) = t.au[start + j] {
                            let r = row * l + j;
                            weight[r] = 1.0;
                            for (c, &v) in au.iter().enumerate() {
                                target[r * NUM_AUS + c] = v as f32;
                            }
                        }
                    }
                }
                if weight.iter().all(|&w| w == 0.0) {
                    continue;
                }
                let target = Tensor::from_vec(target, (b * l, NUM_AUS), &nn::device())?;
                let w = Tensor::from_vec(weight, b * l, &nn::device())?;
                weighted_bce_tensor(&logits, &target, &losses.bce, Some(&w))?
            }
            Task::Expression => {
                let mut target = vec![0u32; b * l];
                for (row, (t, start, len)) in labels.iter().enumerate() {
                    for j in 0..*len {
                        if let Some(e) = t.expr[start + j] {
                            let r = row * l + j;
                            weight[r] = 1.0;
                            target[r] = e as u32;
                        }
                    }
                }
                if weight.iter().all(|&w| w == 0.0) {
                    continue;
                }
                let w = Tensor::from_vec(weight, b * l, &nn::device())?;
                focal_loss_tensor(&logits, &target, &losses.focal, Some(&w))?
            }
        };
        let loss_value = loss.to_scalar::<f32>()? as f64;
        if !loss_value.is_finite() {
            return Err(Error::Data(format!("non-finite {task} loss at sequence step {step}")));
        }
        let grads = loss.backward()?;
        let mut trainable = nn::prefixed("audio.", model.audio.params());
        trainable.extend(nn::prefixed("encoder.", model.sequence.encoder_params()));
        let head = match task {
            Task::Au => "au_out.",
            Task::Expression => "expr_out.",
        };
        trainable.extend(nn::prefixed(head, model.sequence.head_params(task)));
        opt.step(&trainable, &grads)?;

        let rec = StepRecord {
            step: history.steps.len(),
            epoch: 1,
            batch: step,
            task,
            batch_size: k,
            loss: loss_value,
        };
        log::debug!("sequence step {step} {task} loss {loss_value:.5}");
        on_step(&rec, model)?;
        history.steps.push(rec);
    }
    Ok(history)
}
