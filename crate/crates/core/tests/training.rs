//! Training behaviour of both stages: overfitting small sets, parameter
//! isolation, the freeze contract and backbone substitution.

use av_affect::audio::{MelConfig, TdnnConfig};
use av_affect::dataset::{generate_synthetic_dataset, DatasetSplit, SynthConfig, Task};
use av_affect::nn::{self, hash_params, Init, Linear, Params, SgdConfig};
use av_affect::sequence::{
    tracks_from_split, train_sequence, train_sequence_on_tracks, AudioSequenceModel, SequenceConfig,
    SequenceTrainConfig,
};
use av_affect::visual::{
    train_multitask, train_multitask_with, AlternationMode, AlternationSchedule, AugmentConfig, Backbone,
    LossConfig, ResidualCnnConfig, VisualModel, VisualTrainConfig,
};
use av_affect::Error;
use candle_core::Tensor;

fn synthetic(n_videos: usize, frames: usize, seed: u64) -> DatasetSplit {
    let cfg = SynthConfig {
        n_videos,
        n_val_videos: 0,
        frames_per_video: frames,
        ..SynthConfig::default()
    };
    generate_synthetic_dataset(&cfg, seed).unwrap().train
}

fn frozen_visual() -> VisualModel {
    let mut v = VisualModel::residual(
        ResidualCnnConfig {
            widths: vec![4, 8],
            embed_dim: 512,
        },
        0,
    )
    .unwrap();
    v.freeze();
    v
}

fn small_audio_sequence(seed: u64) -> AudioSequenceModel {
    audio_sequence(32, seed)
}

fn audio_sequence(hidden: usize, seed: u64) -> AudioSequenceModel {
    let tdnn = TdnnConfig {
        hidden,
        ..TdnnConfig::default()
    };
    AudioSequenceModel::new(MelConfig::default(), tdnn, SequenceConfig::default(), seed).unwrap()
}

fn first_and_last(losses: &[f64]) -> (f64, f64) {
    (losses[0], losses[losses.len() - 1])
}

#[test]
fn visual_model_overfits_32_frames() {
    let train = synthetic(1, 32, 2);
    let au = train.task_view(Task::Au);
    let expr = train.task_view(Task::Expression);
    let mut model = VisualModel::residual(
        ResidualCnnConfig {
            widths: vec![8, 16, 32, 64],
            embed_dim: 512,
        },
        1,
    )
    .unwrap();
    let cfg = VisualTrainConfig {
        optimizer: SgdConfig {
            lr: 0.5,
            momentum: 0.9,
            clip_norm: Some(0.25),
        },
        batch_size: 32,
        epochs: 1000,
        max_steps: Some(200),
        augment: AugmentConfig::none(),
        schedule: AlternationSchedule {
            mode: AlternationMode::BatchByBatch,
            first_task: Task::Expression,
        },
        ..VisualTrainConfig::default()
    };
    let history = train_multitask(&mut model, &au, &expr, &cfg, &LossConfig::default()).unwrap();
    assert_eq!(history.steps.len(), 200);
    for task in [Task::Au, Task::Expression] {
        let (first, last) = first_and_last(&history.losses(task));
        assert!(last < 0.1 * first, "{task}: {first} -> {last}");
    }
}

#[test]
fn sequence_model_overfits_four_windows() {
    let train = synthetic(4, 30, 3);
    let visual = frozen_visual();
    let mut model = audio_sequence(128, 4);
    let tracks = tracks_from_split(&train, &visual, &model.mel, 1).unwrap();
    let cfg = SequenceTrainConfig {
        optimizer: SgdConfig {
            lr: 0.02,
            momentum: 0.9,
            clip_norm: Some(1.0),
        },
        steps: 300,
        batch_videos: 4,
        ..SequenceTrainConfig::default()
    };
    let history = train_sequence_on_tracks(&tracks, &mut model, &cfg, &LossConfig::default(), |_, _| Ok(())).unwrap();
    assert_eq!(history.steps.len(), 300);
    for task in [Task::Au, Task::Expression] {
        let (first, last) = first_and_last(&history.losses(task));
        assert!(last < 0.1 * first, "{task}: {first} -> {last}");
    }
}

#[test]
fn sequence_training_requires_and_preserves_a_frozen_visual_model() {
    let train = synthetic(2, 12, 5);
    let mut visual = VisualModel::residual(
        ResidualCnnConfig {
            widths: vec![4],
            embed_dim: 512,
        },
        0,
    )
    .unwrap();
    let mut model = small_audio_sequence(0);
    let cfg = SequenceTrainConfig {
        steps: 2,
        batch_videos: 2,
        ..SequenceTrainConfig::default()
    };
    let losses = LossConfig::default();
    let err = train_sequence(&train, &visual, &mut model, &cfg, &losses).unwrap_err();
    assert!(matches!(err, Error::Contract(_)), "{err}");

    visual.freeze();
    let before = visual.hash().unwrap();
    let audio_before = hash_params(&model.audio.params()).unwrap();
    train_sequence(&train, &visual, &mut model, &cfg, &losses).unwrap();
    assert_eq!(visual.hash().unwrap(), before);
    assert_eq!(model.visual_hash.as_deref(), Some(before.as_str()));
    assert_ne!(hash_params(&model.audio.params()).unwrap(), audio_before);

    // a frozen model refuses first-stage training too
    let err = train_multitask(
        &mut visual,
        &train.task_view(Task::Au),
        &train.task_view(Task::Expression),
        &VisualTrainConfig::default(),
        &losses,
    )
    .unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn sequence_steps_touch_only_the_active_head() {
    let train = synthetic(3, 20, 6);
    let visual = frozen_visual();
    let mut model = small_audio_sequence(1);
    let tracks = tracks_from_split(&train, &visual, &model.mel, 1).unwrap();
    let cfg = SequenceTrainConfig {
        steps: 6,
        batch_videos: 2,
        ..SequenceTrainConfig::default()
    };
    let heads = |m: &AudioSequenceModel| {
        (
            hash_params(&m.sequence.head_params(Task::Au)).unwrap(),
            hash_params(&m.sequence.head_params(Task::Expression)).unwrap(),
            hash_params(&m.sequence.encoder_params()).unwrap(),
            hash_params(&m.audio.params()).unwrap(),
        )
    };
    let mut prev = heads(&model);
    let mut tasks = Vec::new();
    train_sequence_on_tracks(&tracks, &mut model, &cfg, &LossConfig::default(), |rec, m| {
        let now = heads(m);
        let (idle_before, idle_now) = match rec.task {
            Task::Au => (&prev.1, &now.1),
            Task::Expression => (&prev.0, &now.0),
        };
        assert_eq!(idle_before, idle_now, "idle head moved at step {}", rec.step);
        assert_ne!(prev.2, now.2);
        assert_ne!(prev.3, now.3);
        tasks.push(rec.task);
        prev = now;
        Ok(())
    })
    .unwrap();
    let expected: Vec<Task> = (0..6)
        .map(|i| if i % 2 == 0 { Task::Expression } else { Task::Au })
        .collect();
    assert_eq!(tasks, expected);
}

/// Mean-pools the image to an 8x8 grid and projects it: a backbone with
/// nothing in common with the residual CNN beyond the trait.
#[derive(Debug)]
struct PooledLinear {
    proj: Linear,
}

impl Backbone for PooledLinear {
    fn kind(&self) -> &'static str {
        "pooled_linear"
    }

    fn embed_dim(&self) -> usize {
        self.proj.out_dim()
    }

    fn forward(&self, images: &Tensor) -> av_affect::Result<Tensor> {
        let n = images.dims()[0];
        let pooled = images.avg_pool2d(14)?.reshape((n, 3 * 8 * 8))?;
        self.proj.forward(&pooled)
    }

    fn params(&self) -> Params {
        nn::prefixed("proj.", self.proj.params())
    }

    fn config_json(&self) -> serde_json::Value {
        serde_json::json!({})
    }
}

#[test]
fn any_backbone_plugs_into_heads_and_trainer() {
    let mut init = Init::new(0);
    let backbone = PooledLinear {
        proj: Linear::new(&mut init, 192, 512).unwrap(),
    };
    let mut model = VisualModel::new(Box::new(backbone), 0).unwrap();
    let train = synthetic(1, 16, 7);
    let cfg = VisualTrainConfig {
        batch_size: 8,
        epochs: 2,
        ..VisualTrainConfig::default()
    };
    let mut prev = hash_params(&model.backbone_params()).unwrap();
    let history = train_multitask_with(
        &mut model,
        &train.task_view(Task::Au),
        &train.task_view(Task::Expression),
        &cfg,
        &LossConfig::default(),
        |_, m| {
            let now = hash_params(&m.backbone_params()).unwrap();
            assert_ne!(now, prev);
            prev = now;
            Ok(())
        },
    )
    .unwrap();
    assert_eq!(history.steps.len(), 4);
    let x = Tensor::zeros((2, 3, 112, 112), candle_core::DType::F32, &nn::device()).unwrap();
    let e = model.embed_batch(&x).unwrap();
    assert_eq!(model.task_logits(&e, Task::Au).unwrap().dims(), &[2, 12]);
    assert_eq!(model.task_logits(&e, Task::Expression).unwrap().dims(), &[2, 7]);
}

#[test]
fn eval_mode_is_deterministic() {
    let visual = frozen_visual();
    let train = synthetic(1, 8, 9);
    let frames: Vec<_> = train.videos.values().next().unwrap().frame_paths.iter().map(|f| f.load().unwrap()).collect();
    let x = av_affect::visual::frames_to_tensor(&frames).unwrap();
    let a: Vec<f32> = visual.embed_batch(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    let b: Vec<f32> = visual.embed_batch(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    assert_eq!(a, b);
}
