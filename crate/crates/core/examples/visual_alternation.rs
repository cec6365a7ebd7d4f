//! Alternating multi-task training of the visual model on synthetic faces,
//! in both schedules. After each step the example hashes the shared backbone
//! and the two heads to show which parameter groups moved.
//!
//! ```text
//! cargo run --release --example visual_alternation
//! ```

use av_affect::dataset::{generate_synthetic_dataset, SynthConfig, Task};
use av_affect::nn::hash_params;
use av_affect::visual::{
    train_multitask_with, AlternationMode, AlternationSchedule, LossConfig, ResidualCnnConfig,
    VisualModel, VisualTrainConfig,
};

fn main() -> av_affect::Result<()> {
    let synth = SynthConfig {
        n_videos: 2,
        n_val_videos: 1,
        frames_per_video: 16,
        ..SynthConfig::default()
    };
    let ds = generate_synthetic_dataset(&synth, 3)?;
    let au = ds.train.task_view(Task::Au);
    let expr = ds.train.task_view(Task::Expression);
    let losses = LossConfig::from_split(&ds.train, 10.0, 2.0)?;

    for mode in [AlternationMode::EpochByEpoch, AlternationMode::BatchByBatch] {
        let backbone = ResidualCnnConfig {
            widths: vec![8, 16],
            embed_dim: 512,
        };
        let mut model = VisualModel::residual(backbone, 0)?;
        let cfg = VisualTrainConfig {
            batch_size: 8,
            epochs: 2,
            schedule: AlternationSchedule {
                mode,
                first_task: Task::Expression,
            },
            ..VisualTrainConfig::default()
        };
        println!("{mode:?}");
        let mut last = (
            hash_params(&model.backbone_params())?,
            hash_params(&model.head_params(Task::Au))?,
            hash_params(&model.head_params(Task::Expression))?,
        );
        train_multitask_with(&mut model, &au, &expr, &cfg, &losses, |rec, m| {
            let now = (
                hash_params(&m.backbone_params())?,
                hash_params(&m.head_params(Task::Au))?,
                hash_params(&m.head_params(Task::Expression))?,
            );
            let moved = |a: &String, b: &String| if a == b { "same " } else { "moved" };
            println!(
                "  step {:>2} epoch {} batch {} {:<10} loss {:.4}  backbone {} au_head {} expr_head {}",
                rec.step,
                rec.epoch,
                rec.batch,
                rec.task,
                rec.loss,
                moved(&last.0, &now.0),
                moved(&last.1, &now.1),
                moved(&last.2, &now.2)
            );
            last = now;
            Ok(())
        })?;
    }
    Ok(())
}
