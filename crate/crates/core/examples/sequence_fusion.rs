//! Second stage on a small synthetic split. The visual model is frozen; the
//! TDNN and the fusion encoder train jointly on 30-frame windows, and every
//! validation frame gets exactly one prediction.
//!
//! ```text
//! cargo run --release --example sequence_fusion
//! ```

use av_affect::audio::{MelConfig, TdnnConfig};
use av_affect::dataset::{generate_synthetic_dataset, SynthConfig, Task};
use av_affect::sequence::{
    chunk_video, predict_track, tracks_from_split, train_sequence_on_tracks, AudioSequenceModel,
    SequenceConfig, SequenceTrainConfig,
};
use av_affect::visual::{LossConfig, ResidualCnnConfig, VisualModel};

fn main() -> av_affect::Result<()> {
    let synth = SynthConfig {
        n_videos: 4,
        n_val_videos: 1,
        frames_per_video: 45,
        ..SynthConfig::default()
    };
    let ds = generate_synthetic_dataset(&synth, 1)?;
    let backbone = ResidualCnnConfig {
        widths: vec![8, 16],
        embed_dim: 512,
    };
    let mut visual = VisualModel::residual(backbone, 0)?;
    visual.freeze();

    let tdnn = TdnnConfig {
        hidden: 128,
        ..TdnnConfig::default()
    };
    let mut model = AudioSequenceModel::new(MelConfig::default(), tdnn, SequenceConfig::default(), 0)?;
    let train = tracks_from_split(&ds.train, &visual, &model.mel, 1)?;
    let cfg = SequenceTrainConfig {
        steps: 40,
        batch_videos: 4,
        ..SequenceTrainConfig::default()
    };
    let losses = LossConfig::from_split(&ds.train, 10.0, 2.0)?;
    let history = train_sequence_on_tracks(&train, &mut model, &cfg, &losses, |_, _| Ok(()))?;
    for task in [Task::Au, Task::Expression] {
        let l = history.losses(task);
        println!("{task:<10} loss {:.4} -> {:.4}", l[0], l[l.len() - 1]);
    }

    for track in tracks_from_split(&ds.val, &visual, &model.mel, 1)? {
        let preds = predict_track(&track, &model)?;
        println!(
            "{}: {} frames, windows {:?}, {} predictions",
            track.video_id,
            track.len(),
            chunk_video(track.len(), model.sequence.config().window),
            preds.len()
        );
        for (i, p) in preds.iter().enumerate().step_by(15) {
            println!(
                "  frame {i:>2}: expression {} (label {:?}), AU1 p={:.3} (label {:?})",
                p.expr_class(),
                track.expr[i],
                p.au_probs[0],
                track.au[i].map(|a| a[0])
            );
        }
    }
    Ok(())
}
