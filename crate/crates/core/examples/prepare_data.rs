//! Data preparation on a synthetic corpus with a deliberate leak: two
//! training videos are also listed in the AU validation annotations. The
//! de-duplication step finds and drops them.
//!
//! ```text
//! cargo run --example prepare_data
//! ```

use av_affect::orchestrator::{cmd_prepare_data, cmd_synth, PipelineConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let mut cfg = PipelineConfig::default();
    cfg.data_dir = dir.path().join("data");
    cfg.out_dir = dir.path().join("run");
    let ds = cmd_synth(&cfg)?;

    for vid in ds.train.videos.keys().take(2) {
        let name = format!("{vid}.txt");
        std::fs::copy(
            cfg.data_dir.join("train/au").join(&name),
            cfg.data_dir.join("val/au").join(&name),
        )?;
    }

    let summary = cmd_prepare_data(&cfg)?;
    println!("dedup mode: {:?}", summary.dedup.mode);
    println!("AU-val videos removed: {:?}", summary.dedup.au_val_removed_videos);
    println!("AU-val frames removed: {}", summary.dedup.au_val_removed_frames);
    println!("frames per prepared split: {:?}", summary.counts);
    println!("AU positives in training: {:?}", summary.stats.au_positive_counts);
    Ok(())
}
