//! The whole pipeline through the library API: synthetic data, preparation,
//! visual training, frozen-visual audio/sequence training and evaluation.
//! Runs a reduced configuration that finishes in a few minutes on one core.
//!
//! ```text
//! cargo run --release --example pipeline -- /tmp/affect-run
//! ```

use std::time::Instant;

use av_affect::metrics::MetricReport;
use av_affect::orchestrator::{cmd_synth, run_pipeline, PipelineConfig};

fn main() -> av_affect::Result<()> {
    let root = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "affect-run".into()));
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
        cfg.apply(k, v)?;
    }

    let t = Instant::now();
    cmd_synth(&cfg)?;
    let s = run_pipeline(&cfg)?;
    println!(
        "visual: {} steps, sequence: {} steps, visual hash unchanged: {}",
        s.visual.history.steps.len(),
        s.sequence.history.steps.len(),
        s.sequence.visual_hash_before == s.sequence.visual_hash_after
    );
    println!("{}", MetricReport::csv_header());
    println!("{}\n{}", s.eval.au.csv_line(), s.eval.expr.csv_line());
    println!("finished in {:.1?}; outputs in {}", t.elapsed(), cfg.out_dir.display());
    Ok(())
}
