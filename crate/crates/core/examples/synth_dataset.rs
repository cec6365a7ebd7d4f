//! Generate the synthetic audio-visual corpus and write it to disk.
//!
//! ```text
//! cargo run --example synth_dataset -- /tmp/affect-data
//! ```

use av_affect::dataset::{compute_balance_stats, generate_synthetic_dataset, SynthConfig, Task};

fn main() -> av_affect::Result<()> {
    let root = std::env::args().nth(1).unwrap_or_else(|| "synth-data".into());
    let cfg = SynthConfig::default();
    let ds = generate_synthetic_dataset(&cfg, 0)?;
    ds.write_to(root.as_ref())?;

    for split in [&ds.train, &ds.val] {
        let stats = compute_balance_stats(split);
        println!(
            "{:<5} {} videos, {} AU frames, {} expression frames",
            split.name,
            split.videos.len(),
            split.count(Task::Au),
            split.count(Task::Expression)
        );
        println!("      AU positives {:?}", stats.au_positive_counts);
        println!("      expression counts {:?}", stats.expr_counts);
    }
    println!("written to {root}");
    Ok(())
}
