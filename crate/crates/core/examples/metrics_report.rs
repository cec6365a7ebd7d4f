//! Competition metrics: per-class F1, total accuracy and the composite score
//! for both tasks on a small hand-made prediction set.
//!
//! ```text
//! cargo run --example metrics_report
//! ```

use av_affect::dataset::{Task, NUM_AUS};
use av_affect::metrics::{composite_score, MetricOptions, MetricReport};

fn main() -> av_affect::Result<()> {
    let opts = MetricOptions::default();

    let mut labels = Vec::new();
    let mut preds = Vec::new();
    for i in 0..20usize {
        let mut l = [0u8; NUM_AUS];
        let mut p = [0u8; NUM_AUS];
        for au in 0..NUM_AUS {
            l[au] = ((i + au) % 3 == 0) as u8;
            // every fourth frame gets the unit wrong
            p[au] = if (i + au) % 4 == 0 { 1 - l[au] } else { l[au] };
        }
        labels.push(l);
        preds.push(p);
    }
    let au = MetricReport::au(&preds, &labels, &opts)?;
    println!("AU per-class F1 {:.3?}", au.per_class_f1);

    let expr_labels: Vec<u8> = (0..70).map(|i| (i % 7) as u8).collect();
    let expr_preds: Vec<u8> = expr_labels
        .iter()
        .enumerate()
        .map(|(i, &l)| if i % 5 == 0 { (l + 1) % 7 } else { l })
        .collect();
    let expr = MetricReport::expression(&expr_preds, &expr_labels, &opts)?;

    println!("{}", MetricReport::csv_header());
    println!("{}", au.csv_line());
    println!("{}", expr.csv_line());

    println!(
        "composites from published scores: AU {:.3}, expression {:.3}",
        composite_score(Task::Au, 0.545, 0.879),
        composite_score(Task::Expression, 0.402, 0.630)
    );
    Ok(())
}
