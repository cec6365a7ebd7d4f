//! The two training criteria on hand-picked inputs: positive-weighted BCE
//! for AUs and focal loss for expressions, with their logit gradients.
//!
//! ```text
//! cargo run --example losses
//! ```

use av_affect::dataset::{NUM_AUS, NUM_EXPRESSIONS};
use av_affect::losses::{
    focal_loss, focal_loss_logit_grad, weighted_bce, weighted_bce_logit_grad, BceParams, FocalParams,
};

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn main() -> av_affect::Result<()> {
    let logits: Vec<f64> = (0..NUM_AUS).map(|i| i as f64 * 0.4 - 2.0).collect();
    let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    let mut targets = [0u8; NUM_AUS];
    targets[0] = 1;
    targets[3] = 1;

    let plain = BceParams::unweighted();
    let mut w = [1.0; NUM_AUS];
    w[0] = 8.0;
    w[3] = 8.0;
    let weighted = BceParams::new(w)?;
    println!("BCE          {:.5}", weighted_bce(&probs, &targets, &plain)?);
    println!("weighted BCE {:.5}", weighted_bce(&probs, &targets, &weighted)?);
    let g = weighted_bce_logit_grad(&logits, &targets, &weighted)?;
    println!("dL/dz (AU1, AU4, AU6) = {:.4} {:.4} {:.4}", g[0], g[3], g[5]);

    // one confident-correct and one hard sample
    let easy = [4.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    let hard = [0.5, 0.3, 0.0, 0.0, 0.0, 0.0, 0.0];
    let ce = FocalParams::cross_entropy();
    let focal = FocalParams::new([1.0; NUM_EXPRESSIONS], FocalParams::DEFAULT_GAMMA)?;
    for (name, z) in [("easy", easy), ("hard", hard)] {
        let p = softmax(&z);
        println!(
            "{name}: p_t={:.3} CE={:.4} focal={:.4} focal dL/dz_t={:.4}",
            p[0],
            focal_loss(&p, 0, &ce)?,
            focal_loss(&p, 0, &focal)?,
            focal_loss_logit_grad(&z, 0, &focal)?[0]
        );
    }

    let counts = [300, 20, 15, 40, 120, 60, 30];
    let alpha = FocalParams::inverse_frequency(&counts, 2.0)?;
    println!("inverse-frequency alpha: {:.3?}", alpha.alpha);
    Ok(())
}
