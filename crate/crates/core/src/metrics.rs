//! Competition scoring: per-class F1, total accuracy and the task composites
//! `0.5 * F1 + 0.5 * Acc` (AU) and `0.67 * F1 + 0.33 * Acc` (expression).

use serde::{Deserialize, Serialize};

use crate::dataset::{AuVector, Task, NUM_AUS, NUM_EXPRESSIONS};
use crate::error::{Error, Result};

pub const DEFAULT_AU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricOptions {
    /// AU probability at or above which a unit counts as active.
    pub threshold: f64,
    /// F1 assigned to a class that never occurs and is never predicted.
    pub degenerate_f1: f64,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_AU_THRESHOLD,
            degenerate_f1: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn add(&mut self, pred: bool, label: bool) {
        match (pred, label) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    /// `2TP / (2TP + FP + FN)`, or `degenerate` when all three are zero.
    pub fn f1(&self, degenerate: f64) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            degenerate
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }
}

pub fn threshold_au(probs: &[[f64; NUM_AUS]], threshold: f64) -> Vec<AuVector> {
    probs
        .iter()
        .map(|row| {
            let mut out = [0u8; NUM_AUS];
            for (o, &p) in out.iter_mut().zip(row) {
                *o = (p >= threshold) as u8;
            }
            out
        })
        .collect()
}

fn check_len<A, B>(preds: &[A], labels: &[B]) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    Ok(())
}

pub fn au_confusions(preds: &[AuVector], labels: &[AuVector]) -> Result<[Confusion; NUM_AUS]> {
    check_len(preds, labels)?;
    let mut c = [Confusion::default(); NUM_AUS];
    for (p, l) in preds.iter().zip(labels) {
        for k in 0..NUM_AUS {
            c[k].add(p[k] == 1, l[k] == 1);
        }
    }
    Ok(c)
}

pub fn binary_f1_per_class(
    preds: &[AuVector],
    labels: &[AuVector],
    degenerate: f64,
) -> Result<[f64; NUM_AUS]> {
    let c = au_confusions(preds, labels)?;
    Ok(c.map(|c| c.f1(degenerate)))
}

/// Fraction of correct entries over all `N x 12` binary decisions.
pub fn total_accuracy_au(preds: &[AuVector], labels: &[AuVector]) -> Result<f64> {
    check_len(preds, labels)?;
    if preds.is_empty() {
        return Ok(0.0);
    }
    let correct: usize = preds
        .iter()
        .zip(labels)
        .map(|(p, l)| p.iter().zip(l).filter(|(a, b)| a == b).count())
        .sum();
    Ok(correct as f64 / (preds.len() * NUM_AUS) as f64)
}

/// Fraction of frames whose full 12-vector is predicted exactly.
pub fn exact_match_accuracy_au(preds: &[AuVector], labels: &[AuVector]) -> Result<f64> {
    check_len(preds, labels)?;
    if preds.is_empty() {
        return Ok(0.0);
    }
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / preds.len() as f64)
}

pub fn expr_confusions(preds: &[u8], labels: &[u8]) -> Result<[Confusion; NUM_EXPRESSIONS]> {
    check_len(preds, labels)?;
    if let Some(v) = preds.iter().chain(labels).find(|&&v| v as usize >= NUM_EXPRESSIONS) {
        return Err(Error::contract(format!("expression class {v} out of range")));
    }
    let mut c = [Confusion::default(); NUM_EXPRESSIONS];
    for (&p, &l) in preds.iter().zip(labels) {
        for (k, ck) in c.iter_mut().enumerate() {
            ck.add(p as usize == k, l as usize == k);
        }
    }
    Ok(c)
}

/// One-vs-rest F1 per class and the fraction of exactly correct frames.
pub fn expr_f1_and_accuracy(
    preds: &[u8],
    labels: &[u8],
    degenerate: f64,
) -> Result<([f64; NUM_EXPRESSIONS], f64)> {
    let c = expr_confusions(preds, labels)?;
    let acc = if preds.is_empty() {
        0.0
    } else {
        preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / preds.len() as f64
    };
    Ok((c.map(|c| c.f1(degenerate)), acc))
}

pub fn composite_score(task: Task, macro_f1: f64, accuracy: f64) -> f64 {
    match task {
        Task::Au => 0.5 * macro_f1 + 0.5 * accuracy,
        Task::Expression => 0.67 * macro_f1 + 0.33 * accuracy,
    }
}

pub fn macro_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: Task,
    pub per_class_f1: Vec<f64>,
    pub macro_f1: f64,
    pub total_accuracy: f64,
    pub composite: f64,
    pub frames: usize,
    pub confusions: Vec<Confusion>,
    /// AU only: frames with every unit correct.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact_match_accuracy: Option<f64>,
    pub skipped_videos: usize,
}

impl MetricReport {
    pub fn au(preds: &[AuVector], labels: &[AuVector], opts: &MetricOptions) -> Result<Self> {
        let confusions = au_confusions(preds, labels)?;
        let per_class_f1: Vec<f64> = confusions.iter().map(|c| c.f1(opts.degenerate_f1)).collect();
        let macro_f1 = macro_mean(&per_class_f1);
        let total_accuracy = total_accuracy_au(preds, labels)?;
        Ok(Self {
            task: Task::Au,
            composite: composite_score(Task::Au, macro_f1, total_accuracy),
            per_class_f1,
            macro_f1,
            total_accuracy,
            frames: preds.len(),
            confusions: confusions.to_vec(),
            exact_match_accuracy: Some(exact_match_accuracy_au(preds, labels)?),
            skipped_videos: 0,
        })
    }

    pub fn expression(preds: &[u8], labels: &[u8], opts: &MetricOptions) -> Result<Self> {
        let confusions = expr_confusions(preds, labels)?;
        let (f1, total_accuracy) = expr_f1_and_accuracy(preds, labels, opts.degenerate_f1)?;
        let per_class_f1 = f1.to_vec();
        let macro_f1 = macro_mean(&per_class_f1);
        Ok(Self {
            task: Task::Expression,
            composite: composite_score(Task::Expression, macro_f1, total_accuracy),
            per_class_f1,
            macro_f1,
            total_accuracy,
            frames: preds.len(),
            confusions: confusions.to_vec(),
            exact_match_accuracy: None,
            skipped_videos: 0,
        })
    }

    pub fn csv_header() -> &'static str {
        "task,frames,macro_f1,total_accuracy,composite,skipped_videos"
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{}",
            self.task, self.frames, self.macro_f1, self.total_accuracy, self.composite, self.skipped_videos
        )
    }
}
