use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::align::chunk_video;
use super::encoder::{encode, predict_frames, FramePrediction};
use super::track::{tracks_from_split, VideoTrack};
use super::AudioSequenceModel;
use crate::dataset::{AuVector, DatasetSplit, NUM_AUS};
use crate::error::{Error, Result};
use crate::metrics::{threshold_au, MetricOptions, MetricReport};
use crate::visual::VisualModel;

/// One prediction per frame of `track`, in order.
pub fn predict_track(track: &VideoTrack, model: &AudioSequenceModel) -> Result<Vec<FramePrediction>> {
    let window = model.sequence.config().window;
    let mut out = Vec::with_capacity(track.len());
    for (start, len) in chunk_video(track.len(), window) {
        let seq = track.window(start, len, window, &model.audio, &model.mel)?;
        let enc = encode(&seq, &model.sequence)?;
        out.extend(predict_frames(&enc, &seq.mask, &model.sequence)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoPredictions {
    pub video_id: String,
    pub frame_indices: Vec<usize>,
    pub predictions: Vec<FramePrediction>,
}

impl VideoPredictions {
    pub fn au_decisions(&self, threshold: f64) -> Vec<AuVector> {
        let probs: Vec<[f64; NUM_AUS]> = self.predictions.iter().map(|p| p.au_probs).collect();
        threshold_au(&probs, threshold)
    }
}

fn prediction_header(s: &mut String) {
    s.push_str("frame_index");
    for k in 1..=NUM_AUS {
        write!(s, ",au{k}").unwrap();
    }
    s.push_str(",expr\n");
}

/// `frame_index,au1..au12,expr` with thresholded AUs and the arg-max class.
pub fn write_prediction_csv(path: &Path, preds: &VideoPredictions, threshold: f64) -> Result<()> {
    let mut s = String::new();
    prediction_header(&mut s);
    let decisions = preds.au_decisions(threshold);
    for ((idx, p), au) in preds.frame_indices.iter().zip(&preds.predictions).zip(&decisions) {
        write!(s, "{idx}").unwrap();
        for v in au {
            write!(s, ",{v}").unwrap();
        }
        writeln!(s, ",{}", p.expr_class()).unwrap();
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Raw AU probabilities and expression probabilities, 6 decimals.
pub fn write_probability_csv(path: &Path, preds: &VideoPredictions) -> Result<()> {
    let mut s = String::from("frame_index");
    for k in 1..=NUM_AUS {
        write!(s, ",au{k}").unwrap();
    }
    for c in 0..crate::dataset::NUM_EXPRESSIONS {
        write!(s, ",expr{c}").unwrap();
    }
    s.push('\n');
    for (idx, p) in preds.frame_indices.iter().zip(&preds.predictions) {
        write!(s, "{idx}").unwrap();
        for v in p.au_probs.iter().chain(&p.expr_probs) {
            write!(s, ",{v:.6}").unwrap();
        }
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub au: MetricReport,
    pub expr: MetricReport,
    pub videos: Vec<VideoPredictions>,
}

/// Full inference over a split and metric computation on its labelled frames.
/// Videos without any loadable annotated frame are skipped and counted.
pub fn evaluate_split(
    split: &DatasetSplit,
    visual: &VisualModel,
    model: &AudioSequenceModel,
    opts: &MetricOptions,
    workers: usize,
) -> Result<EvalOutcome> {
    let (valid, missing) = crate::dataset::filter_missing_crops(split);
    if missing > 0 {
        log::warn!("{missing} annotated frames without an image are ignored");
    }
    let tracks = tracks_from_split(&valid, visual, &model.mel, workers)?;
    let skipped = split
        .videos
        .keys()
        .filter(|v| !tracks.iter().any(|t| &t.video_id == *v))
        .inspect(|v| log::warn!("video {v} has no valid frames, skipped"))
        .count();

    let (mut au_pred, mut au_true, mut ex_pred, mut ex_true) = (vec![], vec![], vec![], vec![]);
    let mut videos = Vec::with_capacity(tracks.len());
    for t in &tracks {
        let preds = predict_track(t, model)?;
        let vp = VideoPredictions {
            video_id: t.video_id.clone(),
            frame_indices: t.frame_indices.clone(),
            predictions: preds,
        };
        let decisions = vp.au_decisions(opts.threshold);
        for (j, p) in vp.predictions.iter().enumerate() {
            if let Some(au) = t.au[j] {
                au_pred.push(decisions[j]);
                au_true.push(au);
            }
            if let Some(e) = t.expr[j] {
                ex_pred.push(p.expr_class());
                ex_true.push(e);
            }
        }
        videos.push(vp);
    }
    let mut au = MetricReport::au(&au_pred, &au_true, opts)?;
    let mut expr = MetricReport::expression(&ex_pred, &ex_true, opts)?;
    au.skipped_videos = skipped;
    expr.skipped_videos = skipped;
    Ok(EvalOutcome { au, expr, videos })
}
