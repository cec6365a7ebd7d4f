use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use super::{DatasetSplit, FrameAnnotation};
use crate::error::{Error, Result};

/// Prefix given to auxiliary-corpus video ids when merged into a main split.
pub const AUX_PREFIX: &str = "aux_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DedupMode {
    /// Drop validation frames whose `(video_id, frame_index)` is in the other task's training set.
    Frame,
    /// Drop every validation video whose id appears in the other task's training set.
    #[default]
    Video,
}

impl std::str::FromStr for DedupMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "frame" => Ok(DedupMode::Frame),
            "video" => Ok(DedupMode::Video),
            _ => Err(format!("unknown dedup mode {s:?} (expected frame|video)")),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DedupReport {
    pub mode: Option<DedupMode>,
    pub au_val_removed_frames: usize,
    pub expr_val_removed_frames: usize,
    pub au_val_removed_videos: Vec<String>,
    pub expr_val_removed_videos: Vec<String>,
}

impl DedupReport {
    pub fn total_removed_frames(&self) -> usize {
        self.au_val_removed_frames + self.expr_val_removed_frames
    }
}

#[derive(Debug, Clone)]
pub struct DedupOutcome {
    pub au_val: DatasetSplit,
    pub expr_val: DatasetSplit,
    pub report: DedupReport,
}

/// Remove from each task's validation split whatever leaks from the other
/// task's training split. Order of surviving annotations is preserved.
pub fn deduplicate_validation(
    au_train: &DatasetSplit,
    au_val: &DatasetSplit,
    expr_train: &DatasetSplit,
    expr_val: &DatasetSplit,
    mode: DedupMode,
) -> DedupOutcome {
    let (au_val, au_frames, au_videos) = remove_leaks(au_val, expr_train, mode);
    let (expr_val, ex_frames, ex_videos) = remove_leaks(expr_val, au_train, mode);
    DedupOutcome {
        au_val,
        expr_val,
        report: DedupReport {
            mode: Some(mode),
            au_val_removed_frames: au_frames,
            expr_val_removed_frames: ex_frames,
            au_val_removed_videos: au_videos,
            expr_val_removed_videos: ex_videos,
        },
    }
}

fn remove_leaks(
    val: &DatasetSplit,
    other_train: &DatasetSplit,
    mode: DedupMode,
) -> (DatasetSplit, usize, Vec<String>) {
    let mut out = val.clone();
    let before = out.annotations.len();
    let removed_videos: Vec<String>;
    match mode {
        DedupMode::Frame => {
            let seen: HashSet<(&str, usize)> =
                other_train.annotations.iter().map(FrameAnnotation::key).collect();
            out.annotations.retain(|a| !seen.contains(&a.key()));
            let remaining: BTreeSet<&str> =
                out.annotations.iter().map(|a| a.video_id.as_str()).collect();
            removed_videos = val
                .videos
                .keys()
                .filter(|v| !remaining.contains(v.as_str()))
                .filter(|v| val.annotations.iter().any(|a| &a.video_id == *v))
                .cloned()
                .collect();
        }
        DedupMode::Video => {
            let train_ids: BTreeSet<&str> = other_train
                .annotations
                .iter()
                .map(|a| a.video_id.as_str())
                .collect();
            removed_videos = val
                .videos
                .keys()
                .filter(|v| train_ids.contains(v.as_str()))
                .cloned()
                .collect();
            out.annotations
                .retain(|a| !train_ids.contains(a.video_id.as_str()));
        }
    }
    let removed = before - out.annotations.len();
    out.prune_videos();
    (out, removed, removed_videos)
}

/// Drop annotations whose frame image is absent. Returns the filtered split
/// and the number of annotations removed.
pub fn filter_missing_crops(split: &DatasetSplit) -> (DatasetSplit, usize) {
    let mut out = split.clone();
    let before = out.annotations.len();
    out.annotations.retain(|a| {
        split
            .videos
            .get(&a.video_id)
            .and_then(|v| v.frame_paths.get(a.frame_index))
            .is_some_and(|f| f.exists())
    });
    let removed = before - out.annotations.len();
    (out, removed)
}

/// Union of a main split with an AU-only auxiliary split whose video ids are
/// prefixed with [`AUX_PREFIX`].
pub fn merge_auxiliary_au(main: &DatasetSplit, aux: &DatasetSplit) -> Result<DatasetSplit> {
    if let Some(a) = aux.annotations.iter().find(|a| a.expr.is_some()) {
        return Err(Error::Data(format!(
            "auxiliary AU data must not carry expression labels ({}#{})",
            a.video_id, a.frame_index
        )));
    }
    let mut out = main.clone();
    let mut renamed: BTreeMap<String, String> = BTreeMap::new();
    for (vid, rec) in &aux.videos {
        let new_id = format!("{AUX_PREFIX}{vid}");
        if out.videos.contains_key(&new_id) {
            return Err(Error::Data(format!(
                "auxiliary video id {new_id} collides with the main split"
            )));
        }
        let mut rec = rec.clone();
        rec.video_id = new_id.clone();
        out.videos.insert(new_id.clone(), rec);
        renamed.insert(vid.clone(), new_id);
    }
    for a in &aux.annotations {
        let id = renamed.get(&a.video_id).ok_or_else(|| {
            Error::Data(format!("auxiliary annotation for unknown video {}", a.video_id))
        })?;
        out.annotations.push(FrameAnnotation {
            video_id: id.clone(),
            ..a.clone()
        });
    }
    Ok(out)
}
