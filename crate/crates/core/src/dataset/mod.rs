//! Frame annotations, media references and the data-hygiene passes applied
//! before training: `-1` removal, cross-task validation de-duplication,
//! missing-crop filtering, label statistics and auxiliary AU merging.

mod annotations;
mod hygiene;
pub mod media;
mod stats;
pub mod synth;

pub use annotations::{
    parse_annotations, read_fps_table, write_annotations, write_fps_table, DEFAULT_FPS,
};
pub use hygiene::{
    deduplicate_validation, filter_missing_crops, merge_auxiliary_au, DedupMode, DedupOutcome,
    DedupReport, AUX_PREFIX,
};
pub use media::{load_frames, Audio, Frame, FrameRef};
pub use stats::{compute_balance_stats, positive_weights, write_stats_csv, BalanceStats};
pub use synth::{generate_synthetic_dataset, SynthConfig, SyntheticDataset};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_AUS: usize = 12;
pub const NUM_EXPRESSIONS: usize = 7;

/// The twelve competition action units, in label-vector order.
pub const AU_NAMES: [&str; NUM_AUS] = [
    "AU1", "AU2", "AU4", "AU6", "AU7", "AU10", "AU12", "AU15", "AU23", "AU24", "AU25", "AU26",
];

pub type AuVector = [u8; NUM_AUS];

/// Which label a training step or metric refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Au,
    Expression,
}

impl Task {
    pub fn num_outputs(self) -> usize {
        match self {
            Task::Au => NUM_AUS,
            Task::Expression => NUM_EXPRESSIONS,
        }
    }

    pub fn other(self) -> Task {
        match self {
            Task::Au => Task::Expression,
            Task::Expression => Task::Au,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Au => "au",
            Task::Expression => "expression",
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameAnnotation {
    pub video_id: String,
    pub frame_index: usize,
    pub au: Option<AuVector>,
    pub expr: Option<u8>,
}

impl FrameAnnotation {
    pub fn new(
        video_id: impl Into<String>,
        frame_index: usize,
        au: Option<AuVector>,
        expr: Option<u8>,
    ) -> Result<Self> {
        let a = Self {
            video_id: video_id.into(),
            frame_index,
            au,
            expr,
        };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        if self.au.is_none() && self.expr.is_none() {
            return Err(Error::contract(format!(
                "{}#{} carries neither AU nor expression labels",
                self.video_id, self.frame_index
            )));
        }
        if let Some(au) = &self.au {
            if au.iter().any(|&v| v > 1) {
                return Err(Error::contract(format!("AU values must be 0/1, got {au:?}")));
            }
        }
        if let Some(e) = self.expr {
            if e as usize >= NUM_EXPRESSIONS {
                return Err(Error::contract(format!("expression class {e} out of range")));
            }
        }
        Ok(())
    }

    pub fn key(&self) -> (&str, usize) {
        (&self.video_id, self.frame_index)
    }

    pub fn has(&self, task: Task) -> bool {
        match task {
            Task::Au => self.au.is_some(),
            Task::Expression => self.expr.is_some(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub video_id: String,
    pub fps: f64,
    pub frame_paths: Vec<FrameRef>,
    #[serde(skip)]
    pub audio: Option<Audio>,
}

impl VideoRecord {
    pub fn frame_count(&self) -> usize {
        self.frame_paths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fps > 0.0) {
            return Err(Error::contract(format!(
                "video {} has non-positive fps {}",
                self.video_id, self.fps
            )));
        }
        if let Some(a) = &self.audio {
            a.validate()?;
        }
        Ok(())
    }
}

/// Conventional frame location: `<video_id>/<index:05>.jpg` under a frames root.
pub fn frame_relpath(video_id: &str, index: usize) -> PathBuf {
    Path::new(video_id).join(format!("{index:05}.jpg"))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub name: String,
    pub annotations: Vec<FrameAnnotation>,
    pub videos: BTreeMap<String, VideoRecord>,
}

impl DatasetSplit {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for v in self.videos.values() {
            v.validate()?;
        }
        for a in &self.annotations {
            a.validate()?;
            let v = self.videos.get(&a.video_id).ok_or_else(|| {
                Error::contract(format!(
                    "annotation references unknown video {}",
                    a.video_id
                ))
            })?;
            if a.frame_index >= v.frame_count() {
                return Err(Error::contract(format!(
                    "{}#{} beyond frame count {}",
                    a.video_id,
                    a.frame_index,
                    v.frame_count()
                )));
            }
        }
        Ok(())
    }

    pub fn count(&self, task: Task) -> usize {
        self.annotations.iter().filter(|a| a.has(task)).count()
    }

    /// Copy of the split keeping only annotations that carry `task` labels.
    pub fn task_view(&self, task: Task) -> DatasetSplit {
        let mut out = self.clone();
        out.annotations.retain(|a| a.has(task));
        out.prune_videos();
        out
    }

    /// Drop video records no annotation refers to.
    pub fn prune_videos(&mut self) {
        let used: std::collections::BTreeSet<&str> =
            self.annotations.iter().map(|a| a.video_id.as_str()).collect();
        self.videos.retain(|k, _| used.contains(k.as_str()));
    }

    /// Annotations of one video, sorted by frame index.
    pub fn video_annotations(&self, video_id: &str) -> Vec<&FrameAnnotation> {
        let mut v: Vec<_> = self
            .annotations
            .iter()
            .filter(|a| a.video_id == video_id)
            .collect();
        v.sort_by_key(|a| a.frame_index);
        v
    }

    /// Set the root directory for every path-based frame reference.
    pub fn rebase_frames(&mut self, frames_dir: &Path) {
        for v in self.videos.values_mut() {
            for f in &mut v.frame_paths {
                if let FrameRef::Path(p) = f {
                    if p.is_relative() {
                        *p = frames_dir.join(&*p);
                    }
                }
            }
        }
    }

    /// Load `<audio_dir>/<video_id>.wav` for every video that has one.
    pub fn attach_audio(&mut self, audio_dir: &Path) -> Result<()> {
        for v in self.videos.values_mut() {
            let p = audio_dir.join(format!("{}.wav", v.video_id));
            if p.exists() {
                v.audio = Some(media::read_wav(&p)?);
            }
        }
        Ok(())
    }

    pub fn set_fps(&mut self, table: &BTreeMap<String, f64>, default_fps: f64) {
        for v in self.videos.values_mut() {
            v.fps = table.get(&v.video_id).copied().unwrap_or(default_fps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn annotation_invariants() {
        assert!(FrameAnnotation::new("v", 0, None, None).is_err());
        assert!(FrameAnnotation::new("v", 0, None, Some(7)).is_err());
        let mut au = [0u8; NUM_AUS];
        au[3] = 2;
        assert!(FrameAnnotation::new("v", 0, Some(au), None).is_err());
        assert!(FrameAnnotation::new("v", 0, Some([1; NUM_AUS]), Some(6)).is_ok());
    }

    #[test]
    fn split_validation_checks_frame_range() {
        let mut s = DatasetSplit::new("train");
        s.videos.insert(
            "v".into(),
            VideoRecord {
                video_id: "v".into(),
                fps: 30.0,
                frame_paths: vec![FrameRef::Path(frame_relpath("v", 0))],
                audio: None,
            },
        );
        s.annotations
            .push(FrameAnnotation::new("v", 0, None, Some(1)).unwrap());
        assert!(s.validate().is_ok());
        s.annotations
            .push(FrameAnnotation::new("v", 1, None, Some(1)).unwrap());
        assert!(s.validate().is_err());
        s.annotations
            .push(FrameAnnotation::new("w", 0, None, Some(1)).unwrap());
        assert!(s.validate().is_err());
    }
}
