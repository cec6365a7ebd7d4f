use candle_core::Tensor;

use super::align::{audio_rows, fuse, mask_tensor, FeatureSequence};
use crate::audio::{compute_mel_spectrogram, silence_features, MelConfig, MelSpectrogram, TdnnModel};
use crate::dataset::{AuVector, DatasetSplit, Task, VideoRecord};
use crate::error::{Error, Result};
use crate::nn;
use crate::visual::{frames_to_tensor, VisualModel};

const EMBED_CHUNK: usize = 32;

/// One video prepared for the sequence stage: frozen visual embeddings of its
/// frames, its spectrogram and the frame labels.
#[derive(Debug, Clone)]
pub struct VideoTrack {
    pub video_id: String,
    pub fps: f64,
    pub frame_indices: Vec<usize>,
    /// `(F, D_v)`, detached from any graph.
    pub visual: Tensor,
    /// `None` when the video has no usable audio.
    pub spectrogram: Option<MelSpectrogram>,
    pub au: Vec<Option<AuVector>>,
    pub expr: Vec<Option<u8>>,
}

impl VideoTrack {
    /// Track over the given frames of `video`, without labels.
    pub fn from_video(
        video: &VideoRecord,
        frame_indices: Vec<usize>,
        visual: &VisualModel,
        mel: &MelConfig,
    ) -> Result<Self> {
        if !(video.fps > 0.0) {
            return Err(Error::Data(format!("video {} has fps {}", video.video_id, video.fps)));
        }
        let mut rows = Vec::with_capacity(frame_indices.len());
        for chunk in frame_indices.chunks(EMBED_CHUNK) {
            let frames = chunk
                .iter()
                .map(|&i| {
                    video
                        .frame_paths
                        .get(i)
                        .ok_or_else(|| Error::Data(format!("{} has no frame {i}", video.video_id)))?
                        .load()
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(visual.embed_batch(&frames_to_tensor(&frames)?)?.detach());
        }
        let visual_feats = if rows.is_empty() {
            Tensor::zeros((0, visual.embed_dim()), candle_core::DType::F32, &nn::device())?
        } else {
            Tensor::cat(&rows, 0)?
        };
        let spectrogram = match &video.audio {
            Some(a) => match compute_mel_spectrogram(&a.samples, a.sample_rate, mel) {
                Ok(s) => Some(s),
                Err(Error::TooShort { .. }) => {
                    log::warn!("audio of {} shorter than one window, using silence", video.video_id);
                    None
                }
                Err(e) => return Err(e),
            },
            None => None,
        };
        let n = frame_indices.len();
        Ok(Self {
            video_id: video.video_id.clone(),
            fps: video.fps,
            frame_indices,
            visual: visual_feats,
            spectrogram,
            au: vec![None; n],
            expr: vec![None; n],
        })
    }

    pub fn len(&self) -> usize {
        self.frame_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_indices.is_empty()
    }

    pub fn has_labels(&self, task: Task) -> bool {
        match task {
            Task::Au => self.au.iter().any(Option::is_some),
            Task::Expression => self.expr.iter().any(Option::is_some),
        }
    }

    /// `(len, D_a)` audio features for positions `[start, start + len)`.
    /// Gradients flow into `audio` parameters.
    pub fn audio_window(
        &self,
        start: usize,
        len: usize,
        audio: &TdnnModel,
        mel: &MelConfig,
    ) -> Result<Tensor> {
        let frames = &self.frame_indices[start..start + len];
        match &self.spectrogram {
            Some(spec) => {
                let stride = mel.stride_samples(spec.sample_rate) as f64 / spec.sample_rate as f64;
                let rows = audio_rows(frames, self.fps, stride, spec.frames())?;
                let lo = *rows.iter().min().expect("non-empty window");
                let hi = *rows.iter().max().expect("non-empty window") + 1;
                let feats = audio.forward_range(spec, lo, hi)?;
                let idx: Vec<u32> = rows.iter().map(|&r| (r - lo) as u32).collect();
                let idx = Tensor::from_vec(idx, len, &nn::device())?;
                Ok(feats.index_select(&idx, 0)?)
            }
            None => silence_features(len, audio, mel),
        }
    }

    /// Fused, padded window starting at position `start`.
    pub fn window(
        &self,
        start: usize,
        len: usize,
        window: usize,
        audio: &TdnnModel,
        mel: &MelConfig,
    ) -> Result<FeatureSequence> {
        let v = self.visual.narrow(0, start, len)?;
        let a = self.audio_window(start, len, audio, mel)?;
        FeatureSequence::new(
            self.video_id.clone(),
            self.frame_indices[start],
            fuse(&v, &a)?,
            window,
        )
    }
}

/// Tracks for every video of `split` that has at least one labelled frame.
/// Frames carrying either label are included, in frame order.
pub fn tracks_from_split(
    split: &DatasetSplit,
    visual: &VisualModel,
    mel: &MelConfig,
    workers: usize,
) -> Result<Vec<VideoTrack>> {
    let build = |video: &VideoRecord| -> Result<Option<VideoTrack>> {
        let mut anns = split.video_annotations(&video.video_id);
        if anns.is_empty() {
            return Ok(None);
        }
        anns.sort_by_key(|a| a.frame_index);
        let idx = anns.iter().map(|a| a.frame_index).collect();
        let mut t = VideoTrack::from_video(video, idx, visual, mel)?;
        t.au = anns.iter().map(|a| a.au).collect();
        t.expr = anns.iter().map(|a| a.expr).collect();
        Ok(Some(t))
    };
    let videos: Vec<&VideoRecord> = split.videos.values().collect();
    let built: Vec<Option<VideoTrack>> = if workers > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| videos.par_iter().map(|v| build(v)).collect::<Result<_>>())?
    } else {
        videos.iter().map(|v| build(v)).collect::<Result<_>>()?
    };
    Ok(built.into_iter().flatten().collect())
}

/// Stack windows into `(B, W, D)` tokens and a `(B, W)` mask.
pub fn batch_windows(seqs: &[FeatureSequence]) -> Result<(Tensor, Tensor)> {
    let xs: Vec<&Tensor> = seqs.iter().map(|s| &s.fused).collect();
    let masks: Vec<&[bool]> = seqs.iter().map(|s| s.mask.as_slice()).collect();
    Ok((Tensor::stack(&xs, 0)?, mask_tensor(&masks)?))
}
