use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::nn;

pub const DEFAULT_WINDOW: usize = 30;

/// Audio row for a frame index: `round((i / fps) / stride_sec)`, clamped to
/// `[0, audio_len - 1]`.
pub fn audio_row(frame_index: usize, fps: f64, stride_sec: f64, audio_len: usize) -> usize {
    let t = frame_index as f64 / fps;
    let row = (t / stride_sec).round();
    (row.max(0.0) as usize).min(audio_len.saturating_sub(1))
}

pub fn audio_rows(frame_indices: &[usize], fps: f64, stride_sec: f64, audio_len: usize) -> Result<Vec<usize>> {
    if !(fps > 0.0) || !(stride_sec > 0.0) {
        return Err(Error::contract(format!(
            "alignment needs fps > 0 and stride > 0 (fps {fps}, stride {stride_sec})"
        )));
    }
    if audio_len == 0 && !frame_indices.is_empty() {
        return Err(Error::contract(
            "no audio rows to align to; substitute silence features",
        ));
    }
    Ok(frame_indices
        .iter()
        .map(|&i| audio_row(i, fps, stride_sec, audio_len))
        .collect())
}

/// Pick one audio feature row per frame from a `(T, D)` matrix.
pub fn align_audio_to_frames(
    audio_feats: &Tensor,
    fps: f64,
    stride_sec: f64,
    frame_indices: &[usize],
) -> Result<Tensor> {
    let (t, d) = audio_feats.dims2()?;
    let rows = audio_rows(frame_indices, fps, stride_sec, t)?;
    if rows.is_empty() {
        return Ok(Tensor::zeros((0, d), audio_feats.dtype(), audio_feats.device())?);
    }
    let idx: Vec<u32> = rows.iter().map(|&r| r as u32).collect();
    let idx = Tensor::from_vec(idx, rows.len(), audio_feats.device())?;
    Ok(audio_feats.index_select(&idx, 0)?)
}

/// Non-overlapping `(start, length)` windows covering `frame_count` frames.
pub fn chunk_video(frame_count: usize, window: usize) -> Vec<(usize, usize)> {
    assert!(window > 0, "window must be positive");
    (0..frame_count)
        .step_by(window)
        .map(|s| (s, window.min(frame_count - s)))
        .collect()
}

/// Row-wise concatenation, visual columns first.
pub fn fuse(visual_seq: &Tensor, audio_seq: &Tensor) -> Result<Tensor> {
    let (lv, _) = visual_seq.dims2()?;
    let (la, _) = audio_seq.dims2()?;
    if lv != la {
        return Err(Error::contract(format!(
            "cannot fuse {lv} visual rows with {la} audio rows"
        )));
    }
    Ok(Tensor::cat(&[visual_seq, audio_seq], 1)?)
}

/// A window of fused features padded to a fixed length.
#[derive(Debug, Clone)]
pub struct FeatureSequence {
    pub video_id: String,
    pub start_frame: usize,
    /// `(window, width)`; rows past the real length are zero.
    pub fused: Tensor,
    /// `true` for real frames.
    pub mask: Vec<bool>,
}

impl FeatureSequence {
    pub fn new(video_id: impl Into<String>, start_frame: usize, fused: Tensor, window: usize) -> Result<Self> {
        let (len, width) = fused.dims2()?;
        if len == 0 || len > window {
            return Err(Error::contract(format!(
                "sequence length {len} outside 1..={window}"
            )));
        }
        let fused = if len < window {
            let pad = Tensor::zeros((window - len, width), fused.dtype(), fused.device())?;
            Tensor::cat(&[&fused, &pad], 0)?
        } else {
            fused
        };
        let mut mask = vec![true; len];
        mask.resize(window, false);
        Ok(Self {
            video_id: video_id.into(),
            start_frame,
            fused,
            mask,
        })
    }

    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn window(&self) -> usize {
        self.mask.len()
    }

    pub fn width(&self) -> usize {
        self.fused.dims()[1]
    }

    /// `(1, window)` float mask for batching.
    pub fn mask_tensor(&self) -> Result<Tensor> {
        mask_tensor(&[self.mask.as_slice()])
    }
}

/// `(B, L)` tensor with 1.0 for real frames.
pub fn mask_tensor(masks: &[&[bool]]) -> Result<Tensor> {
    let l = masks.first().map_or(0, |m| m.len());
    let v: Vec<f32> = masks
        .iter()
        .flat_map(|m| m.iter().map(|&b| if b { 1.0 } else { 0.0 }))
        .collect();
    Ok(Tensor::from_vec(v, (masks.len(), l), &nn::device())?.to_dtype(DType::F32)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn alignment_examples() {
        assert_eq!(audio_row(0, 30.0, 0.005, 400), 0);
        assert_eq!(audio_row(30, 30.0, 0.005, 400), 200);
        assert_eq!(audio_row(3000, 30.0, 0.005, 400), 399);
        assert!(audio_rows(&[1], 30.0, 0.005, 0).is_err());
        assert!(audio_rows(&[1], 0.0, 0.005, 10).is_err());
    }

    #[test]
    fn align_picks_rows() {
        let feats = Tensor::arange(0f32, 20.0, &nn::device()).unwrap().reshape((10, 2)).unwrap();
        let out = align_audio_to_frames(&feats, 100.0, 0.01, &[0, 3, 50]).unwrap();
        assert_eq!(
            out.to_vec2::<f32>().unwrap(),
            vec![vec![0.0, 1.0], vec![6.0, 7.0], vec![18.0, 19.0]]
        );
    }

    #[test]
    fn chunk_examples() {
        assert_eq!(chunk_video(95, 30), vec![(0, 30), (30, 30), (60, 30), (90, 5)]);
        assert_eq!(chunk_video(30, 30), vec![(0, 30)]);
        assert!(chunk_video(0, 30).is_empty());
    }

    #[test]
    fn fuse_concatenates_visual_first() {
        let dev = nn::device();
        let v = Tensor::ones((1, 512), DType::F32, &dev).unwrap();
        let a = Tensor::zeros((1, 512), DType::F32, &dev).unwrap();
        let f = nn::flat_f32(&fuse(&v, &a).unwrap()).unwrap();
        assert_eq!(f.len(), 1024);
        assert!(f[..512].iter().all(|&x| x == 1.0));
        assert!(f[512..].iter().all(|&x| x == 0.0));
        let short = Tensor::zeros((2, 512), DType::F32, &dev).unwrap();
        assert!(fuse(&v, &short).is_err());
    }

    #[test]
    fn padding_is_zero_and_masked() {
        let f = Tensor::ones((25, 1024), DType::F32, &nn::device()).unwrap();
        let s = FeatureSequence::new("v", 0, f, 30).unwrap();
        assert_eq!(s.fused.dims(), &[30, 1024]);
        assert_eq!(s.real_len(), 25);
        let rows = s.fused.to_vec2::<f32>().unwrap();
        assert!(rows[25..].iter().all(|r| r.iter().all(|&x| x == 0.0)));
        assert!(!s.mask[25] && s.mask[24]);
    }

    proptest! {
        #[test]
        fn chunks_partition_frames(n in 0usize..500, w in 1usize..64) {
            let c = chunk_video(n, w);
            let mut next = 0;
            for &(s, l) in &c {
                prop_assert_eq!(s, next);
                prop_assert!(l >= 1 && l <= w);
                next = s + l;
            }
            prop_assert_eq!(next, n);
            prop_assert!(c.iter().rev().skip(1).all(|&(_, l)| l == w));
        }

        #[test]
        fn rows_stay_in_range(i in 0usize..100_000, fps in 1.0f64..120.0, t in 1usize..5000) {
            prop_assert!(audio_row(i, fps, 0.005, t) < t);
        }
    }
}
