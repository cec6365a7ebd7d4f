//! Deterministic synthetic audio-visual corpus.
//!
//! Labels follow a per-video Markov process so they persist over a few frames
//! and vary within each video. Both modalities encode them:
//!
//! * video: the background hue is the expression class (`class / 7` around the
//!   hue circle); each active AU paints a 20x20 black-and-white stripe patch in
//!   its own cell of a 4x3 grid, with an AU-specific orientation and period.
//! * audio: each active AU adds a tone at `400 * (k + 1)` Hz and the expression
//!   class adds a tone at `5200 + 400 * class` Hz.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::media::{write_wav, Audio, Frame, FRAME_CHANNELS, FRAME_SIZE};
use super::{
    frame_relpath, write_annotations, write_fps_table, AuVector, DatasetSplit, FrameAnnotation,
    FrameRef, VideoRecord, NUM_AUS, NUM_EXPRESSIONS,
};
use crate::error::{Error, Result};

const AU_FLIP_PROB: f64 = 0.12;
const EXPR_CHANGE_PROB: f64 = 0.08;
const PIXEL_NOISE: f32 = 0.03;
const TONE_AMPLITUDE: f32 = 0.06;
const AUDIO_NOISE: f64 = 0.005;
const MARGIN: usize = 2;
const GRID_COLS: usize = 4;
const GRID_ROWS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Training videos.
    pub n_videos: usize,
    /// Validation videos (distinct ids, disjoint from training).
    pub n_val_videos: usize,
    pub frames_per_video: usize,
    pub fps: f64,
    pub sample_rate: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_videos: 8,
            n_val_videos: 4,
            frames_per_video: 60,
            fps: 30.0,
            sample_rate: 16_000,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_videos == 0
            || self.frames_per_video == 0
            || !(self.fps > 0.0)
            || self.sample_rate == 0
        {
            return Err(Error::Config(format!(
                "synthetic config values must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Everything needed to draw one synthetic frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthFrame {
    pub au: AuVector,
    pub expr: u8,
    pub noise_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub train: DatasetSplit,
    pub val: DatasetSplit,
}

pub fn au_tone_hz(au: usize) -> f64 {
    400.0 * (au as f64 + 1.0)
}

pub fn expr_tone_hz(class: usize) -> f64 {
    5200.0 + 400.0 * class as f64
}

pub fn generate_synthetic_dataset(cfg: &SynthConfig, seed: u64) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut make = |name: &str, prefix: &str, n: usize| {
        let mut split = DatasetSplit::new(name);
        for v in 0..n {
            let vid = format!("{prefix}_{v:03}");
            let video_seed: u64 = master.gen();
            let (rec, anns) = synth_video(cfg, &vid, video_seed);
            split.videos.insert(vid, rec);
            split.annotations.extend(anns);
        }
        split
    };
    let train = make("train", "train", cfg.n_videos);
    let val = make("val", "val", cfg.n_val_videos);
    Ok(SyntheticDataset { train, val })
}

fn synth_video(cfg: &SynthConfig, vid: &str, seed: u64) -> (VideoRecord, Vec<FrameAnnotation>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut au: AuVector = [0; NUM_AUS];
    for a in au.iter_mut() {
        *a = rng.gen_bool(0.5) as u8;
    }
    let mut expr: u8 = rng.gen_range(0..NUM_EXPRESSIONS as u8);
    let mut frames = Vec::with_capacity(cfg.frames_per_video);
    let mut anns = Vec::with_capacity(cfg.frames_per_video);
    for i in 0..cfg.frames_per_video {
        if i > 0 {
            for a in au.iter_mut() {
                if rng.gen_bool(AU_FLIP_PROB) {
                    *a ^= 1;
                }
            }
            if rng.gen_bool(EXPR_CHANGE_PROB) {
                let step = rng.gen_range(1..NUM_EXPRESSIONS as u8);
                expr = (expr + step) % NUM_EXPRESSIONS as u8;
            }
        }
        frames.push(SynthFrame {
            au,
            expr,
            noise_seed: rng.gen(),
        });
        anns.push(FrameAnnotation {
            video_id: vid.to_string(),
            frame_index: i,
            au: Some(au),
            expr: Some(expr),
        });
    }
    let audio = synth_audio(cfg, &frames, rng.gen());
    let rec = VideoRecord {
        video_id: vid.to_string(),
        fps: cfg.fps,
        frame_paths: frames.into_iter().map(FrameRef::Synthetic).collect(),
        audio: Some(audio),
    };
    (rec, anns)
}

fn synth_audio(cfg: &SynthConfig, frames: &[SynthFrame], seed: u64) -> Audio {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, AUDIO_NOISE).expect("valid std");
    let sr = cfg.sample_rate as f64;
    let n = (frames.len() as f64 / cfg.fps * sr).round() as usize;
    let nyquist = sr / 2.0;
    let samples = (0..n)
        .map(|s| {
            let t = s as f64 / sr;
            let i = ((t * cfg.fps).floor() as usize).min(frames.len() - 1);
            let f = &frames[i];
            let mut v = 0.0f64;
            for (k, &on) in f.au.iter().enumerate() {
                let hz = au_tone_hz(k);
                if on == 1 && hz < nyquist {
                    v += (2.0 * std::f64::consts::PI * hz * t).sin();
                }
            }
            let hz = expr_tone_hz(f.expr as usize);
            if hz < nyquist {
                v += (2.0 * std::f64::consts::PI * hz * t).sin();
            }
            (v * TONE_AMPLITUDE as f64 + noise.sample(&mut rng)) as f32
        })
        .collect();
    Audio {
        samples,
        sample_rate: cfg.sample_rate,
    }
}

fn hsl_to_rgb(h: f32, s: f32, l: f32) -> [f32; 3] {
    let c = (1.0 - (2.0 * l - 1.0).abs()) * s;
    let hp = (h.rem_euclid(1.0)) * 6.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = l - c / 2.0;
    [r + m, g + m, b + m]
}

fn stripe_params(au: usize) -> (f32, f32) {
    let angle = (au % 4) as f32 * std::f32::consts::FRAC_PI_4;
    let period = [4.0, 6.0, 10.0][au / 4];
    (angle, period)
}

/// Draw the pixels for one synthetic frame.
pub fn render_frame(f: &SynthFrame) -> Frame {
    let mut frame = Frame::zeros();
    let bg = hsl_to_rgb(f.expr as f32 / NUM_EXPRESSIONS as f32, 0.6, 0.5);
    let cell_w = FRAME_SIZE / GRID_COLS;
    let cell_h = FRAME_SIZE / GRID_ROWS;
    let mut rng = ChaCha8Rng::seed_from_u64(f.noise_seed);
    let noise = Normal::new(0.0f32, PIXEL_NOISE).expect("valid std");
    let px = frame.hwc_mut();
    for y in 0..FRAME_SIZE {
        for x in 0..FRAME_SIZE {
            let mut rgb = bg;
            let (col, row) = (x / cell_w, y / cell_h);
            if row < GRID_ROWS {
                let k = row * GRID_COLS + col;
                let (x0, y0) = (col * cell_w + MARGIN, row * cell_h + MARGIN);
                let inside = (x0..(col + 1) * cell_w - MARGIN).contains(&x) && (y0..(row + 1) * cell_h - MARGIN).contains(&y);
                if f.au[k] == 1 && inside {
                    let (angle, period) = stripe_params(k);
                    let u = (x - x0) as f32 * angle.cos() + (y - y0) as f32 * angle.sin();
                    let v = if (u / period).rem_euclid(1.0) < 0.5 { 0.95 } else { 0.05 };
                    rgb = [v; 3];
                }
            }
            let base = (y * FRAME_SIZE + x) * FRAME_CHANNELS;
            for c in 0..FRAME_CHANNELS {
                px[base + c] = (rgb[c] + noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
    }
    frame
}

impl SyntheticDataset {
    /// Write the on-disk layout consumed by data preparation:
    ///
    /// ```text
    /// <root>/{train,val}/{au,expr}/<video>.txt
    /// <root>/frames/<video>/<index:05>.jpg
    /// <root>/audio/<video>.wav
    /// <root>/videos.csv
    /// ```
    pub fn write_to(&self, root: &Path) -> Result<()> {
        let frames_dir = root.join("frames");
        let audio_dir = root.join("audio");
        for dir in [&frames_dir, &audio_dir] {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        for split in [&self.train, &self.val] {
            let base = root.join(&split.name);
            write_annotations(split, &base.join("au"), &base.join("expr"))?;
            for (vid, v) in &split.videos {
                let vdir = frames_dir.join(vid);
                std::fs::create_dir_all(&vdir).map_err(|e| Error::io(&vdir, e))?;
                for (i, f) in v.frame_paths.iter().enumerate() {
                    f.load()?.save_jpeg(&frames_dir.join(frame_relpath(vid, i)))?;
                }
                if let Some(a) = &v.audio {
                    write_wav(&audio_dir.join(format!("{vid}.wav")), a)?;
                }
            }
        }
        let all: Vec<&VideoRecord> = self
            .train
            .videos
            .values()
            .chain(self.val.videos.values())
            .collect();
        write_fps_table(&root.join("videos.csv"), &all)
    }
}
