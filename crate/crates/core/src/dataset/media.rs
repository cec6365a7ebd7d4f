//! Frame images and audio waveforms.

use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::synth::{render_frame, SynthFrame};
use crate::error::{Error, Result};

pub const FRAME_SIZE: usize = 112;
pub const FRAME_CHANNELS: usize = 3;
/// All audio is resampled to this rate when read.
pub const TARGET_SAMPLE_RATE: u32 = 16_000;

/// A 112x112 RGB image, row-major HWC, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    data: Vec<f32>,
}

impl Frame {
    pub const LEN: usize = FRAME_SIZE * FRAME_SIZE * FRAME_CHANNELS;

    pub fn from_hwc(data: Vec<f32>) -> Result<Self> {
        if data.len() != Self::LEN {
            return Err(Error::contract(format!(
                "frame must hold {}x{}x{} values, got {}",
                FRAME_SIZE,
                FRAME_SIZE,
                FRAME_CHANNELS,
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::contract("frame values must lie in [0, 1]"));
        }
        Ok(Self { data })
    }

    pub fn zeros() -> Self {
        Self {
            data: vec![0.0; Self::LEN],
        }
    }

    pub fn as_hwc(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn hwc_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * FRAME_SIZE + x) * FRAME_CHANNELS + c]
    }

    /// Channel-major copy, the layout the convolution backbone consumes.
    pub fn to_chw(&self) -> Vec<f32> {
        let mut out = vec![0.0; Self::LEN];
        let plane = FRAME_SIZE * FRAME_SIZE;
        for (i, px) in self.data.chunks_exact(FRAME_CHANNELS).enumerate() {
            for c in 0..FRAME_CHANNELS {
                out[c * plane + i] = px[c];
            }
        }
        out
    }

    pub fn from_image(img: &RgbImage) -> Self {
        let img = if img.width() as usize != FRAME_SIZE || img.height() as usize != FRAME_SIZE {
            image::imageops::resize(
                img,
                FRAME_SIZE as u32,
                FRAME_SIZE as u32,
                image::imageops::FilterType::Triangle,
            )
        } else {
            img.clone()
        };
        Self {
            data: img.as_raw().iter().map(|&b| b as f32 / 255.0).collect(),
        }
    }

    pub fn to_image(&self) -> RgbImage {
        let raw: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        ImageBuffer::<Rgb<u8>, _>::from_raw(FRAME_SIZE as u32, FRAME_SIZE as u32, raw)
            .expect("buffer length matches dimensions")
    }

    pub fn save_jpeg(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc =
            image::codecs::jpeg::JpegEncoder::new_with_quality(std::io::BufWriter::new(file), 95);
        enc.encode_image(&self.to_image())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        Ok(Self::from_image(&img))
    }
}

/// Where a frame's pixels come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameRef {
    Path(PathBuf),
    /// Rendered on demand from its labels, see [`super::synth`].
    Synthetic(SynthFrame),
}

impl FrameRef {
    pub fn exists(&self) -> bool {
        match self {
            FrameRef::Path(p) => p.is_file(),
            FrameRef::Synthetic(_) => true,
        }
    }

    pub fn load(&self) -> Result<Frame> {
        match self {
            FrameRef::Path(p) => Frame::load(p),
            FrameRef::Synthetic(s) => Ok(render_frame(s)),
        }
    }
}

/// Decode frames in order, on `workers` threads when more than one.
pub fn load_frames(refs: &[FrameRef], workers: usize) -> Result<Vec<Frame>> {
    if workers <= 1 {
        return refs.iter().map(FrameRef::load).collect();
    }
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| refs.par_iter().map(FrameRef::load).collect())
}

/// Mono waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct Audio {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Audio {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || self.samples.is_empty() {
            return Err(Error::contract("audio needs a positive rate and samples"));
        }
        Ok(())
    }

    pub fn duration_sec(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Linear-interpolation resampling.
    pub fn resampled(&self, rate: u32) -> Audio {
        if rate == self.sample_rate || self.samples.is_empty() {
            return self.clone();
        }
        let ratio = self.sample_rate as f64 / rate as f64;
        let n = ((self.samples.len() as f64) / ratio).floor().max(1.0) as usize;
        let last = self.samples.len() - 1;
        let samples = (0..n)
            .map(|i| {
                let pos = i as f64 * ratio;
                let i0 = (pos.floor() as usize).min(last);
                let i1 = (i0 + 1).min(last);
                let frac = (pos - i0 as f64) as f32;
                self.samples[i0] * (1.0 - frac) + self.samples[i1] * frac
            })
            .collect();
        Audio {
            samples,
            sample_rate: rate,
        }
    }
}

/// Read a PCM WAV file, mix down to mono and resample to 16 kHz.
pub fn read_wav(path: &Path) -> Result<Audio> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader.samples::<f32>().collect::<Result<_, _>>()?,
        hound::SampleFormat::Int => {
            let scale = (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 / scale))
                .collect::<Result<_, _>>()?
        }
    };
    let samples = interleaved
        .chunks(channels)
        .map(|c| c.iter().sum::<f32>() / channels as f32)
        .collect();
    let audio = Audio {
        samples,
        sample_rate: spec.sample_rate,
    };
    audio.validate().map_err(|_| {
        Error::Data(format!("{} holds no audio samples", path.display()))
    })?;
    Ok(audio.resampled(TARGET_SAMPLE_RATE))
}

/// Write 16-bit mono PCM.
pub fn write_wav(path: &Path, audio: &Audio) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in &audio.samples {
        w.write_sample((s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16)?;
    }
    w.finalize()?;
    Ok(())
}
