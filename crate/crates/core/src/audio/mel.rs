use std::fmt::Write as _;
use std::path::Path;

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub n_mels: usize,
    pub window_sec: f64,
    pub stride_sec: f64,
    /// Added to mel energies before the log.
    pub log_eps: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            n_mels: 64,
            window_sec: 0.010,
            stride_sec: 0.005,
            log_eps: 1e-10,
        }
    }
}

impl MelConfig {
    pub fn window_samples(&self, sample_rate: u32) -> usize {
        (self.window_sec * sample_rate as f64).round() as usize
    }

    pub fn stride_samples(&self, sample_rate: u32) -> usize {
        ((self.stride_sec * sample_rate as f64).round() as usize).max(1)
    }

    pub fn n_fft(&self, sample_rate: u32) -> usize {
        self.window_samples(sample_rate).next_power_of_two()
    }

    /// Number of analysis frames for `num_samples` input samples, or `None`
    /// when the input is shorter than one window.
    pub fn num_frames(&self, num_samples: usize, sample_rate: u32) -> Option<usize> {
        let win = self.window_samples(sample_rate);
        let hop = self.stride_samples(sample_rate);
        (num_samples >= win && win > 0).then(|| (num_samples - win) / hop + 1)
    }
}

/// Log-mel energies, `n_mels` rows by `frames` columns, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    values: Vec<f32>,
    n_mels: usize,
    frames: usize,
    pub window_sec: f64,
    pub stride_sec: f64,
    pub sample_rate: u32,
}

impl MelSpectrogram {
    /// Spectrogram of a silent input: every entry equals `log(eps)`.
    pub fn silent(cfg: &MelConfig, frames: usize, sample_rate: u32) -> Self {
        Self {
            values: vec![cfg.log_eps.ln() as f32; cfg.n_mels * frames],
            n_mels: cfg.n_mels,
            frames,
            window_sec: cfg.window_sec,
            stride_sec: cfg.stride_sec,
            sample_rate,
        }
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, mel: usize, frame: usize) -> f32 {
        self.values[mel * self.frames + frame]
    }

    /// Columns `[start, end)` as a new spectrogram.
    pub fn slice_frames(&self, start: usize, end: usize) -> Self {
        let end = end.min(self.frames);
        let start = start.min(end);
        let len = end - start;
        let mut values = Vec::with_capacity(self.n_mels * len);
        for m in 0..self.n_mels {
            let row = &self.values[m * self.frames..(m + 1) * self.frames];
            values.extend_from_slice(&row[start..end]);
        }
        Self {
            values,
            frames: len,
            ..*self
        }
    }

    /// Debug dump: `n_mels` lines of `frames` comma-separated values.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for m in 0..self.n_mels {
            let row = &self.values[m * self.frames..(m + 1) * self.frames];
            let toks: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            writeln!(s, "{}", toks.join(",")).unwrap();
        }
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale spanning `[0, sample_rate / 2]`.
///
/// Each weight is the triangle's mean over the frequency interval a bin
/// represents (`bin_hz +- resolution / 2`), so narrow low-frequency filters
/// that fall between bin centres still get non-zero mass.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    weights: Vec<f64>,
    n_mels: usize,
    n_bins: usize,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: u32) -> Self {
        let n_bins = n_fft / 2 + 1;
        let nyquist = sample_rate as f64 / 2.0;
        let bin_hz = sample_rate as f64 / n_fft as f64;
        let top = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
            .collect();
        let mut weights = vec![0.0; n_mels * n_bins];
        for m in 0..n_mels {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..n_bins {
                let a = (k as f64 - 0.5) * bin_hz;
                let b = (k as f64 + 0.5) * bin_hz;
                let (a, b) = (a.max(0.0), b.min(nyquist));
                weights[m * n_bins + k] = triangle_mean(l, c, r, a, b, bin_hz);
            }
        }
        Self {
            weights,
            n_mels,
            n_bins,
        }
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    fn apply(&self, power: &[f64], out: &mut [f64]) {
        for (m, o) in out.iter_mut().enumerate() {
            *o = self.row(m).iter().zip(power).map(|(w, p)| w * p).sum();
        }
    }
}

fn triangle(l: f64, c: f64, r: f64, f: f64) -> f64 {
    if f <= l || f >= r {
        0.0
    } else if f <= c {
        (f - l) / (c - l)
    } else {
        (r - f) / (r - c)
    }
}

/// Integral of the triangle over `[a, b]`, divided by `width`. The triangle is
/// linear between its vertices, so trapezoids over the vertices inside the
/// interval integrate it exactly.
fn triangle_mean(l: f64, c: f64, r: f64, a: f64, b: f64, width: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let mut pts = vec![a, b];
    pts.extend([l, c, r].into_iter().filter(|&p| p > a && p < b));
    pts.sort_by(f64::total_cmp);
    let area: f64 = pts
        .windows(2)
        .map(|w| 0.5 * (triangle(l, c, r, w[0]) + triangle(l, c, r, w[1])) * (w[1] - w[0]))
        .sum();
    area / width
}

/// Periodic Hann window.
fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Hann-windowed power spectrum of each `window`-sample frame (hop `stride`,
/// no centering), zero-padded to the next power of two, projected on the mel
/// filterbank and log-compressed.
pub fn compute_mel_spectrogram(
    waveform: &[f32],
    sample_rate: u32,
    cfg: &MelConfig,
) -> Result<MelSpectrogram> {
    if sample_rate == 0 {
        return Err(Error::contract("sample rate must be positive"));
    }
    let win = cfg.window_samples(sample_rate);
    let hop = cfg.stride_samples(sample_rate);
    let frames = cfg
        .num_frames(waveform.len(), sample_rate)
        .ok_or(Error::TooShort {
            samples: waveform.len(),
            window: win,
        })?;
    let n_fft = cfg.n_fft(sample_rate);
    let bank = MelFilterbank::new(cfg.n_mels, n_fft, sample_rate);
    let window = hann(win);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut power = vec![0.0; bank.n_bins()];
    let mut mel = vec![0.0; cfg.n_mels];
    let mut values = vec![0.0f32; cfg.n_mels * frames];
    for t in 0..frames {
        let start = t * hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = if i < win {
                Complex::new(waveform[start + i] as f64 * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (p, x) in power.iter_mut().zip(&buf) {
            *p = x.norm_sqr();
        }
        bank.apply(&power, &mut mel);
        for (m, e) in mel.iter().enumerate() {
            values[m * frames + t] = (e + cfg.log_eps).ln() as f32;
        }
    }
    Ok(MelSpectrogram {
        values,
        n_mels: cfg.n_mels,
        frames,
        window_sec: cfg.window_sec,
        stride_sec: cfg.stride_sec,
        sample_rate,
    })
}
