use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::mel::{MelConfig, MelSpectrogram};
use crate::error::{Error, Result};
use crate::nn::{self, Conv1d, Init, Params};

pub const AUDIO_FEATURE_DIM: usize = 512;

/// One frame-level layer: a centred temporal kernel with the given dilation.
/// `kernel = 5, dilation = 1` sees offsets `{-2..2}`; `kernel = 3, dilation = 2`
/// sees `{-2, 0, 2}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TdnnLayerSpec {
    pub kernel: usize,
    pub dilation: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TdnnConfig {
    pub n_mels: usize,
    pub hidden: usize,
    pub output_dim: usize,
    pub layers: Vec<TdnnLayerSpec>,
    /// Log-mel inputs are mapped through `(x - shift) / scale` first.
    pub input_shift: f32,
    pub input_scale: f32,
}

impl Default for TdnnConfig {
    fn default() -> Self {
        let l = |kernel, dilation| TdnnLayerSpec { kernel, dilation };
        Self {
            n_mels: MelConfig::default().n_mels,
            hidden: 512,
            output_dim: AUDIO_FEATURE_DIM,
            layers: vec![l(5, 1), l(3, 2), l(3, 3), l(1, 1), l(1, 1)],
            input_shift: -11.5,
            input_scale: 11.5,
        }
    }
}

/// Frame-level time-delay network: a stack of dilated 1-D convolutions with
/// ReLU after each layer, emitting one feature vector per spectrogram column.
#[derive(Debug, Clone)]
pub struct TdnnModel {
    cfg: TdnnConfig,
    layers: Vec<Conv1d>,
}

impl TdnnModel {
    pub fn new(cfg: TdnnConfig, seed: u64) -> Result<Self> {
        if cfg.layers.is_empty() {
            return Err(Error::Config("TDNN needs at least one layer".into()));
        }
        if cfg.layers.iter().any(|l| l.kernel % 2 == 0 || l.dilation == 0) {
            return Err(Error::Config(
                "TDNN kernels must be odd and dilations positive".into(),
            ));
        }
        let mut init = Init::new(seed);
        let n = cfg.layers.len();
        let mut layers = Vec::with_capacity(n);
        for (i, spec) in cfg.layers.iter().enumerate() {
            let in_ch = if i == 0 { cfg.n_mels } else { cfg.hidden };
            let out_ch = if i + 1 == n { cfg.output_dim } else { cfg.hidden };
            layers.push(Conv1d::new(&mut init, in_ch, out_ch, spec.kernel, spec.dilation)?);
        }
        Ok(Self { cfg, layers })
    }

    pub fn config(&self) -> &TdnnConfig {
        &self.cfg
    }

    pub fn output_dim(&self) -> usize {
        self.cfg.output_dim
    }

    /// Steps on each side of a column that can influence its output.
    pub fn receptive_radius(&self) -> usize {
        self.layers.iter().map(Conv1d::radius).sum()
    }

    /// `(B, n_mels, T)` log-mel input to `(B, T, output_dim)` features.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, _) = x.dims3()?;
        if c != self.cfg.n_mels {
            return Err(Error::contract(format!(
                "TDNN expects {} mel bins, got {c}",
                self.cfg.n_mels
            )));
        }
        let mut h = x.affine(
            1.0 / self.cfg.input_scale as f64,
            -(self.cfg.input_shift / self.cfg.input_scale) as f64,
        )?;
        for layer in &self.layers {
            h = layer.forward(&h)?.relu()?;
        }
        Ok(h.transpose(1, 2)?.contiguous()?)
    }

    pub fn spec_tensor(spec: &MelSpectrogram) -> Result<Tensor> {
        Ok(Tensor::from_slice(
            spec.values(),
            (1, spec.n_mels(), spec.frames()),
            &nn::device(),
        )?)
    }

    /// Features for columns `[start, end)` of `spec`, identical to the same
    /// rows of a full-length pass. Only the receptive field around the range
    /// is computed.
    pub fn forward_range(&self, spec: &MelSpectrogram, start: usize, end: usize) -> Result<Tensor> {
        let end = end.min(spec.frames());
        let start = start.min(end);
        let r = self.receptive_radius();
        let lo = start.saturating_sub(r);
        let hi = (end + r).min(spec.frames());
        if hi == lo {
            return Ok(Tensor::zeros((0, self.cfg.output_dim), candle_core::DType::F32, &nn::device())?);
        }
        let part = spec.slice_frames(lo, hi);
        let out = self.forward(&Self::spec_tensor(&part)?)?.squeeze(0)?;
        Ok(out.narrow(0, start - lo, end - start)?)
    }

    pub fn params(&self) -> Params {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| nn::prefixed(&format!("layer{i}."), l.params()))
            .collect()
    }
}

/// `T x output_dim` features, one row per spectrogram column.
pub fn tdnn_features(spec: &MelSpectrogram, model: &TdnnModel) -> Result<Tensor> {
    if spec.frames() == 0 {
        return Ok(Tensor::zeros(
            (0, model.output_dim()),
            candle_core::DType::F32,
            &nn::device(),
        )?);
    }
    Ok(model.forward(&TdnnModel::spec_tensor(spec)?)?.squeeze(0)?)
}

/// Features of a silent spectrogram of `frames` columns, for videos without audio.
pub fn silence_features(frames: usize, model: &TdnnModel, mel: &MelConfig) -> Result<Tensor> {
    let spec = MelSpectrogram::silent(mel, frames, super::TARGET_SAMPLE_RATE);
    tdnn_features(&spec, model)
}
