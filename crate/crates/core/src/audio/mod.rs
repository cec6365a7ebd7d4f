//! Waveform front end: log-mel spectrograms and frame-level TDNN features.

mod mel;
mod tdnn;

pub use crate::dataset::media::TARGET_SAMPLE_RATE;
pub use mel::{compute_mel_spectrogram, hz_to_mel, mel_to_hz, MelConfig, MelFilterbank, MelSpectrogram};
pub use tdnn::{
    silence_features, tdnn_features, TdnnConfig, TdnnLayerSpec, TdnnModel, AUDIO_FEATURE_DIM,
};
