//! Log-mel spectrogram and TDNN frame features for a one-second two-tone
//! signal, plus the frame-to-audio-row alignment used for fusion.
//!
//! ```text
//! cargo run --release --example audio_features
//! ```

use av_affect::audio::{compute_mel_spectrogram, tdnn_features, MelConfig, TdnnConfig, TdnnModel};
use av_affect::sequence::audio_row;

fn main() -> av_affect::Result<()> {
    let sr = 16_000u32;
    let wave: Vec<f32> = (0..sr as usize)
        .map(|i| {
            let t = i as f64 / sr as f64;
            (0.3 * (2.0 * std::f64::consts::PI * 800.0 * t).sin()
                + 0.2 * (2.0 * std::f64::consts::PI * 5600.0 * t).sin()) as f32
        })
        .collect();
    let cfg = MelConfig::default();
    let spec = compute_mel_spectrogram(&wave, sr, &cfg)?;
    println!(
        "{} samples -> {} mel bins x {} frames (window {} / hop {} samples, n_fft {})",
        wave.len(),
        spec.n_mels(),
        spec.frames(),
        cfg.window_samples(sr),
        cfg.stride_samples(sr),
        cfg.n_fft(sr)
    );
    let mean: Vec<f32> = (0..spec.n_mels())
        .map(|m| (0..spec.frames()).map(|t| spec.get(m, t)).sum::<f32>() / spec.frames() as f32)
        .collect();
    let peak = |lo: usize, hi: usize| (lo..hi).max_by(|&a, &b| mean[a].total_cmp(&mean[b])).unwrap();
    println!("loudest mel bins: {} (low tone), {} (high tone)", peak(0, 32), peak(32, 64));

    let tdnn = TdnnModel::new(
        TdnnConfig {
            hidden: 128,
            ..TdnnConfig::default()
        },
        0,
    )?;
    let feats = tdnn_features(&spec, &tdnn)?;
    println!(
        "TDNN features {:?}, receptive radius {} frames",
        feats.dims(),
        tdnn.receptive_radius()
    );

    for frame in [0, 15, 29] {
        let row = audio_row(frame, 30.0, cfg.stride_sec, spec.frames());
        println!("video frame {frame:>2} at 30 fps -> audio row {row}");
    }
    Ok(())
}
