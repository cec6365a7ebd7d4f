use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::media::{Frame, FRAME_CHANNELS, FRAME_SIZE};

/// Training-time image perturbations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Side of the random square crop is drawn from `[min_crop, 112]`.
    pub min_crop: usize,
    /// Maximum hue shift, as a fraction of the hue circle.
    pub hue: f32,
    /// Maximum relative change of saturation.
    pub saturation: f32,
    /// Maximum relative change of lightness.
    pub lightness: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            min_crop: 100,
            hue: 0.05,
            saturation: 0.1,
            lightness: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            flip_prob: 0.0,
            min_crop: FRAME_SIZE,
            hue: 0.0,
            saturation: 0.0,
            lightness: 0.0,
        }
    }
}

/// Random horizontal flip, random square crop resized back to 112x112
/// (bilinear), then hue/saturation/lightness jitter. Output stays in `[0, 1]`.
pub fn augment<R: Rng>(frame: &Frame, cfg: &AugmentConfig, rng: &mut R) -> Frame {
    let flip = cfg.flip_prob > 0.0 && rng.gen_bool(cfg.flip_prob.min(1.0));
    let min_crop = cfg.min_crop.clamp(1, FRAME_SIZE);
    let side = if min_crop < FRAME_SIZE {
        rng.gen_range(min_crop..=FRAME_SIZE)
    } else {
        FRAME_SIZE
    };
    let ox = rng.gen_range(0..=FRAME_SIZE - side);
    let oy = rng.gen_range(0..=FRAME_SIZE - side);
    let mut sym = |m: f32| if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 };
    let (dh, ds, dl) = (sym(cfg.hue), sym(cfg.saturation), sym(cfg.lightness));

    let scale = side as f32 / FRAME_SIZE as f32;
    let mut out = vec![0.0f32; Frame::LEN];
    for y in 0..FRAME_SIZE {
        let sy = oy as f32 + (y as f32 + 0.5) * scale - 0.5;
        for x in 0..FRAME_SIZE {
            let xx = if flip { FRAME_SIZE - 1 - x } else { x };
            let sx = ox as f32 + (xx as f32 + 0.5) * scale - 0.5;
            let base = (y * FRAME_SIZE + x) * FRAME_CHANNELS;
            let mut rgb = [0.0f32; 3];
            for (c, v) in rgb.iter_mut().enumerate() {
                *v = bilinear(frame, sy, sx, c);
            }
            if dh != 0.0 || ds != 0.0 || dl != 0.0 {
                let (h, s, l) = rgb_to_hsl(rgb);
                rgb = hsl_to_rgb(
                    (h + dh).rem_euclid(1.0),
                    (s * (1.0 + ds)).clamp(0.0, 1.0),
                    (l * (1.0 + dl)).clamp(0.0, 1.0),
                );
            }
            for c in 0..FRAME_CHANNELS {
                out[base + c] = rgb[c].clamp(0.0, 1.0);
            }
        }
    }
    Frame::from_hwc(out).expect("augmented frame keeps shape and range")
}

fn bilinear(f: &Frame, y: f32, x: f32, c: usize) -> f32 {
    let max = (FRAME_SIZE - 1) as f32;
    let (y, x) = (y.clamp(0.0, max), x.clamp(0.0, max));
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(FRAME_SIZE - 1), (x0 + 1).min(FRAME_SIZE - 1));
    let (fy, fx) = (y - y0 as f32, x - x0 as f32);
    if fy == 0.0 && fx == 0.0 {
        return f.get(y0, x0, c);
    }
    let top = f.get(y0, x0, c) * (1.0 - fx) + f.get(y0, x1, c) * fx;
    let bottom = f.get(y1, x0, c) * (1.0 - fx) + f.get(y1, x1, c) * fx;
    top * (1.0 - fy) + bottom * fy
}

fn rgb_to_hsl([r, g, b]: [f32; 3]) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let l = (max + min) / 2.0;
    let d = max - min;
    if d == 0.0 {
        return (0.0, 0.0, l);
    }
    let s = d / (1.0 - (2.0 * l - 1.0).abs()).max(1e-6);
    let h = if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    };
    (h / 6.0, s.min(1.0), l)
}

fn hsl_to_rgb(h: f32, s: f32, l: f32) -> [f32; 3] {
    let c = (1.0 - (2.0 * l - 1.0).abs()) * s;
    let hp = h * 6.0;
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
