use candle_core::{DType, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::align::{FeatureSequence, DEFAULT_WINDOW};
use crate::audio::AUDIO_FEATURE_DIM;
use crate::dataset::{Task, NUM_AUS, NUM_EXPRESSIONS};
use crate::error::{Error, Result};
use crate::nn::{self, Init, LayerNorm, Linear, Params};
use crate::visual::VISUAL_FEATURE_DIM;

const MASKED_SCORE: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceConfig {
    pub dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout: f32,
    pub window: usize,
    pub encoder_layers: usize,
    pub positional_encoding: bool,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        Self {
            dim: VISUAL_FEATURE_DIM + AUDIO_FEATURE_DIM,
            heads: 8,
            ff_dim: 2048,
            dropout: 0.1,
            window: DEFAULT_WINDOW,
            encoder_layers: 1,
            positional_encoding: true,
        }
    }
}

impl SequenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.window == 0 || self.ff_dim == 0 || self.encoder_layers == 0 {
            return Err(Error::Config(
                "window, ff_dim and encoder_layers must be >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Post-norm transformer encoder layer: multi-head self-attention with a key
/// padding mask, then a ReLU feed-forward block, each wrapped in a residual
/// connection and layer norm.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    heads: usize,
    dropout: f32,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    norm1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(init: &mut Init, cfg: &SequenceConfig) -> Result<Self> {
        let d = cfg.dim;
        Ok(Self {
            heads: cfg.heads,
            dropout: cfg.dropout,
            q: Linear::new(init, d, d)?,
            k: Linear::new(init, d, d)?,
            v: Linear::new(init, d, d)?,
            o: Linear::new(init, d, d)?,
            norm1: LayerNorm::new(init, d)?,
            ff1: Linear::new(init, d, cfg.ff_dim)?,
            ff2: Linear::new(init, cfg.ff_dim, d)?,
            norm2: LayerNorm::new(init, d)?,
        })
    }

    /// `x`: `(B, L, D)`; `mask`: `(B, L)` with 1 for real tokens. Dropout is
    /// applied only when `rng` is given.
    pub fn forward(&self, x: &Tensor, mask: &Tensor, mut rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let (b, l, d) = x.dims3()?;
        let h = self.heads;
        let dh = d / h;
        let split = |t: Tensor| -> Result<Tensor> {
            Ok(t.reshape((b, l, h, dh))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.q.forward(x)?)?;
        let k = split(self.k.forward(x)?)?;
        let v = split(self.v.forward(x)?)?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (dh as f64).sqrt())?;
        // padded keys get a large negative score
        let bias = mask.affine(-MASKED_SCORE, MASKED_SCORE)?.reshape((b, 1, 1, l))?;
        let mut attn = nn::softmax_last(&scores.broadcast_add(&bias)?)?;
        if let Some(r) = rng.as_deref_mut() {
            attn = nn::dropout(&attn, self.dropout, r)?;
        }
        let ctx = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, l, d))?;
        let mut a = self.o.forward(&ctx)?;
        if let Some(r) = rng.as_deref_mut() {
            a = nn::dropout(&a, self.dropout, r)?;
        }
        let x = self.norm1.forward(&(x + a)?)?;
        let mut f = self.ff2.forward(&self.ff1.forward(&x)?.relu()?)?;
        if let Some(r) = rng.as_deref_mut() {
            f = nn::dropout(&f, self.dropout, r)?;
        }
        self.norm2.forward(&(x + f)?)
    }

    pub fn params(&self) -> Params {
        let mut p = Params::new();
        for (name, layer) in [("q", &self.q), ("k", &self.k), ("v", &self.v), ("o", &self.o), ("ff1", &self.ff1), ("ff2", &self.ff2)] {
            p.extend(nn::prefixed(&format!("{name}."), layer.params()));
        }
        p.extend(nn::prefixed("norm1.", self.norm1.params()));
        p.extend(nn::prefixed("norm2.", self.norm2.params()));
        p
    }
}

/// Standard sinusoidal table, `(len, dim)`.
pub fn positional_encoding(len: usize, dim: usize) -> Result<Tensor> {
    let mut v = vec![0f32; len * dim];
    for pos in 0..len {
        for i in (0..dim).step_by(2) {
            let angle = pos as f64 / 10_000f64.powf(i as f64 / dim as f64);
            v[pos * dim + i] = angle.sin() as f32;
            if i + 1 < dim {
                v[pos * dim + i + 1] = angle.cos() as f32;
            }
        }
    }
    Ok(Tensor::from_vec(v, (len, dim), &nn::device())?)
}

/// Per-frame outputs of the sequence model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePrediction {
    pub au_probs: [f64; NUM_AUS],
    pub expr_probs: [f64; NUM_EXPRESSIONS],
}

impl FramePrediction {
    pub fn expr_class(&self) -> u8 {
        let mut best = 0;
        for c in 1..NUM_EXPRESSIONS {
            if self.expr_probs[c] > self.expr_probs[best] {
                best = c;
            }
        }
        best as u8
    }
}

#[derive(Debug, Clone)]
pub struct SequenceModel {
    cfg: SequenceConfig,
    layers: Vec<EncoderLayer>,
    au_out: Linear,
    expr_out: Linear,
    pe: Tensor,
}

impl SequenceModel {
    pub fn new(cfg: SequenceConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init::new(seed);
        let layers = (0..cfg.encoder_layers)
            .map(|_| EncoderLayer::new(&mut init, &cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            au_out: Linear::new(&mut init, cfg.dim, NUM_AUS)?,
            expr_out: Linear::new(&mut init, cfg.dim, NUM_EXPRESSIONS)?,
            pe: positional_encoding(cfg.window, cfg.dim)?,
            layers,
            cfg,
        })
    }

    pub fn config(&self) -> &SequenceConfig {
        &self.cfg
    }

    pub fn set_positional_encoding(&mut self, on: bool) {
        self.cfg.positional_encoding = on;
    }

    /// `(B, L, D)` tokens and `(B, L)` mask to `(B, L, D)` encodings.
    pub fn encode_batch(&self, x: &Tensor, mask: &Tensor, mut rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let (_, l, d) = x.dims3()?;
        if d != self.cfg.dim || l > self.cfg.window {
            return Err(Error::contract(format!(
                "encoder takes up to {} tokens of width {}, got {l} x {d}",
                self.cfg.window, self.cfg.dim
            )));
        }
        let mut h = if self.cfg.positional_encoding {
            x.broadcast_add(&self.pe.narrow(0, 0, l)?)?
        } else {
            x.clone()
        };
        for layer in &self.layers {
            h = layer.forward(&h, mask, rng.as_deref_mut())?;
        }
        Ok(h)
    }

    pub fn head(&self, task: Task) -> &Linear {
        match task {
            Task::Au => &self.au_out,
            Task::Expression => &self.expr_out,
        }
    }

    pub fn logits(&self, encoded: &Tensor, task: Task) -> Result<Tensor> {
        self.head(task).forward(encoded)
    }

    pub fn encoder_params(&self) -> Params {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| nn::prefixed(&format!("layer{i}."), l.params()))
            .collect()
    }

    pub fn head_params(&self, task: Task) -> Params {
        self.head(task).params()
    }

    /// Named `encoder.*`, `au_out.*`, `expr_out.*`.
    pub fn params(&self) -> Params {
        let mut p = nn::prefixed("encoder.", self.encoder_params());
        p.extend(nn::prefixed("au_out.", self.au_out.params()));
        p.extend(nn::prefixed("expr_out.", self.expr_out.params()));
        p
    }
}

/// Eval-mode encoding of one window, `(window, D)`.
pub fn encode(seq: &FeatureSequence, model: &SequenceModel) -> Result<Tensor> {
    let x = seq.fused.unsqueeze(0)?;
    Ok(model.encode_batch(&x, &seq.mask_tensor()?, None)?.squeeze(0)?)
}

/// Sigmoid AU and softmax expression probabilities for every real row.
pub fn predict_frames(encoded: &Tensor, mask: &[bool], model: &SequenceModel) -> Result<Vec<FramePrediction>> {
    let (l, _) = encoded.dims2()?;
    if l != mask.len() {
        return Err(Error::contract(format!("{l} rows but {} mask entries", mask.len())));
    }
    let au = nn::sigmoid(&model.logits(encoded, Task::Au)?)?
        .to_dtype(DType::F64)?
        .to_vec2::<f64>()?;
    let ex = nn::softmax_last(&model.logits(encoded, Task::Expression)?)?
        .to_dtype(DType::F64)?
        .to_vec2::<f64>()?;
    Ok(mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| FramePrediction {
            au_probs: au[i].clone().try_into().expect("12 AU outputs"),
            expr_probs: ex[i].clone().try_into().expect("7 expression outputs"),
        })
        .collect())
}

#[cfg(test)]
fn max_abs_diff(a: &Tensor, b: &Tensor) -> Result<f32> {
    Ok((a - b)?.abs()?.flatten_all()?.max(candle_core::D::Minus1)?.to_scalar::<f32>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SequenceConfig {
        SequenceConfig {
            dim: 16,
            heads: 4,
            ff_dim: 32,
            window: 6,
            ..SequenceConfig::default()
        }
    }

    fn tokens(l: usize, d: usize, seed: u64) -> Tensor {
        let mut init = Init::new(seed);
        init.normal(&[l, d], 1.0).unwrap().as_tensor().clone()
    }

    #[test]
    fn shape_preserved_and_probabilities_valid() {
        let m = SequenceModel::new(SequenceConfig::default(), 0).unwrap();
        let s = FeatureSequence::new("v", 0, tokens(25, 1024, 1), 30).unwrap();
        let enc = encode(&s, &m).unwrap();
        assert_eq!(enc.dims(), &[30, 1024]);
        let preds = predict_frames(&enc, &s.mask, &m).unwrap();
        assert_eq!(preds.len(), 25);
        for p in &preds {
            assert!((p.expr_probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(p.au_probs.iter().all(|&x| x > 0.0 && x < 1.0));
        }
    }

    #[test]
    fn permutation_equivariant_without_positions() {
        let mut m = SequenceModel::new(small_cfg(), 3).unwrap();
        m.set_positional_encoding(false);
        let x = tokens(6, 16, 2);
        let perm = Tensor::from_vec(vec![1u32, 0, 2, 3, 4, 5], 6, &nn::device()).unwrap();
        let xp = x.index_select(&perm, 0).unwrap();
        let a = encode(&FeatureSequence::new("v", 0, x, 6).unwrap(), &m).unwrap();
        let b = encode(&FeatureSequence::new("v", 0, xp, 6).unwrap(), &m).unwrap();
        assert!(max_abs_diff(&a.index_select(&perm, 0).unwrap(), &b).unwrap() < 1e-5);
    }

    #[test]
    fn padding_content_does_not_leak() {
        let m = SequenceModel::new(small_cfg(), 4).unwrap();
        let mut s = FeatureSequence::new("v", 0, tokens(4, 16, 5), 6).unwrap();
        let a = encode(&s, &m).unwrap().narrow(0, 0, 4).unwrap();
        let junk = tokens(2, 16, 6);
        s.fused = Tensor::cat(&[&s.fused.narrow(0, 0, 4).unwrap(), &junk], 0).unwrap();
        let b = encode(&s, &m).unwrap().narrow(0, 0, 4).unwrap();
        assert!(max_abs_diff(&a, &b).unwrap() < 1e-6);
    }

    #[test]
    fn dropout_only_in_training() {
        use rand::SeedableRng;
        let m = SequenceModel::new(small_cfg(), 5).unwrap();
        let x = tokens(6, 16, 7).unsqueeze(0).unwrap();
        let mask = Tensor::ones((1, 6), DType::F32, &nn::device()).unwrap();
        let e1 = m.encode_batch(&x, &mask, None).unwrap();
        let e2 = m.encode_batch(&x, &mask, None).unwrap();
        assert_eq!(max_abs_diff(&e1, &e2).unwrap(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = m.encode_batch(&x, &mask, Some(&mut rng)).unwrap();
        assert!(max_abs_diff(&e1, &t).unwrap() > 0.0);
    }

    #[test]
    fn bad_configs_rejected() {
        let cfg = SequenceConfig {
            heads: 7,
            ..SequenceConfig::default()
        };
        assert!(SequenceModel::new(cfg, 0).is_err());
        let cfg = SequenceConfig {
            encoder_layers: 0,
            ..SequenceConfig::default()
        };
        assert!(SequenceModel::new(cfg, 0).is_err());
    }
}
