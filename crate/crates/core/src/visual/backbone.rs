use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::dataset::media::{FRAME_CHANNELS, FRAME_SIZE};
use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, Init, Linear, Params};

pub const VISUAL_FEATURE_DIM: usize = 512;

/// Image encoder slot of the visual model. Consumes `(N, 3, 112, 112)` images
/// in `[0, 1]` and returns `(N, embed_dim)` embeddings. Heads and trainers only
/// see this trait, so any conforming encoder can be dropped in.
pub trait Backbone: Send + Sync + std::fmt::Debug {
    fn kind(&self) -> &'static str;
    fn embed_dim(&self) -> usize;
    fn forward(&self, images: &Tensor) -> Result<Tensor>;
    fn params(&self) -> Params;
    /// Construction parameters, stored in checkpoints.
    fn config_json(&self) -> serde_json::Value;
}

pub(crate) fn check_image_batch(images: &Tensor) -> Result<usize> {
    match images.dims() {
        [n, FRAME_CHANNELS, FRAME_SIZE, FRAME_SIZE] => Ok(*n),
        d => Err(Error::contract(format!(
            "expected (N, {FRAME_CHANNELS}, {FRAME_SIZE}, {FRAME_SIZE}) images, got {d:?}"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualCnnConfig {
    /// Channel width of each stride-2 stage.
    pub widths: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for ResidualCnnConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 64, 128],
            embed_dim: VISUAL_FEATURE_DIM,
        }
    }
}

#[derive(Debug, Clone)]
struct Stage {
    down: Conv2d,
    res_a: Conv2d,
    res_b: Conv2d,
}

impl Stage {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = standardize(&self.down.forward(x)?)?.relu()?;
        let r = self.res_b.forward(&self.res_a.forward(&h)?.relu()?)?;
        Ok((h + r)?.relu()?)
    }

    fn params(&self) -> Params {
        let mut p = nn::prefixed("down.", self.down.params());
        p.extend(nn::prefixed("res_a.", self.res_a.params()));
        p.extend(nn::prefixed("res_b.", self.res_b.params()));
        p
    }
}

/// Zero mean, unit variance over each sample's `(C, H, W)` activations.
fn standardize(x: &Tensor) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let flat = x.flatten_from(1)?;
    let centered = flat.broadcast_sub(&flat.mean_keepdim(1)?)?;
    let std = (centered.sqr()?.mean_keepdim(1)? + 1e-5)?.sqrt()?;
    Ok(centered.broadcast_div(&std)?.reshape(dims)?)
}

/// Small residual CNN: stride-2 stages (each a downsampling conv followed by a
/// two-conv residual block), global average pooling and a linear projection
/// to the embedding size.
#[derive(Debug, Clone)]
pub struct ResidualCnn {
    cfg: ResidualCnnConfig,
    stages: Vec<Stage>,
    proj: Linear,
}

impl ResidualCnn {
    pub const KIND: &'static str = "residual_cnn";

    pub fn new(cfg: ResidualCnnConfig, seed: u64) -> Result<Self> {
        if cfg.widths.is_empty() || cfg.widths.contains(&0) || cfg.embed_dim == 0 {
            return Err(Error::Config(format!("invalid backbone config {cfg:?}")));
        }
        let mut init = Init::new(seed);
        let mut stages = Vec::new();
        let mut in_ch = FRAME_CHANNELS;
        for &w in &cfg.widths {
            stages.push(Stage {
                down: Conv2d::new(&mut init, in_ch, w, 3, 2)?,
                res_a: Conv2d::new(&mut init, w, w, 3, 1)?,
                res_b: Conv2d::new(&mut init, w, w, 3, 1)?.scaled(0.1)?,
            });
            in_ch = w;
        }
        let proj = Linear::new(&mut init, in_ch, cfg.embed_dim)?;
        Ok(Self { cfg, stages, proj })
    }

    pub fn config(&self) -> &ResidualCnnConfig {
        &self.cfg
    }
}

impl Backbone for ResidualCnn {
    fn kind(&self) -> &'static str {
        Self::KIND
    }

    fn embed_dim(&self) -> usize {
        self.cfg.embed_dim
    }

    fn forward(&self, images: &Tensor) -> Result<Tensor> {
        check_image_batch(images)?;
        let mut h = images.clone();
        for s in &self.stages {
            h = s.forward(&h)?;
        }
        let pooled = h.mean(D::Minus1)?.mean(D::Minus1)?;
        self.proj.forward(&pooled)
    }

    fn params(&self) -> Params {
        let mut p = Params::new();
        for (i, s) in self.stages.iter().enumerate() {
            p.extend(nn::prefixed(&format!("stage{i}."), s.params()));
        }
        p.extend(nn::prefixed("proj.", self.proj.params()));
        p
    }

    fn config_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.cfg).expect("config serializes")
    }
}
