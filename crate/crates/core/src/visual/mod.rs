//! Frame-level visual model: a shared image backbone feeding an AU head
//! (12 logits) and an expression head (7 logits), trained by alternating
//! between the two tasks.

mod augment;
mod backbone;
mod train;

pub use augment::{augment, AugmentConfig};
pub use backbone::{Backbone, ResidualCnn, ResidualCnnConfig, VISUAL_FEATURE_DIM};
pub use train::{
    select_task, train_multitask, train_multitask_with, AlternationMode, AlternationSchedule,
    LossConfig, StepRecord, TrainHistory, VisualTrainConfig,
};

use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::dataset::media::{Frame, FRAME_CHANNELS, FRAME_SIZE};
use crate::dataset::{Task, NUM_AUS, NUM_EXPRESSIONS};
use crate::error::{Error, Result};
use crate::nn::{self, Checkpoint, Init, Linear, Params};

pub const VISUAL_CHECKPOINT_KIND: &str = "visual";

#[derive(Debug)]
pub struct VisualModel {
    backbone: Box<dyn Backbone>,
    au_head: Linear,
    expr_head: Linear,
    frozen: bool,
    /// Alternation schedule the weights were trained with, if any.
    pub schedule: Option<AlternationSchedule>,
}

#[derive(Serialize, Deserialize)]
struct VisualMeta {
    backbone_kind: String,
    backbone_config: serde_json::Value,
    embed_dim: usize,
    schedule: Option<AlternationSchedule>,
}

impl VisualModel {
    pub fn new(backbone: Box<dyn Backbone>, seed: u64) -> Result<Self> {
        let dim = backbone.embed_dim();
        let mut init = Init::new(seed ^ 0x5EED_4EAD);
        Ok(Self {
            au_head: Linear::new(&mut init, dim, NUM_AUS)?,
            expr_head: Linear::new(&mut init, dim, NUM_EXPRESSIONS)?,
            backbone,
            frozen: false,
            schedule: None,
        })
    }

    /// Residual CNN backbone with the default 512-wide embedding.
    pub fn residual(cfg: ResidualCnnConfig, seed: u64) -> Result<Self> {
        Self::new(Box::new(ResidualCnn::new(cfg, seed)?), seed)
    }

    pub fn embed_dim(&self) -> usize {
        self.backbone.embed_dim()
    }

    pub fn backbone(&self) -> &dyn Backbone {
        self.backbone.as_ref()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Marks the model read-only; trainers refuse frozen models and the
    /// sequence stage requires one.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn head(&self, task: Task) -> &Linear {
        match task {
            Task::Au => &self.au_head,
            Task::Expression => &self.expr_head,
        }
    }

    /// `(N, 3, 112, 112)` batch to `(N, D)` embeddings.
    pub fn embed_batch(&self, images: &Tensor) -> Result<Tensor> {
        self.backbone.forward(images)
    }

    pub fn embed(&self, frame: &Frame) -> Result<Vec<f32>> {
        let x = frames_to_tensor(std::slice::from_ref(frame))?;
        nn::flat_f32(&self.embed_batch(&x)?)
    }

    /// Logits of one head for `(N, D)` or `(D,)` embeddings.
    pub fn task_logits(&self, embedding: &Tensor, task: Task) -> Result<Tensor> {
        let d = *embedding.dims().last().unwrap_or(&0);
        if d != self.embed_dim() {
            return Err(Error::contract(format!(
                "head expects {}-d embeddings, got {d}",
                self.embed_dim()
            )));
        }
        self.head(task).forward(embedding)
    }

    pub fn backbone_params(&self) -> Params {
        self.backbone.params()
    }

    pub fn head_params(&self, task: Task) -> Params {
        self.head(task).params()
    }

    /// All parameters, named `backbone.*`, `au_head.*`, `expr_head.*`.
    pub fn params(&self) -> Params {
        let mut p = nn::prefixed("backbone.", self.backbone_params());
        p.extend(nn::prefixed("au_head.", self.au_head.params()));
        p.extend(nn::prefixed("expr_head.", self.expr_head.params()));
        p
    }

    pub fn hash(&self) -> Result<String> {
        nn::hash_params(&self.params())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = VisualMeta {
            backbone_kind: self.backbone.kind().to_string(),
            backbone_config: self.backbone.config_json(),
            embed_dim: self.embed_dim(),
            schedule: self.schedule,
        };
        let mut ck = Checkpoint::new(VISUAL_CHECKPOINT_KIND, serde_json::to_value(meta)?);
        ck.push_params("", &self.params())?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    /// Rebuild a model with the built-in residual backbone from a checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(VISUAL_CHECKPOINT_KIND)?;
        let meta: VisualMeta = serde_json::from_value(ck.meta.clone())?;
        if meta.backbone_kind != ResidualCnn::KIND {
            return Err(Error::Checkpoint(format!(
                "backbone {} is not built in; use VisualModel::load_into",
                meta.backbone_kind
            )));
        }
        let cfg: ResidualCnnConfig = serde_json::from_value(meta.backbone_config)?;
        let mut model = Self::residual(cfg, 0)?;
        model.load_weights(ck)?;
        model.schedule = meta.schedule;
        Ok(model)
    }

    /// Copy checkpoint weights into this model (backbone and heads). This is
    /// also how externally pretrained backbone weights are supplied.
    pub fn load_weights(&mut self, ck: &Checkpoint) -> Result<()> {
        nn::load_params(&self.params(), ck, "")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Stack frames into an `(N, 3, 112, 112)` tensor.
pub fn frames_to_tensor(frames: &[Frame]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(frames.len() * Frame::LEN);
    for f in frames {
        data.extend(f.to_chw());
    }
    Ok(Tensor::from_vec(
        data,
        (frames.len(), FRAME_CHANNELS, FRAME_SIZE, FRAME_SIZE),
        &nn::device(),
    )?)
}
