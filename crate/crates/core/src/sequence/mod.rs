//! Audio-visual fusion over 30-frame windows: per-frame visual embeddings from
//! the frozen visual model are concatenated with aligned TDNN audio features
//! and encoded by a single transformer encoder layer with AU and expression
//! output heads.

mod align;
mod encoder;
mod predict;
mod track;
mod train;

pub use align::{
    align_audio_to_frames, audio_row, audio_rows, chunk_video, fuse, mask_tensor, FeatureSequence,
    DEFAULT_WINDOW,
};
pub use encoder::{
    encode, positional_encoding, predict_frames, EncoderLayer, FramePrediction, SequenceConfig,
    SequenceModel,
};
pub use predict::{
    evaluate_split, predict_track, write_prediction_csv, write_probability_csv, EvalOutcome,
    VideoPredictions,
};
pub use track::{batch_windows, tracks_from_split, VideoTrack};
pub use train::{train_sequence, train_sequence_on_tracks, SequenceTrainConfig};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::{MelConfig, TdnnConfig, TdnnModel};
use crate::error::Result;
use crate::nn::{self, Checkpoint, Params};

pub const AUDIO_SEQUENCE_CHECKPOINT_KIND: &str = "audio_sequence";

/// The trainable second-stage model: TDNN audio front end plus the fusion
/// encoder, with the mel settings the audio model was trained on.
#[derive(Debug, Clone)]
pub struct AudioSequenceModel {
    pub mel: MelConfig,
    pub audio: TdnnModel,
    pub sequence: SequenceModel,
    /// Hash of the frozen visual model these weights were trained against.
    pub visual_hash: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct AudioSequenceMeta {
    mel: MelConfig,
    tdnn: TdnnConfig,
    sequence: SequenceConfig,
    visual_hash: Option<String>,
}

impl AudioSequenceModel {
    pub fn new(mel: MelConfig, tdnn: TdnnConfig, seq: SequenceConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            mel,
            audio: TdnnModel::new(tdnn, seed)?,
            sequence: SequenceModel::new(seq, seed.wrapping_add(1))?,
            visual_hash: None,
        })
    }

    /// Named `audio.*` and `sequence.*`.
    pub fn params(&self) -> Params {
        let mut p = nn::prefixed("audio.", self.audio.params());
        p.extend(nn::prefixed("sequence.", self.sequence.params()));
        p
    }

    pub fn hash(&self) -> Result<String> {
        nn::hash_params(&self.params())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = AudioSequenceMeta {
            mel: self.mel,
            tdnn: self.audio.config().clone(),
            sequence: self.sequence.config().clone(),
            visual_hash: self.visual_hash.clone(),
        };
        let mut ck = Checkpoint::new(AUDIO_SEQUENCE_CHECKPOINT_KIND, serde_json::to_value(meta)?);
        ck.push_params("", &self.params())?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(AUDIO_SEQUENCE_CHECKPOINT_KIND)?;
        let meta: AudioSequenceMeta = serde_json::from_value(ck.meta.clone())?;
        let mut m = Self::new(meta.mel, meta.tdnn, meta.sequence, 0)?;
        nn::load_params(&m.params(), ck, "")?;
        m.visual_hash = meta.visual_hash;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
