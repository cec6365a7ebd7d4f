//! Pipeline driver behind the `av-affect` command: configuration, run
//! directories with a lock and a content-hashed manifest, and one function per
//! subcommand.

mod commands;
mod config;
mod manifest;

pub use commands::{
    cmd_evaluate, cmd_prepare_data, cmd_stats, cmd_synth, cmd_train_sequence, cmd_train_visual,
    combine_task_views, load_prepared, load_raw_split, run_pipeline, sequence_model_config,
    visual_train_config, EvalSummary, PipelineSummary, PrepareSummary, RunPaths,
    SequenceRunSummary, VisualRunSummary,
};
pub use config::{
    LossStageConfig, PipelineConfig, SequenceStageConfig, Stage, VisualStageConfig,
};
pub use manifest::{
    dir_sha256, file_sha256, RunLock, RunManifest, StageRecord, LOCK_FILE, MANIFEST_FILE,
};

use std::path::Path;

use crate::error::Result;

/// Defaults, then the config file (if any), then `overrides` in order.
pub fn resolve_config(file: Option<&Path>, overrides: &[(&str, String)]) -> Result<PipelineConfig> {
    let mut cfg = match file {
        Some(p) => PipelineConfig::from_file(p)?,
        None => PipelineConfig::default(),
    };
    for (k, v) in overrides {
        cfg.apply(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}
