//! Run configuration: the JSON document the CLI consumes.
//!
//! Unknown keys are rejected everywhere. Durations in the file are
//! milliseconds; the engine runs on microseconds internally.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::WorkloadSpec;
use crate::model::ModelConfig;
use crate::scheduler::exec::CostModel;
use crate::scheduler::{BeamParams, CacheMode, EngineConfig};

fn default_max_tokens() -> usize {
    4096
}
fn default_wait_quota_ms() -> f64 {
    2.0
}
fn default_lanes() -> usize {
    1
}
fn default_slo_ms() -> f64 {
    200.0
}
fn default_true() -> bool {
    true
}
fn default_queue_bound() -> usize {
    4096
}
fn default_block() -> usize {
    16
}

/// Engine section of the config file (milliseconds at the interface).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineSection {
    #[serde(default = "default_max_tokens")]
    pub max_tokens_per_batch: usize,
    #[serde(default = "default_wait_quota_ms")]
    pub wait_quota_ms: f64,
    #[serde(default = "default_lanes")]
    pub num_lanes: usize,
    #[serde(default = "default_slo_ms")]
    pub slo_p99_target_ms: f64,
    #[serde(default = "default_true")]
    pub overlap: bool,
    #[serde(default = "default_true")]
    pub graph_dispatch: bool,
    #[serde(default = "default_queue_bound")]
    pub queue_bound: usize,
    #[serde(default = "default_block")]
    pub paged_block_size: usize,
}

impl Default for EngineSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields default")
    }
}

impl EngineSection {
    pub fn to_engine_config(self, cache_mode: CacheMode) -> EngineConfig {
        EngineConfig {
            max_tokens_per_batch: self.max_tokens_per_batch,
            wait_quota_us: (self.wait_quota_ms * 1000.0) as u64,
            num_lanes: self.num_lanes,
            slo_p99_target_us: (self.slo_p99_target_ms * 1000.0) as u64,
            tick_us: 1000,
            queue_bound: self.queue_bound,
            overlap: self.overlap,
            graph_dispatch: self.graph_dispatch,
            cache_mode,
            paged_block_size: self.paged_block_size,
        }
    }
}

/// Synthetic vocabulary settings used when no vocabulary file is given.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabSection {
    pub items: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for VocabSection {
    fn default() -> Self {
        VocabSection { items: 4096, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub engine: EngineSection,
    #[serde(default)]
    pub beam: BeamParams,
    #[serde(default)]
    pub workload: WorkloadSpec,
    /// Vocabulary file: one item per line, `nd` space-separated token ids.
    #[serde(default)]
    pub vocab_path: Option<PathBuf>,
    /// Synthetic vocabulary when no file is given.
    #[serde(default)]
    pub vocab: VocabSection,
    /// Virtual-time cost model.
    #[serde(default)]
    pub costs: CostModel,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("bad config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Validation runs before any side effect.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.workload.validate()?;
        self.beam.validate(self.model.vocab_size)?;
        if self.engine.max_tokens_per_batch == 0 || self.engine.num_lanes == 0 {
            return Err(Error::Config("engine section must be positive".into()));
        }
        if self.beam.masking {
            if let Some(p) = &self.vocab_path {
                if !p.exists() {
                    return Err(Error::Config(format!(
                        "masking is enabled but vocabulary file {} does not exist",
                        p.display()
                    )));
                }
            } else if self.vocab.items == 0 {
                return Err(Error::Config(
                    "masking is enabled but no vocabulary is configured".into(),
                ));
            }
        }
        Ok(())
    }

    /// The fully resolved config embedded in every report for
    /// reproducibility.
    pub fn echo(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_a_full_default_config() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.beam.nd, 3);
        assert_eq!(cfg.engine.num_lanes, 1);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"modle": {}}"#);
        assert!(err.is_err());
        let err = serde_json::from_str::<RunConfig>(r#"{"engine": {"lanes": 2}}"#);
        assert!(err.is_err());
    }

    #[test]
    fn ms_fields_convert_to_us() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"engine": {"wait_quota_ms": 1.5, "slo_p99_target_ms": 100}}"#)
                .unwrap();
        let ec = cfg.engine.to_engine_config(CacheMode::Separated);
        assert_eq!(ec.wait_quota_us, 1500);
        assert_eq!(ec.slo_p99_target_us, 100_000);
    }

    #[test]
    fn missing_vocab_file_with_masking_is_a_config_error() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"vocab_path": "/nonexistent/items.txt"}"#).unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn config_echo_round_trips() {
        let cfg = RunConfig::default();
        let echo = cfg.echo().unwrap();
        let back: RunConfig = serde_json::from_value(echo).unwrap();
        assert_eq!(back.model.vocab_size, cfg.model.vocab_size);
    }
}
