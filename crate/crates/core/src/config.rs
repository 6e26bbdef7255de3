//! TOML run configuration.
//!
//! ```toml
//! [schedule]
//! kind = "linear"      # or "cosine"
//! T = 1000
//! sigma_scale = 0.0
//!
//! [codec]
//! kind = "identity"    # "linear" also needs block, matrix, bias
//!
//! [sampler]
//! steps = 15
//! guidance = 4.0
//! seed = 0
//!
//! [grouping]
//! lambda = 0.9
//! beta = 0.8
//! bin_threshold = 0.5
//!
//! [engine]
//! mode = "parallel"
//! ```
//!
//! Every table and key is optional; missing values take the defaults above.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{Codec, CodecKind, LinearCodec};
use crate::engine::{EngineConfig, ExecutionMode};
use crate::error::{Error, Result};
use crate::grouping::{GroupingParams, DEFAULT_BETA, DEFAULT_BIN_THRESHOLD, DEFAULT_LAMBDA};
use crate::sampler::{SamplerConfig, DEFAULT_GUIDANCE, DEFAULT_STEPS};
use crate::schedule::{DiffusionSchedule, ScheduleKind, ScheduleParams};

pub const DEFAULT_T: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub kind: ScheduleKind,
    #[serde(rename = "T")]
    pub t: usize,
    pub sigma_scale: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            t: DEFAULT_T,
            sigma_scale: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct CodecSection {
    pub kind: CodecKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub block: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub matrix: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bias: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub steps: usize,
    pub guidance: f64,
    pub seed: u64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            guidance: DEFAULT_GUIDANCE,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroupingSection {
    pub lambda: f64,
    pub beta: f64,
    pub bin_threshold: f64,
}

impl Default for GroupingSection {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            beta: DEFAULT_BETA,
            bin_threshold: DEFAULT_BIN_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct EngineSection {
    pub mode: ExecutionMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schedule: ScheduleSection,
    pub codec: CodecSection,
    pub sampler: SamplerSection,
    pub grouping: GroupingSection,
    pub engine: EngineSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("config: {}", e.message())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidArgument(format!("config: {e}")))
    }

    pub fn build_schedule(&self) -> Result<DiffusionSchedule> {
        let params = ScheduleParams {
            sigma_scale: self.schedule.sigma_scale,
            ..ScheduleParams::default()
        };
        DiffusionSchedule::build(self.schedule.kind, self.schedule.t, params)
    }

    pub fn build_codec(&self) -> Result<Codec> {
        match self.codec.kind {
            CodecKind::Identity => Ok(Codec::Identity),
            CodecKind::Linear => {
                let missing = |k: &str| Error::InvalidArgument(format!("config: linear codec needs codec.{k}"));
                let block = self.codec.block.ok_or_else(|| missing("block"))?;
                let matrix = self.codec.matrix.as_ref().ok_or_else(|| missing("matrix"))?;
                let bias = self.codec.bias.as_ref().ok_or_else(|| missing("bias"))?;
                Ok(Codec::Linear(LinearCodec::new(block, matrix, bias)?))
            }
        }
    }

    pub fn grouping_params(&self) -> GroupingParams {
        GroupingParams {
            lambda: self.grouping.lambda,
            beta: self.grouping.beta,
            bin_threshold: self.grouping.bin_threshold,
        }
    }

    pub fn engine_config(&self) -> Result<EngineConfig> {
        let sampler = SamplerConfig::new(self.build_schedule()?)
            .with_steps(self.sampler.steps)
            .with_guidance(self.sampler.guidance)
            .with_seed(self.sampler.seed);
        let config = EngineConfig {
            sampler,
            grouping: self.grouping_params(),
            mode: self.engine.mode,
        };
        config.validate()?;
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_from_empty_document() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c, RunConfig::default());
        let e = c.engine_config().unwrap();
        assert_eq!(e.sampler.steps, 15);
        assert_eq!(e.sampler.guidance, 4.0);
        assert_eq!(e.sampler.schedule.len(), 1000);
        assert_eq!(e.mode, ExecutionMode::Parallel);
        assert_eq!(c.build_codec().unwrap(), Codec::Identity);
    }

    #[test]
    fn keys_round_trip() {
        let text = r#"
            [schedule]
            kind = "cosine"
            T = 50
            sigma_scale = 0.5

            [codec]
            kind = "linear"
            block = 2
            matrix = [2.0, 0.0, 0.0, 2.0]
            bias = [0.0, 1.0]

            [engine]
            mode = "sequential"
        "#;
        let c = RunConfig::from_toml(text).unwrap();
        assert_eq!(c.schedule.kind, ScheduleKind::Cosine);
        assert_eq!(c.schedule.t, 50);
        assert_eq!(c.engine.mode, ExecutionMode::Sequential);
        assert_eq!(c.build_codec().unwrap().kind(), CodecKind::Linear);
        assert_eq!(c.build_schedule().unwrap().len(), 50);
        assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
        assert!(c.to_toml().unwrap().contains("T = 50"));
    }

    #[test]
    fn rejects_bad_documents() {
        assert!(RunConfig::from_toml("[schedule]\nsteps = 3").is_err());
        assert!(RunConfig::from_toml("[codec]\nkind = \"vae\"").is_err());
        assert!(RunConfig::from_toml("[codec]\nkind = \"linear\"").unwrap().build_codec().is_err());
        assert!(RunConfig::from_toml("[sampler]\nsteps = 2000").unwrap().engine_config().is_err());
    }
}
