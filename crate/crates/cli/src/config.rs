//! The run configuration file. Every field has a desk-scale default, so an
//! empty JSON object is a valid config.

use std::path::Path;

use anyhow::Context;
use geodiff::backbone::{BackboneConfig, TrainConfig};
use geodiff::codec::{CodecConfig, CodecTrainOptions};
use geodiff::diffusion::ScheduleConfig;
use geodiff::schema::SchemaConfig;
use geodiff::world::WorldConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema: SchemaConfig,
    pub world: WorldConfig,
    pub tiles: usize,
    pub codec: CodecConfig,
    pub codec_train: CodecTrainOptions,
    pub backbone: BackboneConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    /// Samples per tile for `sample`.
    pub samples: usize,
    /// Tiles drawn from the test split by `sample` and model-driven protocols.
    pub eval_tiles: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema: SchemaConfig::toy(),
            world: WorldConfig::toy(),
            tiles: 1000,
            codec: CodecConfig::toy(),
            codec_train: CodecTrainOptions::default(),
            backbone: BackboneConfig::toy(),
            schedule: ScheduleConfig::shortened(250),
            train: TrainConfig::default(),
            samples: 12,
            eval_tiles: 50,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }
}
