//! Run configuration shared by the experiment harness and the CLI.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::SyntheticWorldConfig;
use crate::features::FeatureSchema;
use crate::hsnn::HsnnTrainConfig;
use crate::monn::Preset;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Per-layer presets, coarse to fine.
    pub presets: Vec<Preset>,
    /// Index nodes per level (one per coarse layer).
    pub ks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub train_batches: usize,
    pub calib_examples: usize,
    pub eval_examples: usize,
    pub recall_k: usize,
    /// Users sampled for the retrieval metrics.
    pub recall_users: usize,
    pub rank_task: usize,
    /// Per-level beams for metric retrieval; empty = exhaustive.
    pub beams: Vec<usize>,
    pub max_items_scored: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            train_batches: 400,
            calib_examples: 1500,
            eval_examples: 2000,
            recall_k: 50,
            recall_users: 40,
            rank_task: 0,
            beams: vec![5],
            max_items_scored: usize::MAX,
        }
    }
}

/// One full experiment: world, schema, model shape, training, evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub world: SyntheticWorldConfig,
    /// Explicit schema override; defaults to the world schema.
    pub schema: Option<FeatureSchema>,
    pub model: ModelConfig,
    pub train: HsnnTrainConfig,
    pub pipeline: PipelineConfig,
    /// Master seed: drives world generation, model init, and streams.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            world: SyntheticWorldConfig::default(),
            schema: None,
            model: ModelConfig {
                presets: vec![Preset::S, Preset::Xs],
                ks: vec![20],
            },
            train: HsnnTrainConfig::default(),
            pipeline: PipelineConfig::default(),
            seed: 7,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        serde_json::from_str(&s).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn effective_schema(&self) -> FeatureSchema {
        self.schema
            .clone()
            .unwrap_or_else(|| FeatureSchema::default_for_world(self.world.latent_dim))
    }

    /// Applies the master seed to the sub-configs that carry their own.
    pub fn seeded(&self, seed: u64) -> RunConfig {
        let mut cfg = self.clone();
        cfg.seed = seed;
        cfg.world.seed = seed;
        cfg.train.seed = seed;
        cfg
    }

    pub fn config_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let out = Sha256::digest(&bytes);
        out.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.effective_schema().validate()?;
        if self.model.presets.is_empty() || self.model.presets.len() != self.model.ks.len() + 1 {
            return Err(Error::Config(
                "model needs one preset per layer and one k per coarse layer".into(),
            ));
        }
        if self.pipeline.rank_task >= self.world.num_tasks() {
            return Err(Error::Config("rank_task out of range".into()));
        }
        if self.train.index_loss_task >= self.world.num_tasks() {
            return Err(Error::Config("index_loss_task out of range".into()));
        }
        Ok(())
    }
}
