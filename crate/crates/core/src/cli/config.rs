//! The composite run configuration, dotted-key overrides and its hash.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::aggregate::AggregationConfig;
use crate::analysis::StabilityConfig;
use crate::attack::AttackConfig;
use crate::closed_loop::LoopConfig;
use crate::data::TaskConfig;
use crate::error::{Error, Result};
use crate::model::{GroundingConfig, ModelConfig};
use crate::persist;
use crate::train::TrainConfig;

/// Sizes of the verification and analysis runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub trajectories: usize,
    pub lipschitz_samples: usize,
    pub stability_samples: usize,
    pub diagnostics_samples: usize,
    pub margin_trials: usize,
    pub outlier_trials: usize,
    pub tol_margin: f64,
    pub max_k: usize,
    pub depth_k: usize,
    pub seed: u64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            trajectories: 200,
            lipschitz_samples: 100,
            stability_samples: 500,
            diagnostics_samples: 100,
            margin_trials: 10_000,
            outlier_trials: 10_000,
            tol_margin: 0.05,
            max_k: 10,
            depth_k: 4,
            seed: 0,
        }
    }
}

/// Everything one run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub grounding: GroundingConfig,
    #[serde(rename = "loop")]
    pub loop_cfg: LoopConfig,
    pub aggregation: AggregationConfig,
    pub train: TrainConfig,
    pub attack: AttackConfig,
    pub stability: StabilityConfig,
    pub analysis: AnalysisConfig,
    /// Seeds the defence's view sampling during evaluation.
    pub eval_seed: u64,
    /// Evaluate on the first `eval_samples` test points; all when unset.
    pub eval_samples: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            task: TaskConfig::default(),
            model: ModelConfig::default(),
            grounding: GroundingConfig::default(),
            loop_cfg: LoopConfig::default(),
            aggregation: AggregationConfig {
                num_views: 32,
                ..AggregationConfig::default()
            },
            train: TrainConfig::default(),
            attack: AttackConfig::default(),
            stability: StabilityConfig::default(),
            analysis: AnalysisConfig::default(),
            eval_seed: 1,
            eval_samples: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::from_json(e, text))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&persist::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Cross-field checks; each component validates itself too.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.aggregation.validate()?;
        self.train.validate()?;
        self.attack.validate()?;
        if self.task.input_dim != self.model.input_dim {
            return Err(Error::config(format!(
                "task.input_dim {} differs from model.input_dim {}",
                self.task.input_dim, self.model.input_dim
            )));
        }
        if self.task.num_classes != self.model.num_classes {
            return Err(Error::config(format!(
                "task.num_classes {} differs from model.num_classes {}",
                self.task.num_classes, self.model.num_classes
            )));
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Applies `key.path=value`. The value is read as JSON when it parses,
    /// otherwise as a string; the key must already exist.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override {assignment:?} is not key=value")))?;
        let key = key.trim_start_matches('-');
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
        let mut doc = serde_json::to_value(&*self).expect("config serializes");
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| Error::config(format!("unknown config key {key:?}")))?;
        }
        *slot = value;
        *self = serde_json::from_value(doc)
            .map_err(|e| Error::config(format!("override {assignment:?}: {e}")))?;
        Ok(())
    }
}
