//! Run configuration: one JSON document with a section per pipeline stage.
//! Every field has a default, unknown keys are rejected, and a dumped
//! configuration reloads to an equal value.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AttrError, Result};
use crate::model::{ModelConfig, SCHEMA_VERSION};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Number of training pairs.
    pub count: usize,
    /// Minimum number of shared attributes per pair.
    pub min_positives: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { count: 5000, min_positives: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComposeConfig {
    /// Euler steps from noise to image.
    pub steps: usize,
    /// Weight of each reference's flow field unless given explicitly.
    pub weight: f64,
    pub text_cfg: f64,
}

impl Default for ComposeConfig {
    fn default() -> Self {
        ComposeConfig { steps: 20, weight: 1.0, text_cfg: 3.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub validation_pairs: usize,
    pub gallery: usize,
    pub queries: usize,
    /// Personalization cases per referenced attribute.
    pub cases_per_attribute: usize,
    pub composition_cases: usize,
    /// Images embedded for the projection and clustering check.
    pub projection_points: usize,
    pub permutations: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            validation_pairs: 1000,
            gallery: 500,
            queries: 100,
            cases_per_attribute: 20,
            composition_cases: 50,
            projection_points: 300,
            permutations: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub compose: ComposeConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            compose: ComposeConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(AttrError::InvalidConfig(format!(
                "schema version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.data.count == 0 || self.data.min_positives == 0 || self.data.min_positives > 5 {
            return Err(AttrError::InvalidConfig("data needs count > 0 and min_positives in 1..=5".into()));
        }
        if self.compose.steps == 0 || !self.compose.weight.is_finite() || !self.compose.text_cfg.is_finite() {
            return Err(AttrError::InvalidConfig("compose needs steps > 0 and finite weights".into()));
        }
        self.model.validate()?;
        self.train.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn dump(&self) -> String {
        serde_json::to_string_pretty(self).expect("configuration serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"train": {"learning_rate": 1.0}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"extra": 1}"#).is_err());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c = RunConfig::from_json(r#"{"train": {"stage2_steps": 0, "loss": {"tau": 0.2}}}"#).unwrap();
        assert_eq!(c.train.stage2_steps, 0);
        assert_eq!(c.train.loss.tau, 0.2);
        assert_eq!(c.train.loss.lambda_con, 0.01);
        assert_eq!(c.model, ModelConfig::default());
    }

    #[test]
    fn wrong_schema_version_is_rejected() {
        assert!(RunConfig::from_json(r#"{"schema_version": 99}"#).is_err());
    }

    proptest! {
        #[test]
        fn dump_reloads_to_an_equal_config(
            lr in 1e-6f64..1e-2,
            tau in 1e-3f64..2.0,
            lambda in 0.0f64..1.0,
            steps in 1usize..5000,
            seed in any::<u64>(),
            cfg_scale in -5.0f64..10.0,
        ) {
            let mut c = RunConfig::default();
            c.train.lr = lr;
            c.train.loss.tau = tau;
            c.train.loss.lambda_con = lambda;
            c.train.stage1_steps = steps + 200;
            c.train.seed = seed;
            c.compose.text_cfg = cfg_scale;
            let back = RunConfig::from_json(&c.dump()).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
