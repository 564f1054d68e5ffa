//! Run configuration: reference defaults, TOML files, and environment
//! overrides.
//!
//! A [`RunConfig`] carries every knob of the pipeline in one flat table so
//! a whole experiment is reproducible from a single file. Values left out
//! of a file keep the reference defaults; unknown keys are hard errors
//! (silent typos in experiment configs are the worst kind of bug). Any
//! field can also be overridden through `GUIQ_`-prefixed environment
//! variables, which parse as TOML values with a plain-string fallback.
//!
//! Every artifact the pipeline writes embeds [`RunConfig::fingerprint`],
//! so results can always be traced back to the exact configuration.

use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

use crate::data::CollectConfig;
use crate::env::Objective;
use crate::eval::{CrossValConfig, EvalConfig, SweepConfig};
use crate::featurize::FeatureConfig;
use crate::qlearn::TrainerConfig;
use crate::uitree::fnv1a_64;

/// Prefix of environment-variable overrides, e.g. `GUIQ_TOTAL_STEPS=800`.
pub const ENV_PREFIX: &str = "GUIQ_";

/// Errors raised while loading or validating configuration.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config file error: {0}")]
    Io(String),
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("bad environment override {var}: {reason}")]
    BadOverride { var: String, reason: String },
}

/// Every knob of a full experiment run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // --- data collection ---
    /// Built-in application name or path to an application file.
    pub app: String,
    /// Objective event names; training regresses the union of their
    /// labeled sets.
    pub objectives: Vec<String>,
    /// Firings required to complete an episode (applies to each objective).
    pub target_count: u32,
    /// Qualifying episodes to collect.
    pub episodes: usize,
    /// Per-episode step cap during collection.
    pub max_episode_len: usize,
    pub collect_seed: u64,
    // --- featurization ---
    /// Minimum corpus occurrences for a property value to earn an index.
    pub min_count: usize,
    pub include_automation_id: bool,
    // --- training ---
    pub gamma: f64,
    /// Steps between target-network refreshes.
    pub target_update: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub total_steps: usize,
    /// Learning-curve cadence in training steps; 0 disables curves.
    pub eval_every: usize,
    // --- evaluation and experiments ---
    /// Simulator steps per evaluation run.
    pub eval_steps: usize,
    pub eval_seed: u64,
    /// Cross-validation folds.
    pub folds: usize,
    /// Network-initialization seeds; one run per (fold, seed).
    pub seeds: Vec<u64>,
    pub split_seed: u64,
    /// Sampling-policy temperature grid (`inf` is uniform random).
    pub temperatures: Vec<f64>,
    /// Worker threads for experiment grids; 0 uses the rayon default.
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            app: "settings".to_owned(),
            objectives: vec![crate::env::EVENT_NOTIFICATIONS.to_owned()],
            target_count: 1,
            episodes: 20,
            max_episode_len: 1000,
            collect_seed: 0,
            min_count: 2,
            include_automation_id: true,
            gamma: 0.1,
            target_update: 100,
            batch_size: 128,
            learning_rate: 1e-2,
            total_steps: 400,
            eval_every: 10,
            eval_steps: 1000,
            eval_seed: 0,
            folds: 5,
            seeds: vec![0, 1, 2, 3],
            split_seed: 0,
            temperatures: vec![0.01, 0.03, 0.1, 0.3, 1.0, 3.0, f64::INFINITY],
            jobs: 0,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig, ConfigError> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(e.to_string()))?;
        RunConfig::from_toml(&text)
    }

    /// Apply `GUIQ_`-prefixed overrides. Each variable names a field
    /// (`GUIQ_TOTAL_STEPS` -> `total_steps`); its value parses as a TOML
    /// value, falling back to a plain string (so `GUIQ_APP=browser` works
    /// unquoted). Unknown fields and unparseable values are errors.
    pub fn apply_env_overrides(
        &mut self,
        vars: impl IntoIterator<Item = (String, String)>,
    ) -> Result<(), ConfigError> {
        let mut table: toml::Table = self
            .to_toml()
            .parse()
            .expect("own serialization parses");
        let mut touched = false;
        for (var, raw) in vars {
            let Some(field) = var.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let field = field.to_lowercase();
            if !table.contains_key(&field) {
                return Err(ConfigError::BadOverride {
                    var,
                    reason: format!("no config field named {field:?}"),
                });
            }
            let value = match format!("v = {raw}").parse::<toml::Table>() {
                Ok(mut t) => t.remove("v").expect("parsed assignment has the key"),
                Err(_) => toml::Value::String(raw.clone()),
            };
            table.insert(field, value);
            touched = true;
        }
        if touched {
            let merged: RunConfig = table
                .try_into()
                .map_err(|e| ConfigError::Parse(e.to_string()))?;
            merged.validate()?;
            *self = merged;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        if self.app.is_empty() {
            return bad("app must not be empty".into());
        }
        if self.objectives.is_empty() || self.objectives.iter().any(String::is_empty) {
            return bad("objectives must list at least one non-empty event name".into());
        }
        if self.target_count == 0 {
            return bad("target_count must be at least 1".into());
        }
        if self.episodes == 0 || self.max_episode_len == 0 {
            return bad("episodes and max_episode_len must be at least 1".into());
        }
        if self.total_steps == 0 {
            return bad("total_steps must be at least 1".into());
        }
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma must lie in [0, 1), got {}", self.gamma));
        }
        if self.target_update == 0 || self.batch_size == 0 {
            return bad("target_update and batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.eval_steps == 0 {
            return bad("eval_steps must be at least 1".into());
        }
        if self.folds < 2 {
            return bad(format!("folds must be at least 2, got {}", self.folds));
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.temperatures.is_empty() {
            return bad("temperatures must not be empty".into());
        }
        if let Some(t) = self.temperatures.iter().find(|t| !(**t > 0.0)) {
            return bad(format!("temperatures must be positive, got {t}"));
        }
        Ok(())
    }

    /// Stable 64-bit digest of the full configuration, embedded in every
    /// artifact this run writes.
    pub fn fingerprint(&self) -> u64 {
        fnv1a_64(self.to_toml().as_bytes())
    }

    /// The configured objectives, each with the shared target count.
    pub fn objectives(&self) -> Vec<Objective> {
        self.objectives
            .iter()
            .map(|event| Objective::with_target(event, self.target_count))
            .collect()
    }

    pub fn collect_config(&self) -> CollectConfig {
        CollectConfig::new(self.episodes, self.max_episode_len, self.collect_seed)
    }

    pub fn feature_config(&self) -> FeatureConfig {
        FeatureConfig {
            min_count: self.min_count,
            include_automation_id: self.include_automation_id,
        }
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        TrainerConfig {
            gamma: self.gamma,
            target_update: self.target_update,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            total_steps: self.total_steps,
            eval_every: self.eval_every,
            seed: 0,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            steps: self.eval_steps,
            seed: self.eval_seed,
        }
    }

    pub fn cross_val_config(&self) -> CrossValConfig {
        CrossValConfig {
            folds: self.folds,
            seeds: self.seeds.clone(),
            split_seed: self.split_seed,
            feature: self.feature_config(),
            trainer: self.trainer_config(),
            eval: self.eval_config(),
        }
    }

    pub fn sweep_config(&self) -> SweepConfig {
        SweepConfig {
            temperatures: self.temperatures.clone(),
            eval: self.eval_config(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_reference_setup() {
        let config = RunConfig::default();
        assert_eq!(config.app, "settings");
        assert_eq!(config.objectives, vec!["notifications_panel_opened"]);
        assert_eq!(config.episodes, 20);
        assert_eq!(config.max_episode_len, 1000);
        assert_eq!(config.min_count, 2);
        assert!(config.include_automation_id);
        assert_eq!(config.gamma, 0.1);
        assert_eq!(config.target_update, 100);
        assert_eq!(config.batch_size, 128);
        assert_eq!(config.learning_rate, 1e-2);
        assert_eq!(config.eval_steps, 1000);
        assert_eq!(config.folds, 5);
        assert_eq!(config.seeds, vec![0, 1, 2, 3]);
        assert!(config.temperatures.len() >= 6);
        assert_eq!(config.temperatures.last(), Some(&f64::INFINITY));
        config.validate().unwrap();
    }

    #[test]
    fn toml_round_trips() {
        let config = RunConfig::default();
        let parsed = RunConfig::from_toml(&config.to_toml()).unwrap();
        assert_eq!(parsed, config);
    }

    #[test]
    fn infinity_survives_the_toml_round_trip() {
        let config = RunConfig::from_toml("temperatures = [0.1, inf]").unwrap();
        assert_eq!(config.temperatures, vec![0.1, f64::INFINITY]);
    }

    #[test]
    fn partial_files_keep_defaults_for_the_rest() {
        let config = RunConfig::from_toml("episodes = 7\napp = \"browser\"").unwrap();
        assert_eq!(config.episodes, 7);
        assert_eq!(config.app, "browser");
        assert_eq!(config.batch_size, 128, "untouched fields keep defaults");
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let err = RunConfig::from_toml("totl_steps = 5").unwrap_err();
        let message = err.to_string();
        assert!(message.contains("totl_steps"), "message was: {message}");
    }

    #[test]
    fn invalid_values_are_rejected() {
        for bad in [
            "gamma = 1.5",
            "folds = 1",
            "temperatures = []",
            "temperatures = [-0.5]",
            "learning_rate = 0.0",
            "seeds = []",
            "objectives = []",
            "objectives = [\"\"]",
            "total_steps = 0",
        ] {
            assert!(
                matches!(RunConfig::from_toml(bad), Err(ConfigError::Invalid(_))),
                "{bad} should be invalid"
            );
        }
    }

    #[test]
    fn env_overrides_parse_like_toml_with_string_fallback() {
        let mut config = RunConfig::default();
        config
            .apply_env_overrides([
                ("GUIQ_TOTAL_STEPS".to_owned(), "123".to_owned()),
                ("GUIQ_APP".to_owned(), "browser".to_owned()),
                ("GUIQ_SEEDS".to_owned(), "[5, 6]".to_owned()),
                ("UNRELATED".to_owned(), "ignored".to_owned()),
            ])
            .unwrap();
        assert_eq!(config.total_steps, 123);
        assert_eq!(config.app, "browser");
        assert_eq!(config.seeds, vec![5, 6]);
    }

    #[test]
    fn env_overrides_reject_unknown_fields_and_bad_types() {
        let mut config = RunConfig::default();
        let err = config
            .apply_env_overrides([("GUIQ_BOGUS".to_owned(), "1".to_owned())])
            .unwrap_err();
        assert!(matches!(err, ConfigError::BadOverride { .. }));

        let err = config
            .apply_env_overrides([("GUIQ_EPISODES".to_owned(), "lots".to_owned())])
            .unwrap_err();
        assert!(matches!(err, ConfigError::Parse(_)), "got {err:?}");
    }

    #[test]
    fn fingerprints_track_every_field() {
        let base = RunConfig::default();
        assert_eq!(base.fingerprint(), RunConfig::default().fingerprint());
        let mut changed = base.clone();
        changed.episodes += 1;
        assert_ne!(base.fingerprint(), changed.fingerprint());
        let mut reseeded = base.clone();
        reseeded.eval_seed = 99;
        assert_ne!(base.fingerprint(), reseeded.fingerprint());
    }

    #[test]
    fn derived_configs_carry_the_shared_fields() {
        let mut config = RunConfig::default();
        config.gamma = 0.25;
        config.folds = 3;
        config.eval_steps = 500;
        assert_eq!(config.trainer_config().gamma, 0.25);
        assert_eq!(config.cross_val_config().folds, 3);
        assert_eq!(config.cross_val_config().eval.steps, 500);
        assert_eq!(config.sweep_config().temperatures, config.temperatures);
        assert_eq!(config.objectives()[0].event_name, config.objectives[0]);
        assert_eq!(config.collect_config().episodes, 20);
    }
}
