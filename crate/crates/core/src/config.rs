//! Run configuration: a flat `key = value` file, overridable per key by
//! `ICDAUG_<KEY>` environment variables and then by command-line `--set`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::baseline::{Optimizer, TrainConfig};
use crate::dataset::StrataThresholds;
use crate::gateway::{EndpointConfig, Mode};
use crate::postprocess::LabelSource;
use crate::selection::SelectionConfig;
use crate::silver::PlanConfig;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("invalid value for {key}: {message}")]
    InvalidValue { key: String, message: String },
    #[error("cannot read config {path}: {message}")]
    Read { path: String, message: String },
}

pub const ENV_PREFIX: &str = "ICDAUG_";

/// Keys left out of the config hash: where outputs go does not change
/// what they contain.
const UNHASHED: [&str; 1] = ["out_dir"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: String,
    pub descriptions: String,
    pub out_dir: String,
    pub fixtures: String,
    pub template_dir: Option<String>,
    pub template_version: String,

    pub selection_seed: u64,
    pub silver_seed: u64,
    pub session_seed: u64,
    pub train_seed: u64,

    pub few_shot_max: usize,
    pub frequent_min: usize,
    pub generation_cap: usize,
    pub max_drop: usize,
    pub family_sample: usize,
    pub allow_fewer_families: bool,
    pub target_population: usize,
    pub count_foreign_clones: bool,

    pub mode: String,
    pub base_url: String,
    pub model: String,
    pub api_version: Option<String>,
    pub token_env: Option<String>,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub requests_per_minute: u32,
    pub block_on_budget: bool,
    pub concurrency: usize,

    pub max_tokens: usize,
    pub label_source: String,

    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub threshold: f64,
    pub sweep_threshold: bool,

    pub review_n_real: usize,
    pub review_n_synthetic: usize,
    pub review_bind: String,
    pub review_static_dir: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let th = StrataThresholds::default();
        let sel = SelectionConfig::default();
        let plan = PlanConfig::default();
        let ep = EndpointConfig::default();
        let tr = TrainConfig::default();
        RunConfig {
            corpus: "corpus.jsonl".into(),
            descriptions: "d_icd_diagnoses.csv.gz".into(),
            out_dir: "out".into(),
            fixtures: "fixtures".into(),
            template_dir: None,
            template_version: "v1".into(),
            selection_seed: 0,
            silver_seed: 0,
            session_seed: 0,
            train_seed: 0,
            few_shot_max: th.few_shot_max,
            frequent_min: th.frequent_min,
            generation_cap: sel.generation_cap,
            max_drop: plan.max_drop,
            family_sample: sel.family_sample_size,
            allow_fewer_families: false,
            target_population: plan.target_population,
            count_foreign_clones: plan.count_foreign_clones,
            mode: "replay".into(),
            base_url: ep.base_url,
            model: ep.model,
            api_version: ep.api_version,
            token_env: ep.token_env,
            timeout_secs: ep.timeout_secs,
            max_retries: ep.max_retries,
            backoff_ms: ep.backoff_ms,
            requests_per_minute: ep.requests_per_minute,
            block_on_budget: ep.block_on_budget,
            concurrency: ep.concurrency,
            max_tokens: tr.max_tokens,
            label_source: "silver".into(),
            epochs: tr.epochs,
            learning_rate: tr.learning_rate,
            l2: tr.l2,
            threshold: tr.threshold,
            sweep_threshold: false,
            review_n_real: 10,
            review_n_synthetic: 10,
            review_bind: "127.0.0.1:8000".into(),
            review_static_dir: None,
        }
    }
}

fn as_object(cfg: &RunConfig) -> serde_json::Map<String, Value> {
    match serde_json::to_value(cfg).expect("config serializes") {
        Value::Object(m) => m,
        _ => unreachable!("config is a struct"),
    }
}

impl RunConfig {
    pub fn keys() -> Vec<String> {
        as_object(&RunConfig::default()).keys().cloned().collect()
    }

    /// Sets one key from its textual value, typed by the current field.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<(), ConfigError> {
        let mut obj = as_object(self);
        let slot = obj.get(key).ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
        let invalid = |message: String| ConfigError::InvalidValue {
            key: key.to_string(),
            message,
        };
        let raw = raw.trim();
        let value = match slot {
            Value::Bool(_) => Value::Bool(raw.parse().map_err(|e| invalid(format!("{e}")))?),
            Value::Number(_) => {
                let v: Value = serde_json::from_str(raw).map_err(|e| invalid(e.to_string()))?;
                if !v.is_number() {
                    return Err(invalid(format!("{raw:?} is not a number")));
                }
                v
            }
            _ if raw.is_empty() => {
                // Optional fields clear to null; required strings become empty.
                let mut cleared = obj.clone();
                cleared.insert(key.to_string(), Value::Null);
                if let Ok(cfg) = serde_json::from_value(Value::Object(cleared)) {
                    *self = cfg;
                    return Ok(());
                }
                Value::String(String::new())
            }
            _ => Value::String(raw.to_string()),
        };
        obj.insert(key.to_string(), value);
        *self = serde_json::from_value(Value::Object(obj)).map_err(|e| invalid(e.to_string()))?;
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn apply_env<F: Fn(&str) -> Option<String>>(&mut self, lookup: F) -> Result<(), ConfigError> {
        for key in Self::keys() {
            if let Some(v) = lookup(&format!("{ENV_PREFIX}{}", key.to_ascii_uppercase())) {
                self.set(&key, &v)?;
            }
        }
        Ok(())
    }

    /// Defaults, then the file (if any), then the environment, then
    /// explicit overrides.
    pub fn resolve(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| ConfigError::Read {
                path: p.display().to_string(),
                message: e.to_string(),
            })?;
            cfg.apply_text(&text)?;
        }
        cfg.apply_env(|k| std::env::var(k).ok())?;
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, message: &str| {
            Err(ConfigError::InvalidValue {
                key: key.into(),
                message: message.into(),
            })
        };
        if self.mode.parse::<Mode>().is_err() {
            return bad("mode", "expected live, record or replay");
        }
        if self.label_source().is_err() {
            return bad("label_source", "expected silver or self_assigned");
        }
        if self.few_shot_max == 0 || self.few_shot_max >= self.frequent_min {
            return bad("few_shot_max", "must be positive and below frequent_min");
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad("threshold", "must lie in [0, 1]");
        }
        if self.learning_rate <= 0.0 {
            return bad("learning_rate", "must be positive");
        }
        Ok(())
    }

    /// `key=value` lines in key order.
    pub fn canonical_text(&self) -> String {
        as_object(self)
            .into_iter()
            .filter(|(k, _)| !UNHASHED.contains(&k.as_str()))
            .map(|(k, v)| match v {
                Value::String(s) => format!("{k}={s}\n"),
                Value::Null => format!("{k}=\n"),
                other => format!("{k}={other}\n"),
            })
            .collect()
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_text().as_bytes()))
    }

    pub fn out_path(&self, name: &str) -> PathBuf {
        Path::new(&self.out_dir).join(name)
    }

    pub fn thresholds(&self) -> StrataThresholds {
        StrataThresholds {
            few_shot_max: self.few_shot_max,
            frequent_min: self.frequent_min,
        }
    }

    pub fn selection(&self) -> SelectionConfig {
        SelectionConfig {
            thresholds: self.thresholds(),
            family_sample_size: self.family_sample,
            generation_cap: self.generation_cap,
            seed: self.selection_seed,
        }
    }

    pub fn plan(&self) -> PlanConfig {
        PlanConfig {
            target_population: self.target_population,
            max_drop: self.max_drop,
            count_foreign_clones: self.count_foreign_clones,
            seed: self.silver_seed,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode.parse().unwrap_or(Mode::Replay)
    }

    pub fn endpoint(&self) -> EndpointConfig {
        EndpointConfig {
            base_url: self.base_url.clone(),
            model: self.model.clone(),
            api_version: self.api_version.clone(),
            token_env: self.token_env.clone(),
            timeout_secs: self.timeout_secs,
            max_retries: self.max_retries,
            backoff_ms: self.backoff_ms,
            requests_per_minute: self.requests_per_minute,
            block_on_budget: self.block_on_budget,
            concurrency: self.concurrency,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            l2: self.l2,
            seed: self.train_seed,
            threshold: self.threshold,
            optimizer: Optimizer::Sgd,
            max_tokens: self.max_tokens,
        }
    }

    pub fn label_source(&self) -> Result<LabelSource, ConfigError> {
        serde_json::from_value(Value::String(self.label_source.clone())).map_err(|e| ConfigError::InvalidValue {
            key: "label_source".into(),
            message: e.to_string(),
        })
    }

    /// Effective values as a map, for manifests and `--help` output.
    pub fn entries(&self) -> BTreeMap<String, Value> {
        as_object(self).into_iter().collect()
    }
}
