//! Run configuration: presets, then a JSON file, then `key=value` overrides.
//!
//! Both layers are merged into the serialized defaults, so a key that the
//! defaults do not have is rejected instead of silently ignored.

use std::path::Path;

use fthnet_core::dataset::ratings::{AggregationWeights, LevelThresholds};
use fthnet_core::dataset::SynthConfig;
use fthnet_core::model::FthnetConfig;
use fthnet_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceSettings {
    pub in_flight: usize,
    pub queue_depth: usize,
    pub discuss_sd: f64,
}

impl Default for ServiceSettings {
    fn default() -> Self {
        let d = fthnet_service::ServiceConfig::default();
        Self {
            in_flight: d.limits.in_flight,
            queue_depth: d.limits.queue_depth,
            discuss_sd: d.discuss_sd,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: FthnetConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub aggregation: AggregationWeights,
    pub thresholds: LevelThresholds,
    pub service: ServiceSettings,
}

impl RunConfig {
    pub fn new(model: FthnetConfig, train: TrainConfig) -> Self {
        Self {
            model,
            train,
            synth: SynthConfig::default(),
            aggregation: AggregationWeights::default(),
            thresholds: LevelThresholds::default(),
            service: ServiceSettings::default(),
        }
    }

    /// Apply an optional JSON file and `key.path=value` overrides.
    pub fn layered(self, file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut v = serde_json::to_value(&self).map_err(|e| CliError::Runtime(e.to_string()))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))?;
            let patch: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))?;
            merge(&mut v, patch, "")?;
        }
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| CliError::Validation(format!("override `{o}` is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set(&mut v, key, value)?;
        }
        let cfg: RunConfig = serde_json::from_value(v).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}

fn merge(base: &mut Value, patch: Value, path: &str) -> Result<(), CliError> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, pv) in p {
                let full = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let slot = b
                    .get_mut(&k)
                    .ok_or_else(|| CliError::Validation(format!("unknown config key `{full}`")))?;
                merge(slot, pv, &full)?;
            }
            Ok(())
        }
        (slot, pv) => {
            *slot = pv;
            Ok(())
        }
    }
}

fn set(root: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let mut slot = root;
    for part in key.split('.') {
        slot = match slot {
            Value::Object(m) => m.get_mut(part),
            Value::Array(a) => part.parse::<usize>().ok().and_then(|i| a.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| CliError::Validation(format!("unknown config key `{key}`")))?;
    }
    *slot = value;
    Ok(())
}
