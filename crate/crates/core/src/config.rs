//! Resolved configuration of a run. Every command writes the configuration
//! it actually used next to its outputs.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::domain::RerankConfig;
use crate::error::{Error, Result};
use crate::metrics::ReportConfig;
use crate::model::{ModelConfig, TrainConfig};
use crate::sim::dataset::DatasetConfig;
use crate::sim::experiment::ExperimentConfig;
use crate::sim::SimConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub sim: SimConfig,
    pub model: ModelConfig,
    pub rerank: RerankConfig,
    pub train: TrainConfig,
    pub dataset: DatasetConfig,
    pub experiment: ExperimentConfig,
    pub report: ReportConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.model.validate()?;
        self.rerank.validate()?;
        self.train.validate()?;
        if self.model.features.history_len != self.sim.history_len {
            return Err(Error::Config(format!(
                "model.features.history_len {} differs from sim.history_len {}",
                self.model.features.history_len, self.sim.history_len
            )));
        }
        if self.model.features.category_vocab < self.sim.pool.categories {
            return Err(Error::Config("model category vocabulary is smaller than the pool's".into()));
        }
        Ok(())
    }

    /// Sets one field addressed by a dotted path, e.g. `sim.user.gamma`.
    /// The value is parsed as JSON when possible and taken as a string
    /// otherwise.
    pub fn set(&mut self, path: &str, raw: &str) -> Result<()> {
        let mut root = serde_json::to_value(&*self)?;
        let mut slot = &mut root;
        for key in path.split('.') {
            slot = match slot {
                Value::Object(map) => map
                    .get_mut(key)
                    .ok_or_else(|| Error::Config(format!("unknown config key {path:?}")))?,
                Value::Array(items) => key
                    .parse::<usize>()
                    .ok()
                    .and_then(|i| items.get_mut(i))
                    .ok_or_else(|| Error::Config(format!("bad index in config key {path:?}")))?,
                _ => return Err(Error::Config(format!("config key {path:?} goes below a leaf"))),
            };
        }
        *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        *self = serde_json::from_value(root).map_err(|e| Error::Config(format!("{path}: {e}")))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn dotted_overrides() {
        let mut c = RunConfig::default();
        c.set("sim.user.gamma", "0.5").unwrap();
        c.set("rerank.stability_threshold_t", "null").unwrap();
        c.set("sim.server.drift_view", "at_request").unwrap();
        c.set("model.tower_dims.0", "64").unwrap();
        assert_eq!(c.sim.user.gamma, 0.5);
        assert_eq!(c.rerank.stability_threshold_t, None);
        assert_eq!(c.sim.server.drift_view, crate::sim::DriftView::AtRequest);
        assert_eq!(c.model.tower_dims[0], 64);
        assert!(c.set("sim.user.nope", "1").is_err());
        assert!(c.set("sim.user.gamma", "\"high\"").is_err());
    }

    #[test]
    fn json_round_trip() {
        let c = RunConfig::default();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&s).unwrap(), c);
        assert_eq!(serde_json::from_str::<RunConfig>("{}").unwrap(), c);
    }
}
