//! Training run files: a `[model]` and a `[train]` table in TOML.

use std::path::Path;

use anyhow::{Context, Result};
use pointroute::training::TrainConfig;
use pointroute::{Error, ModelConfig};
use serde::Deserialize;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Parses and validates; `default_dir` fills in a missing `checkpoint_dir` first.
    pub fn parse(text: &str, default_dir: Option<&Path>) -> Result<Self, Error> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            Error::Config {
                field: field_in(&msg).unwrap_or_else(|| "<file>".into()),
                msg,
            }
        })?;
        if cfg.train.checkpoint_dir.is_none() {
            cfg.train.checkpoint_dir = default_dir.map(Path::to_path_buf);
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, default_dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text, Some(default_dir)).with_context(|| format!("invalid config {}", path.display()))
    }
}

/// Pulls the first backquoted name out of a deserializer message.
fn field_in(msg: &str) -> Option<String> {
    let start = msg.find('`')? + 1;
    let len = msg[start..].find('`')?;
    Some(msg[start..start + len].to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    const DESK: &str = r#"
[model]
d = 128
n_t = 6

[train]
batch_size = 64
instances_per_epoch = 10000
epochs = 5
n = 20
seed = 1
"#;

    #[test]
    fn desk_config_parses_with_defaults() {
        let cfg = RunConfig::parse(DESK, None).unwrap();
        assert_eq!(cfg.model, ModelConfig::default());
        assert_eq!(cfg.train.learning_rate, 1e-4);
        assert_eq!(cfg.train.weight_decay, 1e-6);
        assert_eq!(cfg.train.batches_per_epoch(), 156);
    }

    #[test]
    fn zero_learning_rate_is_rejected_by_name() {
        let text = DESK.replace("seed = 1", "seed = 1\nlearning_rate = 0.0");
        match RunConfig::parse(&text, None) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "learning_rate"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_and_missing_fields_are_named() {
        let text = DESK.replace("n_t = 6", "layers = 6");
        match RunConfig::parse(&text, None) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "layers"),
            other => panic!("{other:?}"),
        }
        let text = DESK.replace("epochs = 5\n", "");
        match RunConfig::parse(&text, None) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "epochs"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn model_fields_are_validated() {
        let text = DESK.replace("d = 128", "d = 100");
        match RunConfig::parse(&text, None) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "heads"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn checkpoint_dir_defaults_to_output() {
        let text = DESK.replace("seed = 1", "seed = 1\ncheckpoint_every = 10");
        assert!(RunConfig::parse(&text, None).is_err());
        let cfg = RunConfig::parse(&text, Some(Path::new("run"))).unwrap();
        assert_eq!(cfg.train.checkpoint_dir.as_deref(), Some(Path::new("run")));
    }
}
