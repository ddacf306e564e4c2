//! Global configuration: master seed, default paths and flat parameter
//! overrides such as `train.lr = 0.05` or `episode.localization.k = 5`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use astra_core::localization::LocalizationConfig;
use astra_core::odometry::FusionWeights;
use astra_core::planner::TrainConfig;
use astra_core::rewards::RewardWeights;
use astra_core::sim::{DatasetConfig, EpisodeConfig, WorldConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Invocation problem reported with exit code 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub const PATH_KEYS: &[&str] = &[
    "cond", "data", "goal", "gt", "log", "map", "model", "out", "pred", "query", "weights", "world", "worlds",
];

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlobalConfig {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub paths: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub params: BTreeMap<String, Value>,
}

impl GlobalConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Usage(format!("{}: {e}", path.display())))?;
        let cfg: GlobalConfig =
            serde_json::from_str(&text).map_err(|e| Usage(format!("config {}: {e}", path.display())))?;
        if let Some(k) = cfg.paths.keys().find(|k| !PATH_KEYS.contains(&k.as_str())) {
            return Err(Usage(format!("unknown path key `{k}`")).into());
        }
        Ok(cfg)
    }

    /// A path given on the command line, else the configured default.
    pub fn path(&self, flag: Option<PathBuf>, key: &str) -> anyhow::Result<PathBuf> {
        flag.or_else(|| self.paths.get(key).cloned())
            .ok_or_else(|| Usage(format!("missing --{key} (no default in config paths)")).into())
    }
}

/// Every tunable parameter, grouped by section.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Params {
    pub world: WorldConfig,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub episode: EpisodeConfig,
    pub localization: LocalizationConfig,
    pub reward: RewardWeights,
    pub fusion: FusionWeights,
}

/// Parse a `key=value` override. Values are read as JSON, falling back to a
/// bare string.
pub fn parse_set(arg: &str) -> Result<(String, Value), String> {
    let (k, v) = arg
        .split_once('=')
        .ok_or_else(|| format!("expected key=value, got `{arg}`"))?;
    let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), v))
}

impl Params {
    pub fn with_overrides<'a>(overrides: impl IntoIterator<Item = (&'a String, &'a Value)>) -> anyhow::Result<Self> {
        let mut tree = serde_json::to_value(Params::default())?;
        for (key, value) in overrides {
            let mut node = &mut tree;
            for part in key.split('.') {
                node = match node {
                    Value::Object(m) if m.contains_key(part) => m.get_mut(part).expect("checked"),
                    _ => return Err(Usage(format!("unknown parameter `{key}`")).into()),
                };
            }
            *node = value.clone();
        }
        serde_json::from_value(tree).map_err(|e| Usage(format!("bad parameter value: {e}")).into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_and_unknown_keys_fail() {
        let set: BTreeMap<String, Value> = [
            ("train.lr".to_string(), Value::from(0.25)),
            ("episode.localization.k".to_string(), Value::from(5)),
        ]
        .into();
        let p = Params::with_overrides(&set).unwrap();
        assert_eq!(p.train.lr, 0.25);
        assert_eq!(p.episode.localization.k, 5);

        let bad: BTreeMap<String, Value> = [("train.lrr".to_string(), Value::from(1))].into();
        let err = Params::with_overrides(&bad).unwrap_err();
        assert!(err.to_string().contains("train.lrr"));
    }

    #[test]
    fn set_values() {
        assert_eq!(parse_set("a.b=3").unwrap(), ("a.b".into(), Value::from(3)));
        assert_eq!(parse_set("a=rooms").unwrap(), ("a".into(), Value::from("rooms")));
        assert!(parse_set("novalue").is_err());
    }
}
