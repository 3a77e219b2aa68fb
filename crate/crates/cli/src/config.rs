//! Run configuration: one JSON document with typed sections. Commands pull
//! the sections they need and reject files with unknown keys so a typo'd
//! field never silently falls back to a default.

use std::path::Path;

use xtrd_core::{DecodeConfig, ModelConfig, SyntheticTaskConfig, TrainConfig};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every random draw in a run descends from it (or from a
    /// section-level seed recorded alongside). Mandatory so no artifact is
    /// ever produced from unstated randomness.
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decode: Option<DecodeConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<SyntheticTaskConfig>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Usage(format!("cannot read config {}: {e}", path.display()))
        })?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> &'static str {
        r#"{"seed": 7, "data": {"vocab_size": 5, "frames_per_token": 2,
            "feature_dim": 4, "noise_std": 0.1, "min_tokens": 1,
            "max_tokens": 3, "seed": 0}}"#
    }

    #[test]
    fn round_trip_is_canonical() {
        let cfg: RunConfig = serde_json::from_str(minimal()).unwrap();
        let once = cfg.to_pretty_json();
        let again: RunConfig = serde_json::from_str(&once).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(once, again.to_pretty_json());
    }

    #[test]
    fn seed_is_mandatory() {
        let err = serde_json::from_str::<RunConfig>("{}").unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
    }

    #[test]
    fn unknown_keys_are_named() {
        let err =
            serde_json::from_str::<RunConfig>(r#"{"seed": 1, "modle": {}}"#).unwrap_err();
        assert!(err.to_string().contains("modle"), "{err}");
    }
}
