//! Run manifest: enough structured metadata to reproduce a run. The parsed
//! run configuration is echoed back verbatim as TOML text.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PipelineError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub threads: usize,
    pub threshold: f64,
    #[serde(default)]
    pub checkpoint: Option<String>,
    #[serde(default)]
    pub checkpoint_sha256: Option<String>,
    /// Verbatim TOML of the configuration the run was parsed from.
    pub config_toml: String,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| PipelineError::Format(format!("manifest encode: {e}")))?;
        std::fs::write(path, text).map_err(|e| PipelineError::io(path.display(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| PipelineError::io(path.display(), e))?;
        toml::from_str(&text).map_err(|e| PipelineError::Format(format!("manifest decode: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        let m = RunManifest {
            command: "infer".into(),
            seed: 7,
            threads: 1,
            threshold: 0.5,
            checkpoint: Some("model.ckpt".into()),
            checkpoint_sha256: Some("abc123".into()),
            config_toml: "profile = \"toy\"\n".into(),
            metrics: BTreeMap::from([("dice".to_string(), 97.5)]),
        };
        m.save(&path).unwrap();
        let back = RunManifest::load(&path).unwrap();
        assert_eq!(m, back);
    }
}
