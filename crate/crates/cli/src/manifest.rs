use dceus_mc::{McError, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// One manifest per run: the fully resolved configuration plus enough
/// provenance (paths, version, seed) to reproduce the outputs bit-exactly
/// by feeding the manifest back as `--config`.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest<C: Serialize> {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: C,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub elapsed_seconds: f64,
}

impl<C: Serialize> RunManifest<C> {
    pub fn new(command: &str, config: C) -> Self {
        Self {
            tool: "dceus-mc".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            seed: None,
            elapsed_seconds: 0.0,
        }
    }

    pub fn input(&mut self, key: &str, path: &Path) {
        self.inputs.insert(key.into(), path.display().to_string());
    }

    pub fn output(&mut self, key: &str, path: &Path) {
        self.outputs.insert(key.into(), path.display().to_string());
    }
}

/// Read a config of type `C` from a JSON file that is either the config
/// itself or a run manifest wrapping one (so manifests re-run as configs).
pub fn load_config<C: for<'de> Deserialize<'de>>(path: &Path) -> Result<C> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| McError::Malformed(format!("{}: {e}", path.display())))?;
    let config_value = match &value {
        serde_json::Value::Object(map) if map.contains_key("config") && map.contains_key("tool") => {
            map["config"].clone()
        }
        _ => value,
    };
    serde_json::from_value(config_value)
        .map_err(|e| McError::InvalidArgument(format!("config {}: {e}", path.display())))
}
