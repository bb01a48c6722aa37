//! Run configuration: one JSON document holding the data generator, the
//! training setup and the output directory, patched by `--section.key value`
//! flags.

use std::fs;
use std::path::{Path, PathBuf};

use gsmoe::data::SyntheticConfig;
use gsmoe::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

pub const RESOLVED_NAME: &str = "config.resolved.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: SyntheticConfig,
    pub train: TrainConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: SyntheticConfig::default(),
            train: TrainConfig::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    /// Reads `path` (or starts from the defaults) and applies `overrides`,
    /// given as `(dotted.key, raw value)` pairs.
    pub fn resolve(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut doc = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
                let cfg: RunConfig =
                    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
                serde_json::to_value(cfg).expect("config serialises")
            }
            None => serde_json::to_value(RunConfig::default()).expect("config serialises"),
        };
        for (key, raw) in overrides {
            apply_override(&mut doc, key, raw)?;
        }
        let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        cfg.data.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        cfg.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }

    pub fn write_resolved(&self) -> Result<PathBuf, CliError> {
        fs::create_dir_all(&self.output_dir).map_err(gsmoe::Error::from)?;
        let path = self.output_dir.join(RESOLVED_NAME);
        let text = serde_json::to_string_pretty(self).expect("config serialises");
        fs::write(&path, text + "\n").map_err(gsmoe::Error::from)?;
        Ok(path)
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.output_dir.join(rel)
    }
}

/// Sets `doc[a][b]... = raw`. The value is read as JSON when it parses and
/// as a plain string otherwise. Every key along the path must already exist.
pub fn apply_override(doc: &mut Value, key: &str, raw: &str) -> Result<(), CliError> {
    let mut node = doc;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(|| CliError::Usage(format!("unknown config key `{key}`")))?;
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

/// Splits `--dotted.key value`, `--dotted.key=value` and `--output_dir ...`
/// flags out of the argument list; everything else is left for clap.
pub fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>), CliError> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if !(name.contains('.') || name == "output_dir") {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .ok_or_else(|| CliError::Usage(format!("--{name} needs a value")))?,
        };
        overrides.push((name, value));
    }
    Ok((rest, overrides))
}
