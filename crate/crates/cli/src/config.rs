use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use fmt_search_core::data::SynthConfig;
use fmt_search_core::model::ModelConfig;
use fmt_search_core::training::TrainConfig;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub gallery_sizes: Vec<usize>,
    pub seed: u64,
    /// Protocol seeds evaluated by `sweep`.
    pub sweep_seeds: Vec<u64>,
    /// Gallery size reported in the ablation table.
    pub ablation_gallery_size: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            gallery_sizes: vec![2, 5, 10, 20, 40],
            seed: 0,
            sweep_seeds: vec![0, 1, 2],
            ablation_gallery_size: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub out_dir: PathBuf,
    /// Write `checkpoint_<iter>.json` every this many iterations; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            out_dir: PathBuf::from("runs"),
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub protocol: ProtocolConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.protocol.gallery_sizes.is_empty() {
            return Err(CliError::config("protocol.gallery_sizes must not be empty"));
        }
        if (self.model.image_height, self.model.image_width) != (self.data.image_height, self.data.image_width) {
            return Err(CliError::config("model and data image sizes differ"));
        }
        Ok(())
    }

    /// Reads an optional JSON file, applies `key=value` overrides and validates.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::config(format!("cannot read config {}: {e}", p.display())))?;
                let parsed: RunConfig = serde_json::from_str(&text)
                    .map_err(|e| CliError::config(format!("invalid config {}: {e}", p.display())))?;
                serde_json::to_value(parsed).expect("config serializes")
            }
            None => serde_json::to_value(RunConfig::default()).expect("config serializes"),
        };
        for (key, raw) in overrides {
            apply_override(&mut value, key, raw)?;
        }
        let cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| CliError::config(format!("invalid config override: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Sets the dotted `key` inside `root`; every path segment must already exist.
pub fn apply_override(root: &mut Value, key: &str, raw: &str) -> Result<(), CliError> {
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    for seg in key.split('.') {
        cur = cur
            .as_object_mut()
            .and_then(|o| o.get_mut(seg))
            .ok_or_else(|| CliError::config(format!("unknown config key `{key}`")))?;
    }
    *cur = parsed;
    Ok(())
}

/// Splits dotted overrides (`--train.lr0=0.01` or `--train.lr0 0.01`) out of
/// the argument list.
pub fn extract_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter().peekable();
    while let Some(a) = it.next() {
        let Some(body) = a.strip_prefix("--") else {
            rest.push(a);
            continue;
        };
        let (key, value) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (body.to_string(), None),
        };
        if !key.contains('.') {
            rest.push(a);
            continue;
        }
        let value = match value {
            Some(v) => v,
            None => match it.peek() {
                Some(next) if !next.starts_with("--") => it.next().expect("peeked"),
                _ => "true".to_string(),
            },
        };
        overrides.push((key, value));
    }
    (rest, overrides)
}
