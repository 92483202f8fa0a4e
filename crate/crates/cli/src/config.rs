use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokenfusion::train::{AugmentConfig, DatasetSource, OptimConfig};
use tokenfusion::fusion::end_to_end_options;
use tokenfusion::{DType, ModelConfig, Stencil};

use crate::error::CliError;

/// Settings of the `gradcheck` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckSettings {
    pub eps: f64,
    pub tol: f64,
    pub max_per_tensor: usize,
    pub max_total: usize,
    pub stencil: Stencil,
    /// Check the model with one encoder block per stack instead of the full budget.
    pub minimal_depth: bool,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        let o = end_to_end_options(0);
        Self { eps: o.eps, tol: o.tol, max_per_tensor: o.max_per_tensor, max_total: o.max_total, stencil: o.stencil, minimal_depth: true }
    }
}

/// Everything a run needs. Missing keys take their defaults, unknown keys are errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub augment: AugmentConfig,
    pub dataset: DatasetSource,
    pub out: PathBuf,
    pub seed: u64,
    pub dtype: DType,
    pub gradcheck: GradCheckSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            augment: AugmentConfig::default(),
            dataset: DatasetSource::default(),
            out: PathBuf::from("runs/default"),
            seed: 0,
            dtype: DType::Float32,
            gradcheck: GradCheckSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let mut cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.optim.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Reads `path` (or starts from the defaults) and applies `key=value`
    /// overrides. Keys are dotted paths into the resolved tree; values are
    /// JSON, or bare strings.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let base = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                Self::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => Self::default(),
        };
        if overrides.is_empty() {
            return Ok(base);
        }
        let mut tree = serde_json::to_value(&base).expect("config serializes");
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        Self::from_json(&tree.to_string())
    }
}

fn apply_override(tree: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let path = parts[..=i].join(".");
        node = match node {
            Value::Object(map) => map.get_mut(*part).ok_or_else(|| CliError::Config(format!("unknown config key `{path}`")))?,
            Value::Array(items) => {
                let idx: usize = part.parse().map_err(|_| CliError::Config(format!("`{path}` needs a numeric index")))?;
                items.get_mut(idx).ok_or_else(|| CliError::Config(format!("index out of range in `{path}`")))?
            }
            _ => return Err(CliError::Config(format!("`{path}` does not name a nested key"))),
        };
    }
    *node = value;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(RunConfig::from_json(r#"{"modle": {}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"model": {"head": "mixing"}}"#).is_err());
    }

    #[test]
    fn overrides_apply() {
        let c = RunConfig::load(None, &["model.head_type=token_wise".into(), "optim.lr=0.01".into(), "model.image_size.1=64".into(), "seed=9".into()]).unwrap();
        assert_eq!(c.model.head_type, tokenfusion::fusion::HeadType::TokenWise);
        assert_eq!(c.optim.lr, 0.01);
        assert_eq!(c.model.image_size, [32, 64]);
        assert_eq!(c.optim.seed, 9);
    }

    #[test]
    fn bad_overrides_rejected() {
        assert!(RunConfig::load(None, &["model.nope=1".into()]).is_err());
        assert!(RunConfig::load(None, &["model".into()]).is_err());
        assert!(RunConfig::load(None, &["model.head_type=sideways".into()]).is_err());
    }
}
