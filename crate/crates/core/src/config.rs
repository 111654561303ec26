//! Run configuration files.
//!
//! ```toml
//! preset = "desk"
//! dataset = "scenes/toy"
//! out = "runs/toy"
//! seed = 3
//!
//! [train]
//! total_iters = 2000
//! lr.opacity = 0.02
//! ```
//!
//! Keys under `[train]` override the named preset field by field. Unknown
//! keys are rejected.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    preset: Option<String>,
    dataset: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    train: Option<toml::Table>,
}

/// A parsed configuration file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: "desk".into(),
            dataset: None,
            out: None,
            train: TrainConfig::desk(),
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table, prefix: &str) -> Result<()> {
    for (k, v) in over {
        let key = format!("{prefix}{k}");
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o, &format!("{key}."))?,
            (Some(slot), v) => *slot = v,
            (None, _) => return Err(Error::Config(format!("unknown key `train.{key}`"))),
        }
    }
    Ok(())
}

/// Applies `overrides` on top of `base`.
pub fn overlay(base: &TrainConfig, overrides: toml::Table) -> Result<TrainConfig> {
    let mut table = toml::Table::try_from(base).map_err(|e| Error::Config(e.to_string()))?;
    merge(&mut table, overrides, "")?;
    let cfg: TrainConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Parses configuration text. `path` only labels errors.
pub fn parse_config(text: &str, path: &Path) -> Result<RunConfig> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let preset = raw.preset.unwrap_or_else(|| "desk".into());
    let mut train = TrainConfig::preset(&preset)?;
    if let Some(t) = raw.train {
        train = overlay(&train, t)?;
    }
    if let Some(s) = raw.seed {
        train.seed = s;
    }
    let base = path.parent().unwrap_or(Path::new(""));
    let resolve = |p: PathBuf| if p.is_relative() { base.join(p) } else { p };
    Ok(RunConfig {
        preset,
        dataset: raw.dataset.map(resolve),
        out: raw.out.map(resolve),
        train,
    })
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, path)
}
