//! Pipeline configuration: a TOML document with `section.key=value`
//! overrides, parsed into validated sections.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::augmentation::AugmentationConfig;
use crate::datasets::Layout;
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::networks::NetworkConfig;
use crate::training::{RunConfig, TrainConfig};

pub use crate::networks::perceptual::WEIGHTS_ENV as PERCEPTUAL_WEIGHTS_ENV;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub root: Option<PathBuf>,
    pub layout: Layout,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            root: None,
            layout: Layout::Istd,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub checkpoint_dir: PathBuf,
    pub perceptual_weights: Option<PathBuf>,
    pub log_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            checkpoint_dir: PathBuf::from("checkpoints"),
            perceptual_weights: None,
            log_dir: PathBuf::from("logs"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: DatasetSection,
    pub train: TrainConfig,
    pub augment: AugmentationConfig,
    pub networks: NetworkConfig,
    pub eval: EvalConfig,
    pub paths: PathsSection,
}

fn parse_value(raw: &str) -> Value {
    // Bare words that are not valid TOML literals are taken as strings.
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key just written"),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Applies one `a.b.c=value` override to a TOML table.
pub fn apply_override(doc: &mut Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(spec.trim(), "override must look like section.key=value"))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key, "empty key segment"));
    }
    let mut table = doc;
    for (i, part) in parts[..parts.len() - 1].iter().enumerate() {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(parts[..=i].join("."), "is not a section"))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl PipelineConfig {
    /// Parses `text` with `overrides` applied, reporting the first bad key path.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("<config>", e.message().to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let de = toml::Value::Table(doc);
        let cfg: PipelineConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { "<config>".into() } else { path }, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; `None` starts from the defaults.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::config("--config", format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.run_config().validate()?;
        self.eval.validate()
    }

    /// The dataset root, which must exist.
    pub fn dataset_root(&self) -> Result<&Path> {
        match &self.dataset.root {
            None => Err(Error::config("dataset.root", "is required")),
            Some(p) if !p.is_dir() => Err(Error::config(
                "dataset.root",
                format!("{} is not a directory", p.display()),
            )),
            Some(p) => Ok(p),
        }
    }

    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            train: self.train.clone(),
            augment: self.augment.clone(),
            networks: self.networks.clone(),
        }
    }

    /// Explicit weights path, else the env var, else the resolver's default.
    pub fn perceptual_weights(&self) -> Option<PathBuf> {
        self.paths
            .perceptual_weights
            .clone()
            .or_else(|| std::env::var_os(PERCEPTUAL_WEIGHTS_ENV).map(PathBuf::from))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config("<config>", e.to_string()))
    }
}
