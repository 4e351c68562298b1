//! TOML experiment files.
//!
//! ```toml
//! name = "desk"
//! dataset = "synthetic-gray"      # or a full table, see DatasetSource
//!
//! [federation]
//! seed = 0
//! clients = 4
//! rounds = 50
//! scheme = { name = "fedprox", mu = 0.01 }
//! watermarks = { kind = "glyph" }
//!
//! [federation.train]
//! lambda = 1.0
//! ```
//!
//! Every field is optional. `arch` takes a full architecture table and
//! defaults to the small VGG-style network sized for the dataset.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use wmfed_core::data::{Dataset, DatasetSource};
use wmfed_core::federation::FederationConfig;
use wmfed_core::model::ArchConfig;

use crate::UsageError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DatasetChoice {
    Named(String),
    Source(DatasetSource),
}

impl DatasetChoice {
    pub fn source(&self) -> Result<DatasetSource> {
        match self {
            DatasetChoice::Named(n) if n == "synthetic-gray" => Ok(DatasetSource::desk()),
            DatasetChoice::Named(n) => Err(UsageError(format!("unknown dataset '{n}' (known: synthetic-gray)")).into()),
            DatasetChoice::Source(s) => Ok(s.clone()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Experiment {
    pub name: String,
    pub dataset: DatasetChoice,
    pub arch: Option<ArchConfig>,
    pub federation: FederationConfig,
}

impl Default for Experiment {
    fn default() -> Self {
        Experiment {
            name: "experiment".into(),
            dataset: DatasetChoice::Named("synthetic-gray".into()),
            arch: None,
            federation: FederationConfig::default(),
        }
    }
}

impl Experiment {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| UsageError(format!("bad config: {}", e.message())).into())
    }

    pub fn arch_for(&self, train: &Dataset) -> ArchConfig {
        self.arch
            .clone()
            .unwrap_or_else(|| ArchConfig::tiny_vgg(train.shape, train.classes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use wmfed_core::federation::Scheme;

    #[test]
    fn empty_file_gives_the_desk_defaults() {
        let e = Experiment::parse("").unwrap();
        assert_eq!(e.federation, FederationConfig::default());
        assert_eq!(e.dataset.source().unwrap(), DatasetSource::desk());
        assert!(e.arch.is_none());
    }

    #[test]
    fn nested_tables_override_defaults() {
        let e = Experiment::parse(
            r#"
name = "prox"
[federation]
clients = 6
rounds = 3
scheme = { name = "fedprox", mu = 0.05 }
[federation.train]
lambda = 10.0
contrastive_enabled = false
"#,
        )
        .unwrap();
        assert_eq!(e.name, "prox");
        assert_eq!(e.federation.clients, 6);
        assert_eq!(e.federation.scheme, Scheme::FedProx { mu: 0.05 });
        assert_eq!(e.federation.train.lambda, 10.0);
        assert!(!e.federation.train.contrastive_enabled);
        assert_eq!(e.federation.train.margin, 0.5);
    }

    #[test]
    fn unknown_keys_and_datasets_are_usage_errors() {
        let err = Experiment::parse("nmae = 1").unwrap_err();
        assert!(err.downcast_ref::<UsageError>().is_some());
        let e = Experiment::parse(r#"dataset = "cifar""#).unwrap();
        assert!(e.dataset.source().unwrap_err().downcast_ref::<UsageError>().is_some());
    }

    #[test]
    fn readme_examples_parse() {
        let readme = include_str!("../../../README.md");
        let blocks: Vec<&str> = readme
            .split("```toml\n")
            .skip(1)
            .map(|b| &b[..b.find("```").unwrap()])
            .collect();
        assert_eq!(blocks.len(), 2);
        let desk = Experiment::parse(blocks[0]).unwrap();
        assert_eq!(desk.federation, FederationConfig::default());
        assert_eq!(desk.dataset.source().unwrap(), DatasetSource::desk());
        let idx = Experiment::parse(blocks[1]).unwrap();
        assert!(matches!(idx.dataset.source().unwrap(), DatasetSource::Idx { classes: 10, .. }));
    }
}
