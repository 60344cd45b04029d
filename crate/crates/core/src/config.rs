//! TOML run configuration: `[scene]`, `[train]` and `[ablation]` sections.
//!
//! Every key is optional and falls back to the documented default; unknown
//! keys are errors. Ablation entries are named partial `[train]` tables
//! layered over the base `[train]` section.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ablation::{AblationGrid, SeedTriple};
use crate::data::SceneSpec;
use crate::error::{Error, Result};
use crate::train::TrainConfig;

/// Override keys are checked when the entry is resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub name: String,
    #[serde(flatten)]
    pub overrides: toml::Table,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    /// `[ancillary, primary, augment]` seed triples.
    pub seeds: Vec<[u64; 3]>,
    pub configs: Vec<AblationEntry>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub scene: SceneSpec,
    pub train: TrainConfig,
    pub ablation: AblationSection,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// The fully resolved configuration, every default spelled out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Applies an ablation entry's overrides to the base `[train]` section.
    pub fn resolve_entry(&self, entry: &AblationEntry) -> Result<TrainConfig> {
        let mut table = toml::Table::try_from(&self.train).map_err(|e| Error::Config(e.to_string()))?;
        for (k, v) in &entry.overrides {
            table.insert(k.clone(), v.clone());
        }
        TrainConfig::deserialize(table).map_err(|e| Error::Config(format!("ablation entry {:?}: {e}", entry.name)))
    }

    pub fn ablation_grid(&self) -> Result<AblationGrid> {
        let configs = self
            .ablation
            .configs
            .iter()
            .map(|e| Ok((e.name.clone(), self.resolve_entry(e)?)))
            .collect::<Result<Vec<_>>>()?;
        let seeds = self
            .ablation
            .seeds
            .iter()
            .map(|&[ancillary, primary, augment]| SeedTriple {
                ancillary,
                primary,
                augment,
            })
            .collect();
        let grid = AblationGrid { configs, seeds };
        grid.validate()?;
        Ok(grid)
    }
}
