//! Run configuration: a TOML file plus `key.path=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::editing::{EditConfig, EncoderVariant, Relaxation, DEFAULT_ITERATIONS, DEFAULT_LEARNING_RATE};
use crate::error::{Error, Result};
use crate::models::Arch;
use crate::training::{TrainConfig, BASE_LAMBDA, FINETUNE_LAMBDA};

/// Output root when no `--out` is given.
pub const HOME_VAR: &str = "CEDIT_HOME";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditSettings {
    pub iterations: usize,
    pub learning_rate: f64,
    pub grid_search: bool,
    pub adapt_delta_y: bool,
    pub relaxation: Relaxation,
    pub encoder: EncoderVariant,
    /// Compress the full-budget temperature schedule into `iterations`
    /// instead of using it verbatim.
    pub rescale_schedule: bool,
}

impl Default for EditSettings {
    fn default() -> Self {
        Self {
            iterations: DEFAULT_ITERATIONS,
            learning_rate: DEFAULT_LEARNING_RATE,
            grid_search: true,
            adapt_delta_y: true,
            relaxation: Relaxation::Sga,
            encoder: EncoderVariant::Base,
            rescale_schedule: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub arch: Arch,
    pub lambda0: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patch_size: usize,
    pub patches: usize,
    pub finetune_lambda: f64,
    pub finetune_epochs: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            arch: Arch::desk(),
            lambda0: BASE_LAMBDA,
            epochs: 60,
            batch_size: 16,
            learning_rate: 1e-4,
            patch_size: 64,
            patches: 1000,
            finetune_lambda: FINETUNE_LAMBDA,
            finetune_epochs: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads for independent jobs; 0 uses every core.
    pub jobs: usize,
    pub edit: EditSettings,
    pub train: TrainSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            jobs: 0,
            edit: EditSettings::default(),
            train: TrainSettings::default(),
        }
    }
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts = key.split('.').peekable();
    let mut table = root;
    while let Some(part) = parts.next() {
        if part.is_empty() {
            return Err(Error::Config(format!("bad override key '{key}'")));
        }
        if parts.peek().is_none() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        let next = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = next
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{key}': '{part}' is not a table")))?;
    }
    unreachable!("split yields at least one part")
}

fn merge(into: &mut toml::Table, from: toml::Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(toml::Value::Table(a)), toml::Value::Table(b)) => merge(a, b),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    // Anything TOML cannot read as a value is taken as a bare string.
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    /// Reads `path` (when given) and applies `overrides` of the form
    /// `edit.iterations=500`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        // Defaults first, so a partial nested table keeps the remaining fields.
        let mut table = toml::Table::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let file = toml::from_str::<toml::Table>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            merge(&mut table, file);
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{o}' is not key=value")))?;
            set_path(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.edit_config().validate()?;
        self.train.arch.validate()?;
        if self.train.patches == 0 {
            return Err(Error::Config("train.patches must be positive".into()));
        }
        Ok(())
    }

    pub fn edit_config(&self) -> EditConfig {
        let e = &self.edit;
        let base = EditConfig {
            learning_rate: e.learning_rate,
            grid_search_enabled: e.grid_search,
            adapt_delta_y: e.adapt_delta_y,
            relaxation: e.relaxation,
            encoder: e.encoder,
            seed: self.seed,
            ..EditConfig::enhanced()
        };
        if e.rescale_schedule {
            base.with_rescaled_iterations(e.iterations)
        } else {
            EditConfig {
                iterations: e.iterations,
                ..base
            }
        }
    }

    pub fn train_config(&self, log_path: Option<PathBuf>) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lambda0: t.lambda0,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            patch_size: t.patch_size,
            seed: self.seed,
            log_path,
        }
    }

    /// Hex SHA-256 of the resolved configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(json))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// `explicit`, or `$CEDIT_HOME/<default_name>` (`./cedit-out/<default_name>`
/// when unset).
pub fn output_dir(explicit: Option<&Path>, default_name: &str) -> PathBuf {
    match explicit {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(HOME_VAR)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("cedit-out"))
            .join(default_name),
    }
}

/// Written next to every command's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub model_id: Option<String>,
    pub seed: u64,
    pub config: RunConfig,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        let json = serde_json::to_vec_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        crate::checkpoint::write_atomic(&path, &json)?;
        Ok(path)
    }
}
