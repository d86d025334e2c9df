//! Run configuration: built-in defaults, layered under a TOML file, the
//! `CTSEL_SEED` environment variable and command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DosePolicyConfig, GenerationConfig, InitialConditions, PolicyAdjustment, SplitSizes};
use crate::models::{Architecture, Flavor, TrainConfig};
use crate::selection::SelectionConfig;
use crate::sim::{SimParams, System, TimeGrid};
use crate::eval::SweepSpec;
use crate::uncertainty::UncertaintyConfig;
use crate::{Error, Result};

pub const SEED_ENV: &str = "CTSEL_SEED";
pub const RESOLVED_FILE: &str = "resolved.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub system: System,
    pub sizes: SplitSizes,
    pub grid: TimeGrid,
    pub params: SimParams,
    pub initial: InitialConditions,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        let g = GenerationConfig::default();
        Self {
            system: g.system,
            sizes: g.sizes,
            grid: g.grid,
            params: g.params,
            initial: g.initial,
        }
    }
}

/// Surrogate architecture and optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub model: Flavor,
    pub hidden: usize,
    pub dropout: f64,
    pub revin: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub hsic_weight: f64,
    pub patience: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let arch = Architecture::new(Flavor::CrnLite, &TimeGrid::default());
        let t = TrainConfig::default();
        Self {
            model: arch.flavor,
            hidden: arch.hidden,
            dropout: arch.dropout,
            revin: arch.revin,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            weight_decay: t.weight_decay,
            hsic_weight: t.hsic_weight,
            patience: t.patience,
        }
    }
}

impl TrainingConfig {
    pub fn architecture(&self, grid: &TimeGrid) -> Architecture {
        Architecture {
            hidden: self.hidden,
            dropout: self.dropout,
            revin: self.revin,
            ..Architecture::new(self.model, grid)
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            hsic_weight: self.hsic_weight,
            patience: self.patience,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every stream in a run derives from it.
    pub seed: u64,
    pub output: PathBuf,
    /// Upper bound on concurrent jobs.
    pub workers: usize,
    pub simulation: SimulationConfig,
    pub policy: DosePolicyConfig,
    pub training: TrainingConfig,
    pub uncertainty: UncertaintyConfig,
    pub selection: SelectionConfig,
    pub sweep: SweepSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output: PathBuf::from("runs/default"),
            workers: 1,
            simulation: SimulationConfig::default(),
            policy: DosePolicyConfig::default(),
            training: TrainingConfig::default(),
            uncertainty: UncertaintyConfig::default(),
            selection: SelectionConfig::default(),
            sweep: SweepSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn generation(&self) -> GenerationConfig {
        let s = &self.simulation;
        GenerationConfig {
            system: s.system,
            sizes: s.sizes,
            policy: self.policy.clone(),
            grid: s.grid,
            params: s.params.clone(),
            initial: s.initial.clone(),
        }
    }

    pub fn architecture(&self) -> Architecture {
        self.training.architecture(&self.simulation.grid)
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |section: &str, r: Result<()>| {
            r.map_err(|e| match e {
                Error::Config(m) => Error::Config(m),
                other => Error::Config(format!("{section}: {other}")),
            })
        };
        if self.workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        wrap("simulation", self.generation().validate())?;
        wrap("training", self.architecture().validate())?;
        wrap("training", self.training.train_config(self.seed).validate())?;
        wrap("uncertainty", self.uncertainty.validate())?;
        wrap("selection", self.selection.validate())?;
        wrap("sweep", self.sweep.validate())
    }

    /// Writes `resolved.json` into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let path = dir.join(RESOLVED_FILE);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        Ok(path)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// One `section.key = value` override.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub key: String,
    pub value: toml::Value,
}

impl Override {
    pub fn new(key: impl Into<String>, value: impl Into<toml::Value>) -> Self {
        Self {
            key: key.into(),
            value: value.into(),
        }
    }

    /// Parses `key=value`; the value is read as a TOML literal, falling back
    /// to a bare string.
    pub fn parse(text: &str) -> Result<Self> {
        let (key, raw) = text
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{text}` must look like key=value")))?;
        let raw = raw.trim();
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        Ok(Self::new(key.trim(), value))
    }
}

/// Every accepted key: the defaults with each optional field filled in.
fn key_schema() -> Result<toml::Value> {
    let mut full = RunConfig::default();
    full.selection.target = Some(0.0);
    full.sweep.test_patients = Some(1);
    full.policy.adjustment = Some(PolicyAdjustment::CvsConstant);
    toml::Value::try_from(full).map_err(|e| Error::Config(format!("serializing defaults: {e}")))
}

fn suggest<'a>(key: &str, candidates: impl Iterator<Item = &'a String>) -> Option<&'a String> {
    candidates
        .map(|c| (strsim::jaro_winkler(key, c), c))
        .filter(|(s, _)| *s > 0.8)
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, c)| c)
}

fn check_keys(table: &toml::Table, schema: &toml::Table, prefix: &str) -> Result<()> {
    for (k, v) in table {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let Some(expected) = schema.get(k) else {
            let hint = suggest(k, schema.keys())
                .map(|s| format!(" (did you mean `{s}`?)"))
                .unwrap_or_default();
            return Err(Error::Config(format!("unknown key `{path}`{hint}")));
        };
        if let (toml::Value::Table(t), toml::Value::Table(s)) = (v, expected) {
            check_keys(t, s, &path)?;
        }
    }
    Ok(())
}

fn merge(base: &mut toml::Table, layer: toml::Table) {
    for (k, v) in layer {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(l)) => merge(b, l),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config("empty override key".into()))?;
    let mut table = root;
    for p in parts {
        table = table
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{key}`: `{p}` is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// Resolves `defaults ← file ← CTSEL_SEED ← overrides` and validates.
pub fn resolve(file_text: Option<&str>, seed_env: Option<&str>, overrides: &[Override]) -> Result<RunConfig> {
    let schema = key_schema()?;
    let schema = schema.as_table().expect("config serializes to a table");
    let mut layer = toml::Table::new();
    if let Some(text) = file_text {
        let file: toml::Table = toml::from_str(text).map_err(|e| Error::Config(format!("invalid TOML: {e}")))?;
        merge(&mut layer, file);
    }
    if let Some(s) = seed_env {
        let seed: u64 = s
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got `{s}`")))?;
        let seed = i64::try_from(seed).map_err(|_| Error::Config(format!("{SEED_ENV} is too large")))?;
        layer.insert("seed".into(), toml::Value::Integer(seed));
    }
    for o in overrides {
        set_path(&mut layer, &o.key, o.value.clone())?;
    }
    check_keys(&layer, schema, "")?;

    let mut merged = toml::Value::try_from(RunConfig::default())
        .map_err(|e| Error::Config(format!("serializing defaults: {e}")))?
        .as_table()
        .cloned()
        .expect("config serializes to a table");
    merge(&mut merged, layer);
    let config: RunConfig = serde_path_to_error::deserialize(toml::Value::Table(merged)).map_err(|e| {
        let path = e.path().to_string();
        Error::Config(format!("`{path}`: {}", e.into_inner()))
    })?;
    config.validate()?;
    Ok(config)
}

/// Reads `path` (if given) and the environment, then applies `overrides`.
pub fn load_config(path: Option<&Path>, overrides: &[Override]) -> Result<RunConfig> {
    let text = path
        .map(|p| fs::read_to_string(p).map_err(|e| Error::io(format!("reading config {}", p.display()), e)))
        .transpose()?;
    let env = std::env::var(SEED_ENV).ok();
    resolve(text.as_deref(), env.as_deref(), overrides)
}
