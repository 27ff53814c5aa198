//! Layered run configuration.
//!
//! Resolution order, strongest first: command-line flags, the command's table
//! in the `--config` file, `AUSTKIT_SEED` (seed fields only), built-in
//! defaults. Paths never enter the resolved config, so two runs that differ
//! only in their directories write identical snapshots.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::datagen::GeneratorConfig;
use crate::error::{Error, Result};
use crate::metrics::{ApMode, DEFAULT_THRESHOLD};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

pub const SEED_ENV: &str = "AUSTKIT_SEED";
pub const SNAPSHOT: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenRun {
    pub n: usize,
    pub generator: GeneratorConfig,
}

impl Default for GenRun {
    fn default() -> Self {
        Self {
            n: 64,
            generator: GeneratorConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRun {
    /// Use only the first `limit` samples; 0 means all.
    pub limit: usize,
    /// Write an intermediate checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
    /// Image size is always taken from the dataset.
    pub model: ModelConfig,
    pub optim: TrainConfig,
}

impl Default for TrainRun {
    fn default() -> Self {
        Self {
            limit: 0,
            checkpoint_every: 500,
            model: ModelConfig::default(),
            optim: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRun {
    pub threshold: f64,
    pub ap_mode: ApMode,
}

impl Default for EvalRun {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            ap_mode: ApMode::Macro,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InspectRun {
    pub zero_voting: bool,
}

/// Seed from the environment, if set.
pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Error::Config(format!("{SEED_ENV}: {e}"))),
    }
}

/// The `[section]` table of a config file, or an empty table.
pub fn load_section(path: Option<&Path>, section: &str) -> Result<Table> {
    let Some(path) = path else { return Ok(Table::new()) };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut doc: Table = text
        .parse()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    match doc.remove(section) {
        None => Ok(Table::new()),
        Some(Value::Table(t)) => Ok(t),
        Some(_) => Err(Error::Config(format!("{}: [{section}] must be a table", path.display()))),
    }
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn set_path(table: &mut Table, path: &[&str], value: Value) {
    let (last, parents) = path.split_last().expect("non-empty key path");
    let mut t = table;
    for p in parents {
        t = t
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .expect("seed path crosses a non-table");
    }
    t.insert(last.to_string(), value);
}

/// Defaults, then the environment seed at `seed_paths`, then `file`.
/// Unknown keys in `file` are rejected.
pub fn layer<T: Default + Serialize + DeserializeOwned>(file: Table, seed: Option<u64>, seed_paths: &[&[&str]]) -> Result<T> {
    let mut base = Table::try_from(T::default()).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(s) = seed {
        let v = Value::Integer(i64::try_from(s).map_err(|_| Error::Config(format!("seed {s} exceeds {}", i64::MAX)))?);
        for p in seed_paths {
            set_path(&mut base, p, v.clone());
        }
    }
    merge(&mut base, file);
    T::deserialize(base).map_err(|e| Error::Config(e.to_string()))
}

pub fn to_toml<T: Serialize>(section: &str, run: &T) -> Result<String> {
    let mut doc = Table::new();
    doc.insert(
        section.to_string(),
        Value::Table(Table::try_from(run).map_err(|e| Error::Config(e.to_string()))?),
    );
    toml::to_string(&doc).map_err(|e| Error::Config(e.to_string()))
}

/// Write the resolved config as `config.toml` in `dir`.
pub fn write_snapshot<T: Serialize>(dir: &Path, section: &str, run: &T) -> Result<()> {
    let path = dir.join(SNAPSHOT);
    std::fs::write(&path, to_toml(section, run)?).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const TRAIN_SEEDS: &[&[&str]] = &[&["model", "seed"], &["optim", "seed"]];

    fn table(s: &str) -> Table {
        s.parse().unwrap()
    }

    #[test]
    fn defaults_when_empty() {
        let r: TrainRun = layer(Table::new(), None, TRAIN_SEEDS).unwrap();
        assert_eq!(r, TrainRun::default());
    }

    #[test]
    fn file_beats_env_and_env_beats_defaults() {
        let r: TrainRun = layer(table("[model]\nseed = 5\n"), Some(9), TRAIN_SEEDS).unwrap();
        assert_eq!(r.model.seed, 5);
        assert_eq!(r.optim.seed, 9);
        assert_eq!(r.model.stages, 3);
    }

    #[test]
    fn nested_keys_merge_without_dropping_siblings() {
        let r: TrainRun = layer(table("checkpoint_every = 7\n[optim]\nlr = 0.5\n"), None, TRAIN_SEEDS).unwrap();
        assert_eq!(r.checkpoint_every, 7);
        assert_eq!(r.optim.lr, 0.5);
        assert_eq!(r.optim.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(layer::<TrainRun>(table("bogus = 1\n"), None, TRAIN_SEEDS).is_err());
        assert!(layer::<TrainRun>(table("[model]\nwidht = 1\n"), None, TRAIN_SEEDS).is_err());
        assert!(layer::<EvalRun>(table("ap_mode = \"median\"\n"), None, &[]).is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let mut r = GenRun::default();
        r.generator.seed = 42;
        r.generator.scale_range = (0.7, 1.3);
        let text = to_toml("gen", &r).unwrap();
        let mut doc: Table = text.parse().unwrap();
        let Some(Value::Table(t)) = doc.remove("gen") else { panic!() };
        assert_eq!(layer::<GenRun>(t, None, &[]).unwrap(), r);
    }
}
