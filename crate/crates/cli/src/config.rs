//! Run configuration: a TOML file merged with `--dotted.key=value` flags.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use posemap::apr::AprConfig;
use posemap::field::FieldConfig;
use posemap::scene::DeskDatasetConfig;
use posemap::trainer::TrainSchedule;
use serde::{Deserialize, Serialize};

pub const RUN_ROOT_ENV: &str = "POSEMAP_RUN_ROOT";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSection {
    #[serde(flatten)]
    pub dataset: DeskDatasetConfig,
    /// Share of the test records whose poses are sealed away for stage 4.
    pub unlabelled_fraction: f64,
    pub unlabelled_seed: u64,
}

impl Default for SceneSection {
    fn default() -> Self {
        Self {
            dataset: DeskDatasetConfig::default(),
            unlabelled_fraction: 0.5,
            unlabelled_seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// When set, every stage seed and the scene seed derive from it.
    pub seed: Option<u64>,
    pub scene: SceneSection,
    pub field: FieldConfig,
    pub apr: AprConfig,
    pub trainer: TrainSchedule,
}

impl RunConfig {
    /// Applies the global seed, if any, to the per-component seeds.
    pub fn resolved(mut self) -> Self {
        if let Some(s) = self.seed {
            self.scene.dataset.seed = s;
            self.scene.unlabelled_seed = s;
            self.trainer.stage1.seed = s.wrapping_add(1);
            self.trainer.stage2.seed = s.wrapping_add(2);
            self.trainer.stage3.seed = s.wrapping_add(3);
            self.trainer.stage4.seed = s.wrapping_add(4);
        }
        self
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

/// A `--key.path=value` flag.
#[derive(Clone, Debug, PartialEq)]
pub struct Override {
    pub path: Vec<String>,
    pub value: String,
}

/// Splits dotted-key overrides out of the raw argument list.
pub fn extract_overrides(args: Vec<String>) -> (Vec<String>, Vec<Override>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for arg in args {
        let parsed = arg.strip_prefix("--").and_then(|body| {
            let (key, value) = body.split_once('=')?;
            key.contains('.').then(|| Override {
                path: key.split('.').map(str::to_owned).collect(),
                value: value.to_owned(),
            })
        });
        match parsed {
            Some(o) => overrides.push(o),
            None => rest.push(arg),
        }
    }
    (rest, overrides)
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()))
}

pub fn apply_override(root: &mut toml::Value, o: &Override) -> Result<()> {
    let (last, parents) = o
        .path
        .split_last()
        .ok_or_else(|| anyhow!("empty override key"))?;
    let mut node = root;
    for key in parents {
        let table = node
            .as_table_mut()
            .ok_or_else(|| anyhow!("override {}: {key} is not a table", o.path.join(".")))?;
        node = table
            .entry(key.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| anyhow!("override {}: parent is not a table", o.path.join(".")))?;
    let mut value = parse_value(&o.value);
    if let (Some(toml::Value::Float(_)), toml::Value::Integer(i)) = (table.get(last), &value) {
        value = toml::Value::Float(*i as f64);
    }
    table.insert(last.clone(), value);
    Ok(())
}

/// Defaults, then the config file, then the overrides.
pub fn load(file: Option<&Path>, overrides: &[Override]) -> Result<RunConfig> {
    let mut value = toml::Value::try_from(RunConfig::default())?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let user: toml::Table =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        merge(&mut value, toml::Value::Table(user));
    }
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    let config: RunConfig = value
        .try_into()
        .map_err(|e| anyhow!("invalid configuration: {e}"))?;
    config.field.validate()?;
    config.apr.validate()?;
    config.trainer.validate()?;
    if !(0.0..=1.0).contains(&config.scene.unlabelled_fraction) {
        bail!("scene.unlabelled_fraction must lie in [0, 1]");
    }
    Ok(config)
}

fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `--run-dir`, else `$POSEMAP_RUN_ROOT/<name>`, else `runs/<name>`.
pub fn run_dir(explicit: Option<PathBuf>, name: &str) -> PathBuf {
    explicit.unwrap_or_else(|| {
        let root = std::env::var_os(RUN_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"));
        root.join(name)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn overrides_are_split_from_plain_flags() {
        let (rest, o) = extract_overrides(args(&[
            "posemap",
            "train",
            "--stage",
            "3",
            "--trainer.stage3.iters=2000",
            "--run-dir=x",
        ]));
        assert_eq!(
            rest,
            args(&["posemap", "train", "--stage", "3", "--run-dir=x"])
        );
        assert_eq!(o.len(), 1);
        assert_eq!(o[0].path, ["trainer", "stage3", "iters"]);
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let o = extract_overrides(args(&[
            "--trainer.stage3.iters=2000",
            "--trainer.stage1.lr=1",
            "--apr.losses.posemap=false",
            "--scene.train_views=10",
        ]))
        .1;
        let c = load(None, &o).unwrap();
        assert_eq!(c.trainer.stage3.iters, 2000);
        assert_eq!(c.trainer.stage1.lr, 1.0);
        assert!(!c.apr.losses.posemap);
        assert_eq!(c.scene.dataset.train_views, 10);
    }

    #[test]
    fn bad_override_is_rejected() {
        let o = extract_overrides(args(&["--trainer.stage3.iters=lots"])).1;
        assert!(load(None, &o).is_err());
    }

    #[test]
    fn echo_round_trips() {
        let c = RunConfig {
            seed: Some(9),
            ..RunConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, c.to_toml().unwrap()).unwrap();
        assert_eq!(load(Some(&p), &[]).unwrap(), c);
    }

    #[test]
    fn global_seed_fans_out() {
        let c = RunConfig {
            seed: Some(10),
            ..RunConfig::default()
        }
        .resolved();
        assert_eq!(c.trainer.stage3.seed, 13);
        assert_eq!(c.scene.dataset.seed, 10);
    }
}
