//! Run configuration: a TOML file, `--set key=value` overrides on top, and
//! the fully resolved result written next to every run's outputs.

use std::path::Path;

use anyhow::{bail, Context, Result};
use q2a::data::Dataset;
use q2a::model::ModelConfig;
use q2a::train::TrainConfig;
use serde::{Deserialize, Serialize};

pub const RESOLVED_CONFIG: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed: model initialisation and minibatch order.
    pub seed: u64,
    /// Samples held out from the end of the dataset for validation.
    pub holdout: Option<usize>,
    /// Fraction held out when `holdout` is not given.
    pub val_fraction: f64,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            holdout: None,
            val_fraction: 0.2,
            model: ModelConfig::reference(),
            train: TrainConfig::reference(),
        }
    }
}

/// Parses `key=value`, where the value is TOML (`lr=3e-4`,
/// `fusion_kind="sum"`) or, failing that, a bare string (`fusion_kind=sum`).
fn parse_override(arg: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, raw) = arg
        .split_once('=')
        .with_context(|| format!("override {arg:?} is not key=value"))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        bail!("override {arg:?} has an empty key");
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((path, value))
}

fn apply(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty key path");
    let mut node = table;
    for p in parents {
        node = node
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .with_context(|| format!("{p} is not a table"))?;
    }
    node.insert(last.clone(), value);
    Ok(())
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (key, value) in overlay {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

impl RunConfig {
    /// Defaults, then the file (if any), then each override in order. A
    /// top-level `seed` override also reseeds the model and shuffling.
    pub fn resolve(
        file: Option<&Path>,
        overrides: &[String],
        seed: Option<u64>,
    ) -> Result<RunConfig> {
        let mut table = match file {
            Some(path) => std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?
                .parse::<toml::Table>()
                .with_context(|| format!("parsing {}", path.display()))?,
            None => toml::Table::new(),
        };
        for arg in overrides {
            let (path, value) = parse_override(arg)?;
            apply(&mut table, &path, value)?;
        }
        // Partial [model] / [train] tables fill in from the reference
        // settings rather than the per-type defaults.
        let given = table;
        let mut table =
            toml::Table::try_from(RunConfig::default()).context("serialising defaults")?;
        merge(&mut table, given);
        let explicit_model_seed = table.get("model").and_then(|m| m.get("seed")).is_some();
        let explicit_shuffle = table
            .get("train")
            .and_then(|t| t.get("shuffle_seed"))
            .is_some();
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .context("invalid run configuration")?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        if seed.is_some() || !explicit_model_seed {
            cfg.model.seed = cfg.seed;
        }
        if seed.is_some() || !explicit_shuffle {
            cfg.train.shuffle_seed = cfg.seed;
        }
        if !(0.0..1.0).contains(&cfg.val_fraction) {
            bail!("val_fraction must lie in [0, 1)");
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// Number of samples held out of `n`.
    pub fn holdout_of(&self, n: usize) -> usize {
        self.holdout
            .unwrap_or_else(|| (n as f64 * self.val_fraction).round() as usize)
            .min(n)
    }

    /// Splits the dataset and sizes the model to its vocabularies.
    pub fn prepare(&mut self, data: Dataset) -> Result<(Dataset, Dataset)> {
        self.model.fit_to_data(&data);
        self.model.validate()?;
        let held = self.holdout_of(data.len());
        let (train, val) = data.split_tail(held);
        if train.is_empty() || val.is_empty() {
            bail!(
                "need non-empty training and validation splits (dataset has {} samples, holding out {held})",
                train.len() + val.len()
            );
        }
        Ok((train, val))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RESOLVED_CONFIG);
        let text = toml::to_string_pretty(self).context("serialising run configuration")?;
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_are_typed_and_nested() {
        let cfg = RunConfig::resolve(
            None,
            &[
                "train.lr=0.01".into(),
                "model.fusion_kind=sum".into(),
                "model.feature_dim=32".into(),
                "holdout=10".into(),
            ],
            Some(9),
        )
        .unwrap();
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.model.fusion_kind, q2a::model::FusionKind::Sum);
        assert_eq!(cfg.model.feature_dim, 32);
        assert_eq!(cfg.holdout, Some(10));
        assert_eq!(
            (cfg.seed, cfg.model.seed, cfg.train.shuffle_seed),
            (9, 9, 9)
        );
    }

    #[test]
    fn partial_tables_keep_reference_settings() {
        let cfg = RunConfig::resolve(
            None,
            &["model.feature_dim=32".into(), "train.epochs=3".into()],
            None,
        )
        .unwrap();
        assert_eq!(cfg.model.activation, q2a::tensor::Activation::Relu);
        assert_eq!(cfg.model.answer_embed_dim, 128);
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.train.epochs, 3);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(RunConfig::resolve(None, &["model.widht=3".into()], None).is_err());
        assert!(RunConfig::resolve(None, &["train.batch_size=0".into()], None).is_err());
        assert!(RunConfig::resolve(None, &["no_equals".into()], None).is_err());
        assert!(RunConfig::resolve(None, &["val_fraction=1.5".into()], None).is_err());
    }

    #[test]
    fn resolved_config_reproduces_itself() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::resolve(
            None,
            &["model.seed=4".into(), "train.epochs=2".into()],
            None,
        )
        .unwrap();
        assert_eq!(cfg.model.seed, 4);
        assert_eq!(cfg.train.shuffle_seed, 0);
        cfg.write(dir.path()).unwrap();
        let again = RunConfig::resolve(Some(&dir.path().join(RESOLVED_CONFIG)), &[], None).unwrap();
        assert_eq!(again, cfg);
    }
}
