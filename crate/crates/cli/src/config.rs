//! Run configuration: one TOML file plus `key=value` overrides.
//!
//! Every random draw derives from the top-level `seed`, so the sections
//! carry no seeds of their own.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use flowkin::kinematics::{Category, CategorySpec, DatasetConfig, SplitMode};
use flowkin::nets::{ConditionMode, ModelConfig};
use flowkin::optim::AdamConfig;
use flowkin::rng::{derive_seed, tag};
use flowkin::sampler::IntegratorConfig;
use flowkin::train::{select_variant, TrainConfig, Variant};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub category: Category,
    pub instances: usize,
    pub samples_per_instance: usize,
    pub points: usize,
    pub colored: bool,
    pub split_mode: SplitMode,
    /// Per-instance DoF options; defaults to the category's own DoF.
    pub dof_choices: Option<Vec<usize>>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            category: Category::Pliers,
            instances: 8,
            samples_per_instance: 60,
            points: 256,
            colored: false,
            split_mode: SplitMode::ByAction,
            dof_choices: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub latent_dim: usize,
    pub point_hidden: Vec<usize>,
    pub latent_hidden: Vec<usize>,
    pub encoder_hidden: Vec<usize>,
    pub action_hidden: usize,
    pub fourier_features: usize,
    pub fourier_sigma: f64,
    pub time_features: usize,
    pub condition_mode: ConditionMode,
    pub adversary_hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            point_hidden: vec![128; 3],
            latent_hidden: vec![128; 2],
            encoder_hidden: vec![32, 64, 128],
            action_hidden: 128,
            fourier_features: 32,
            fourier_sigma: 1.0,
            time_features: 32,
            condition_mode: ConditionMode::Add,
            adversary_hidden: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub latent_weight: f64,
    pub variant: Variant,
    pub adversary_start: f64,
    pub grl_max: f64,
    pub stop_latent_gradient: bool,
    /// Checkpoint cadence in steps; 0 writes only the initial and final ones.
    pub checkpoint_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 4,
            lr: 1e-3,
            latent_weight: 1.0,
            variant: Variant::Cond,
            adversary_start: 0.5,
            grl_max: 1.0,
            stop_latent_gradient: false,
            checkpoint_every: 5_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset: PathBuf,
    pub run: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: "data".into(),
            run: "run".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub integrator: IntegratorConfig,
    pub paths: Paths,
}

/// Parses an override value as TOML, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).context("empty override key")?;
    let mut current = table;
    for part in parts {
        current = current
            .entry(part)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .with_context(|| format!("override {key}: {part} is not a section"))?;
    }
    current.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::with_overrides(text, &[])
    }

    /// Applies `key=value` overrides (dotted keys address sections) on top of
    /// the TOML text, then deserializes and validates.
    pub fn with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().context("config is not valid TOML")?;
        for item in overrides {
            let (key, value) = item
                .split_once('=')
                .with_context(|| format!("override {item:?} is not key=value"))?;
            set_path(&mut table, key.trim(), parse_value(value.trim()))?;
        }
        let config: RunConfig = table.try_into().context("invalid config")?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            None => String::new(),
        };
        Self::with_overrides(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset_config().validate()?;
        self.train_config().validate()?;
        self.integrator.validate()?;
        let d = if self.data.colored { 6 } else { 3 };
        self.model_config(d, self.category_spec().j_max()).validate()?;
        if self.train.batch_size == 0 {
            bail!("train.batch_size must be positive");
        }
        Ok(())
    }

    pub fn category_spec(&self) -> CategorySpec {
        let spec = CategorySpec::new(self.data.category, self.data.instances);
        match &self.data.dof_choices {
            Some(choices) => spec.with_dof_choices(choices.clone()),
            None => spec,
        }
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        let mut c = DatasetConfig::new(
            self.category_spec(),
            self.data.samples_per_instance,
            self.data.points,
            self.seed,
        );
        c.colored = self.data.colored;
        c.split_mode = self.data.split_mode;
        c
    }

    /// Network config for data of `point_dim` channels and `action_dim` joints.
    pub fn model_config(&self, point_dim: usize, action_dim: usize) -> ModelConfig {
        let m = &self.model;
        let mut config = ModelConfig {
            point_dim,
            action_dim,
            latent_dim: m.latent_dim,
            point_hidden: m.point_hidden.clone(),
            latent_hidden: m.latent_hidden.clone(),
            encoder_hidden: m.encoder_hidden.clone(),
            action_hidden: m.action_hidden,
            fourier_features: m.fourier_features,
            fourier_sigma: m.fourier_sigma,
            fourier_seed: derive_seed(self.seed, &[tag("fourier")]),
            time_features: m.time_features,
            condition_mode: m.condition_mode,
            latent_conditioned: true,
            adversary_hidden: None,
            init_seed: derive_seed(self.seed, &[tag("init")]),
        };
        select_variant(self.train.variant, &mut config);
        if config.adversary_hidden.is_some() {
            config.adversary_hidden = Some(m.adversary_hidden);
        }
        config
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            latent_weight: t.latent_weight,
            adam: AdamConfig {
                lr: t.lr,
                ..AdamConfig::default()
            },
            batch_size: t.batch_size,
            steps: t.steps,
            variant: t.variant,
            adversary_start: t.adversary_start,
            grl_max: t.grl_max,
            stop_latent_gradient: t.stop_latent_gradient,
            seed: derive_seed(self.seed, &[tag("train")]),
            ..TrainConfig::default()
        }
    }
}
