use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::kinematics::template::{build_instance, pad_action, ArticulatedTemplate, CategorySpec, LimitPolicy};
use crate::rng::{stream, tag};

/// Every sixth item (by action index, or by instance) is held out.
const SPLIT_PERIOD: usize = 6;
/// Minimum sup-norm gap between a test action and any train action of the
/// same instance.
pub const ACTION_SEPARATION: f64 = 1e-6;
const MAX_REDRAWS: u64 = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

/// How held-out samples are chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    /// Unseen actions of seen instances.
    #[default]
    ByAction,
    /// Whole instances held out.
    ByInstance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub spec: CategorySpec,
    pub samples_per_instance: usize,
    pub points: usize,
    pub colored: bool,
    pub split_mode: SplitMode,
    pub seed: u64,
}

impl DatasetConfig {
    pub fn new(spec: CategorySpec, samples_per_instance: usize, points: usize, seed: u64) -> Self {
        Self {
            spec,
            samples_per_instance,
            points,
            colored: false,
            split_mode: SplitMode::ByAction,
            seed,
        }
    }

    pub fn point_dim(&self) -> usize {
        if self.colored {
            6
        } else {
            3
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.samples_per_instance == 0 || self.points == 0 {
            return Err(Error::Config("samples_per_instance and points must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KinematicSample {
    pub id: usize,
    pub instance: usize,
    pub cloud: PointCloud,
    /// Padded to the category `J_max`.
    pub action: Vec<f64>,
    pub split: Split,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub templates: Vec<ArticulatedTemplate>,
    /// Canonical order: instance-major, then action index.
    pub samples: Vec<KinematicSample>,
}

impl Dataset {
    pub fn j_max(&self) -> usize {
        self.config.spec.j_max()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &KinematicSample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn split_ids(&self, split: Split) -> Vec<usize> {
        self.split(split).map(|s| s.id).collect()
    }

    /// Ground-truth cloud of `instance` at `action`, normalized like the dataset.
    pub fn ground_truth<R: Rng + ?Sized>(
        &self,
        instance: usize,
        action: &[f64],
        n: usize,
        rng: &mut R,
        limits: LimitPolicy,
    ) -> Result<PointCloud> {
        let template = self
            .templates
            .get(instance)
            .ok_or_else(|| Error::invalid(format!("no instance {instance}")))?;
        template.posed_cloud(action, n, rng, self.config.colored, limits)
    }
}

/// Instances of a category, each from its own stream.
pub fn build_instances(spec: &CategorySpec, seed: u64) -> Result<Vec<ArticulatedTemplate>> {
    (0..spec.instances)
        .map(|k| build_instance(spec, &mut stream(seed, &[tag("instance"), k as u64])))
        .collect()
}

fn sup_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn draw_action(template: &ArticulatedTemplate, seed: u64, instance: usize, index: usize, attempt: u64) -> Vec<f64> {
    let mut rng = stream(seed, &[tag("action"), instance as u64, index as u64, attempt]);
    template
        .joints
        .iter()
        .map(|j| rng.gen_range(j.limit[0]..=j.limit[1]))
        .collect()
}

fn split_of(mode: SplitMode, instance: usize, index: usize) -> Split {
    let key = match mode {
        SplitMode::ByAction => index,
        SplitMode::ByInstance => instance,
    };
    if key % SPLIT_PERIOD == SPLIT_PERIOD - 1 {
        Split::Test
    } else {
        Split::Train
    }
}

/// Generates the full dataset. Each (instance, action) pair has its own RNG
/// streams, so the result is a pure function of the config.
pub fn generate_dataset(config: &DatasetConfig) -> Result<Dataset> {
    config.validate()?;
    let j_max = config.spec.j_max();
    let templates = build_instances(&config.spec, config.seed)?;
    let mut samples = Vec::with_capacity(templates.len() * config.samples_per_instance);
    for (k, template) in templates.iter().enumerate() {
        let splits: Vec<Split> = (0..config.samples_per_instance)
            .map(|i| split_of(config.split_mode, k, i))
            .collect();
        let mut actions: Vec<Vec<f64>> = (0..config.samples_per_instance)
            .map(|i| draw_action(template, config.seed, k, i, 0))
            .collect();
        // Redraw test actions that collide with a train action.
        for i in (0..actions.len()).filter(|&i| splits[i] == Split::Test) {
            let mut attempt = 0;
            while actions
                .iter()
                .zip(&splits)
                .any(|(b, &s)| s == Split::Train && sup_distance(&actions[i], b) < ACTION_SEPARATION)
            {
                attempt += 1;
                if attempt > MAX_REDRAWS {
                    return Err(Error::invalid("could not separate test actions from train actions"));
                }
                actions[i] = draw_action(template, config.seed, k, i, attempt);
            }
        }
        for (i, action) in actions.into_iter().enumerate() {
            let mut rng = stream(config.seed, &[tag("surface"), k as u64, i as u64]);
            let cloud = template.posed_cloud(&action, config.points, &mut rng, config.colored, LimitPolicy::Reject)?;
            samples.push(KinematicSample {
                id: samples.len(),
                instance: k,
                cloud,
                action: pad_action(&action, j_max)?,
                split: splits[i],
            });
        }
    }
    Ok(Dataset {
        config: config.clone(),
        templates,
        samples,
    })
}
