//! Joint flow-matching training of the encoders and both velocity fields.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, Tape, Tensor, Var};
use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::kinematics::{Dataset, Split};
use crate::nets::{FlowModel, ModelConfig};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{normal_tensor, stream, tag};

const ADVERSARY_PREFIX: &str = "adversary.";
const DEFAULT_ADVERSARY_HIDDEN: usize = 128;

/// Latent-flow wiring.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Latent flow conditioned on the action code.
    #[default]
    Cond,
    /// Latent flow ignores the action.
    Uncond,
    /// Unconditioned latent flow plus an adversary that strips action
    /// information from the shape code late in training.
    Adv,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Cond, Variant::Uncond, Variant::Adv];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Cond => "cond",
            Variant::Uncond => "uncond",
            Variant::Adv => "adv",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cond" | "cond-latent" => Ok(Variant::Cond),
            "uncond" | "uncond-latent" => Ok(Variant::Uncond),
            "adv" | "adv-latent" => Ok(Variant::Adv),
            _ => Err(Error::Config(format!("unknown variant {s:?} (expected cond, uncond or adv)"))),
        }
    }
}

/// Wires the latent flow and adversary of `model` for `variant`.
pub fn select_variant(variant: Variant, model: &mut ModelConfig) {
    model.latent_conditioned = variant == Variant::Cond;
    model.adversary_hidden = match variant {
        Variant::Adv => Some(model.adversary_hidden.unwrap_or(DEFAULT_ADVERSARY_HIDDEN)),
        _ => None,
    };
}

/// Which losses are optimized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Both flows with encoders, the full two-stage model.
    #[default]
    Joint,
    /// Point flow only, conditioned on time alone.
    PointOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight `λ` of the latent loss.
    pub latent_weight: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    /// Total steps `T`; also fixes the adversary schedule.
    pub steps: u64,
    pub variant: Variant,
    /// Fraction `ρ` of `T` after which the adversary is active.
    pub adversary_start: f64,
    /// Final gradient-reversal strength reached at step `T`.
    pub grl_max: f64,
    /// Detach the shape code used as the latent-flow target.
    pub stop_latent_gradient: bool,
    pub objective: Objective,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            latent_weight: 1.0,
            adam: AdamConfig::default(),
            batch_size: 16,
            steps: 20_000,
            variant: Variant::Cond,
            adversary_start: 0.5,
            grl_max: 1.0,
            stop_latent_gradient: false,
            objective: Objective::Joint,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // λ = 0 is allowed for the decoupling ablation.
        if !(self.latent_weight >= 0.0) {
            return Err(Error::Config("latent_weight must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.adversary_start) {
            return Err(Error::Config("adversary_start must lie in [0, 1)".into()));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        if !(self.grl_max >= 0.0) || !(self.adam.lr > 0.0) {
            return Err(Error::Config("grl_max must be >= 0 and lr > 0".into()));
        }
        Ok(())
    }

    pub fn adversary_active(&self, step: u64) -> bool {
        self.variant == Variant::Adv && step as f64 >= self.adversary_start * self.steps as f64
    }

    /// Gradient-reversal strength, ramping linearly from 0 at `ρ T` to
    /// `grl_max` at `T`.
    pub fn grl_strength(&self, step: u64) -> f64 {
        if !self.adversary_active(step) {
            return 0.0;
        }
        let start = self.adversary_start * self.steps as f64;
        let span = self.steps as f64 - start;
        self.grl_max * ((step as f64 - start) / span).clamp(0.0, 1.0)
    }
}

/// `t ~ Beta(2, 1)` by inverse CDF: `t = sqrt(u)`.
pub fn sample_time<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.gen::<f64>().sqrt()
}

/// `(X_t, u_t)` for one time: `X_t = (1 - t) X_0 + t X_1`, `u_t = X_1 - X_0`.
pub fn make_point_target(x0: &Tensor, x1: &Tensor, t: f64) -> Result<(Tensor, Tensor)> {
    make_point_target_batch(x0, x1, &[t])
}

/// Batched targets: rows are split into `times.len()` contiguous groups,
/// group `b` uses `times[b]`.
pub fn make_point_target_batch(x0: &Tensor, x1: &Tensor, times: &[f64]) -> Result<(Tensor, Tensor)> {
    if x0.shape() != x1.shape() || x0.rank() != 2 {
        return Err(Error::shape(
            "make_point_target",
            format!("{:?} vs {:?}", x0.shape(), x1.shape()),
        ));
    }
    if times.is_empty() || !x0.rows().is_multiple_of(times.len()) {
        return Err(Error::shape(
            "make_point_target",
            format!("{} rows for {} times", x0.rows(), times.len()),
        ));
    }
    let group = x0.rows() / times.len() * x0.cols();
    let mut xt = x0.clone();
    for (k, (v, (&a, &b))) in xt.data_mut().iter_mut().zip(x0.data().iter().zip(x1.data())).enumerate() {
        let t = times[k / group];
        *v = (1.0 - t) * a + t * b;
    }
    let ut = x1.zip_map(x0, |b, a| b - a)?;
    Ok((xt, ut))
}

/// `(y_t, v_t)` with `y_t = (1 - t) y_0 + t Z_x`, `v_t = Z_x - y_0`.
pub fn make_latent_target(y0: &[f64], z_x: &[f64], t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if y0.len() != z_x.len() {
        return Err(Error::shape(
            "make_latent_target",
            format!("{} vs {}", y0.len(), z_x.len()),
        ));
    }
    let yt = y0.iter().zip(z_x).map(|(a, b)| (1.0 - t) * a + t * b).collect();
    let vt = y0.iter().zip(z_x).map(|(a, b)| b - a).collect();
    Ok((yt, vt))
}

/// Mean squared error over every entry.
pub fn point_loss(u_pred: &Tensor, u_t: &Tensor) -> Result<f64> {
    if u_pred.shape() != u_t.shape() || u_pred.is_empty() {
        return Err(Error::shape(
            "point_loss",
            format!("{:?} vs {:?}", u_pred.shape(), u_t.shape()),
        ));
    }
    let s: f64 = u_pred.data().iter().zip(u_t.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / u_pred.len() as f64)
}

/// Equal-size clouds with their padded actions.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    clouds: Vec<PointCloud>,
    actions: Vec<Vec<f64>>,
}

impl TrainingSet {
    pub fn new(clouds: Vec<PointCloud>, actions: Vec<Vec<f64>>) -> Result<Self> {
        let first = clouds.first().ok_or_else(|| Error::invalid("training set is empty"))?;
        if clouds.len() != actions.len() {
            return Err(Error::invalid("one action per cloud required"));
        }
        if first.is_empty() || clouds.iter().any(|c| c.len() != first.len() || c.dim() != first.dim()) {
            return Err(Error::invalid("training clouds must be non-empty and share size and dimension"));
        }
        if actions.iter().any(|a| a.len() != actions[0].len()) {
            return Err(Error::invalid("training actions must share one length"));
        }
        Ok(Self { clouds, actions })
    }

    pub fn from_dataset(dataset: &Dataset, split: Split) -> Result<Self> {
        let (clouds, actions) = dataset
            .split(split)
            .map(|s| (s.cloud.clone(), s.action.clone()))
            .unzip();
        Self::new(clouds, actions)
    }

    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }

    pub fn points(&self) -> usize {
        self.clouds[0].len()
    }

    pub fn point_dim(&self) -> usize {
        self.clouds[0].dim()
    }

    pub fn action_dim(&self) -> usize {
        self.actions[0].len()
    }
}

/// Everything random about one step.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingBatch {
    pub indices: Vec<usize>,
    /// `[B * N, d]` data clouds.
    pub x1: Tensor,
    /// `[B, J]` padded actions.
    pub actions: Tensor,
    /// `[B * N, d]` standard-normal prior draw.
    pub x0: Tensor,
    /// `[B, D]` standard-normal latent prior draw.
    pub y0: Tensor,
    pub t_x: Vec<f64>,
    pub t_z: Vec<f64>,
}

impl TrainingBatch {
    pub fn batch_size(&self) -> usize {
        self.indices.len()
    }

    pub fn point_target(&self) -> Result<(Tensor, Tensor)> {
        make_point_target_batch(&self.x0, &self.x1, &self.t_x)
    }
}

/// Losses from one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub point_loss: f64,
    pub latent_loss: f64,
    pub adversary_loss: Option<f64>,
    pub grl_strength: f64,
}

/// Owns the model and optimizer state for a training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: FlowModel,
    pub config: TrainConfig,
    optimizer: Adam,
    adversary_optimizer: Option<Adam>,
    step: u64,
}

impl Trainer {
    pub fn new(model: FlowModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let wants_adversary = config.variant == Variant::Adv;
        if wants_adversary != model.adversary.is_some()
            || model.latent_net.conditioned != (config.variant == Variant::Cond)
        {
            return Err(Error::Config(format!(
                "model wiring does not match the {} variant; build it through select_variant",
                config.variant
            )));
        }
        let (adv, main): (Vec<ParamId>, Vec<ParamId>) = model
            .store
            .ids()
            .partition(|&id| model.store.get(id).name.starts_with(ADVERSARY_PREFIX));
        let optimizer = Adam::new(config.adam, &model.store, main);
        let adversary_optimizer = wants_adversary.then(|| Adam::new(config.adam, &model.store, adv));
        Ok(Self {
            model,
            config,
            optimizer,
            adversary_optimizer,
            step: 0,
        })
    }

    /// Next step index (also the number of completed steps).
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn optimizer(&self) -> &Adam {
        &self.optimizer
    }

    pub fn adversary_optimizer(&self) -> Option<&Adam> {
        self.adversary_optimizer.as_ref()
    }

    /// Reinstates optimizer state and step counter from a checkpoint.
    pub fn restore(&mut self, optimizer: Adam, adversary_optimizer: Option<Adam>, step: u64) -> Result<()> {
        if optimizer.params() != self.optimizer.params()
            || adversary_optimizer.as_ref().map(Adam::params) != self.adversary_optimizer.as_ref().map(Adam::params)
        {
            return Err(Error::Format("optimizer state does not match the model".into()));
        }
        self.optimizer = optimizer;
        self.adversary_optimizer = adversary_optimizer;
        self.step = step;
        Ok(())
    }

    fn check_data(&self, data: &TrainingSet) -> Result<()> {
        let m = &self.model;
        if data.point_dim() != m.point_dim() || data.action_dim() != m.action_dim() {
            return Err(Error::Config(format!(
                "data has d={} J={}, model expects d={} J={}",
                data.point_dim(),
                data.action_dim(),
                m.point_dim(),
                m.action_dim()
            )));
        }
        Ok(())
    }

    /// Draws the batch for the current step from its own RNG stream.
    pub fn sample_batch(&self, data: &TrainingSet) -> Result<TrainingBatch> {
        self.check_data(data)?;
        let mut rng = stream(self.config.seed, &[tag("step"), self.step]);
        let b = self.config.batch_size;
        let indices: Vec<usize> = (0..b).map(|_| rng.gen_range(0..data.len())).collect();
        let n = data.points();
        let d = data.point_dim();
        let mut x1 = Vec::with_capacity(b * n * d);
        let mut actions = Vec::with_capacity(b * data.action_dim());
        for &i in &indices {
            x1.extend_from_slice(data.clouds[i].data());
            actions.extend_from_slice(&data.actions[i]);
        }
        let x0 = normal_tensor(&mut rng, b * n, d);
        let y0 = normal_tensor(&mut rng, b, self.model.latent_dim());
        let t_x = (0..b).map(|_| sample_time(&mut rng)).collect();
        let t_z = (0..b).map(|_| sample_time(&mut rng)).collect();
        Ok(TrainingBatch {
            indices,
            x1: Tensor::matrix(b * n, d, x1)?,
            actions: Tensor::matrix(b, data.action_dim(), actions)?,
            x0,
            y0,
            t_x,
            t_z,
        })
    }

    pub fn train_step(&mut self, data: &TrainingSet) -> Result<StepRecord> {
        let batch = self.sample_batch(data)?;
        self.train_on_batch(&batch)
    }

    /// One optimizer step on `batch`; non-finite values abort with the step index.
    pub fn train_on_batch(&mut self, batch: &TrainingBatch) -> Result<StepRecord> {
        let step = self.step;
        let diverged = |e: Error| match e {
            Error::NonFinite { op } => Error::Diverged {
                step,
                what: op.to_string(),
            },
            other => other,
        };
        let mut tape = Tape::new();
        let (loss, parts) = self.build_loss(&mut tape, batch).map_err(diverged)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Diverged {
                step,
                what: "loss".into(),
            });
        }
        let grads = tape.backward(loss)?;
        self.model.store.zero_grads();
        grads.accumulate_into(&mut self.model.store);
        self.optimizer.step(&mut self.model.store);
        if let Some(adv) = self.adversary_optimizer.as_mut() {
            if parts.adversary.is_some() {
                adv.step(&mut self.model.store);
            }
        }
        self.step += 1;
        Ok(StepRecord {
            step,
            loss: parts.point + self.config.latent_weight * parts.latent,
            point_loss: parts.point,
            latent_loss: parts.latent,
            adversary_loss: parts.adversary,
            grl_strength: parts.grl,
        })
    }

    /// Runs until `self.config.steps` steps are complete.
    pub fn train(&mut self, data: &TrainingSet, mut on_step: impl FnMut(&StepRecord) -> Result<()>) -> Result<()> {
        while self.step < self.config.steps {
            let record = self.train_step(data)?;
            on_step(&record)?;
        }
        Ok(())
    }

    fn build_loss(&self, tape: &mut Tape, batch: &TrainingBatch) -> Result<(Var, LossParts)> {
        let m = &self.model;
        let cfg = &self.config;
        let b = batch.batch_size();
        let (xt, ut) = batch.point_target()?;
        let xt = tape.constant(xt);
        let ut = tape.constant(ut);

        if cfg.objective == Objective::PointOnly {
            let pred = m.point_net.velocity(tape, &m.store, xt, &batch.t_x, None, None)?;
            let l = tape.mse(pred, ut)?;
            let point = tape.value(l).item();
            return Ok((
                l,
                LossParts {
                    point,
                    latent: 0.0,
                    adversary: None,
                    grl: 0.0,
                },
            ));
        }

        let x1 = tape.constant(batch.x1.clone());
        let z_x = m.shape_encoder.forward(tape, &m.store, x1, b)?;
        let actions = tape.constant(batch.actions.clone());
        let z_a = m.action_encoder.forward(tape, &m.store, actions)?;

        let pred = m.point_net.velocity(tape, &m.store, xt, &batch.t_x, Some(z_x), Some(z_a))?;
        let l_point = tape.mse(pred, ut)?;

        let target = if cfg.stop_latent_gradient {
            let detached = tape.value(z_x).clone();
            tape.constant(detached)
        } else {
            z_x
        };
        let d = m.latent_dim();
        let t_rows = Tensor::from_fn(b, d, |r, _| batch.t_z[r]);
        let t_rows = tape.constant(t_rows);
        let y0_scaled = Tensor::from_fn(b, d, |r, c| (1.0 - batch.t_z[r]) * batch.y0.get(r, c));
        let y0_scaled = tape.constant(y0_scaled);
        let y0 = tape.constant(batch.y0.clone());
        let moved = tape.mul(target, t_rows)?;
        let yt = tape.add(y0_scaled, moved)?;
        let vt = tape.sub(target, y0)?;
        let latent_pred = m.latent_net.velocity(tape, &m.store, yt, &batch.t_z, Some(z_a))?;
        let l_latent = tape.mse(latent_pred, vt)?;

        let weighted = tape.scale(l_latent, cfg.latent_weight)?;
        let mut total = tape.add(l_point, weighted)?;

        let mut adversary = None;
        let grl = cfg.grl_strength(self.step);
        if cfg.adversary_active(self.step) {
            let head = m
                .adversary
                .as_ref()
                .ok_or_else(|| Error::invalid("adversarial step requires the adv variant"))?;
            let l_adv = adversarial_loss(tape, m, head, z_x, actions, grl)?;
            adversary = Some(tape.value(l_adv).item());
            total = tape.add(total, l_adv)?;
        }
        let parts = LossParts {
            point: tape.value(l_point).item(),
            latent: tape.value(l_latent).item(),
            adversary,
            grl,
        };
        Ok((total, parts))
    }
}

struct LossParts {
    point: f64,
    latent: f64,
    adversary: Option<f64>,
    grl: f64,
}

/// Adversary regression loss on the padded action. The head sees `Z_x` only
/// through gradient reversal, so it minimizes this loss while the encoder
/// receives the negated, scaled gradient.
pub fn adversarial_loss(
    tape: &mut Tape,
    model: &FlowModel,
    head: &crate::nets::Mlp,
    z_x: Var,
    actions: Var,
    strength: f64,
) -> Result<Var> {
    let reversed = tape.gradient_reversal(z_x, strength)?;
    let predicted = head.forward(tape, &model.store, reversed)?;
    tape.mse(predicted, actions)
}
