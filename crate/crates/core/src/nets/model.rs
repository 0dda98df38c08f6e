use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Tensor};
use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::nets::encoders::{ActionEncoder, ShapeEncoder};
use crate::nets::layers::{Init, Mlp};
use crate::nets::velocity::{ConditionMode, LatentVelocityNet, PointVelocityNet};

/// Sizes and wiring of every network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Channels per point: 3 (xyz) or 6 (xyz + rgb).
    pub point_dim: usize,
    /// Padded action length `J`.
    pub action_dim: usize,
    /// Shared dimension `D` of shape code, action code and time embedding.
    pub latent_dim: usize,
    pub point_hidden: Vec<usize>,
    pub latent_hidden: Vec<usize>,
    pub encoder_hidden: Vec<usize>,
    pub action_hidden: usize,
    pub fourier_features: usize,
    pub fourier_sigma: f64,
    pub fourier_seed: u64,
    pub time_features: usize,
    pub condition_mode: ConditionMode,
    /// Whether the latent flow sees the action code.
    pub latent_conditioned: bool,
    /// Hidden width of the adversary head; `None` disables it.
    pub adversary_hidden: Option<usize>,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            point_dim: 3,
            action_dim: 1,
            latent_dim: 64,
            point_hidden: vec![256; 4],
            latent_hidden: vec![256; 3],
            encoder_hidden: vec![64, 128, 256],
            action_hidden: 256,
            fourier_features: 32,
            fourier_sigma: 1.0,
            fourier_seed: 17,
            time_features: 32,
            condition_mode: ConditionMode::Add,
            latent_conditioned: true,
            adversary_hidden: None,
            init_seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.point_dim != 3 && self.point_dim != 6 {
            return Err(Error::Config(format!("point_dim must be 3 or 6, got {}", self.point_dim)));
        }
        if self.action_dim == 0 || self.latent_dim == 0 {
            return Err(Error::Config("action_dim and latent_dim must be positive".into()));
        }
        if self.point_hidden.is_empty() || self.latent_hidden.is_empty() {
            return Err(Error::Config("velocity networks need at least one hidden layer".into()));
        }
        if self.fourier_features == 0 || self.time_features < 2 {
            return Err(Error::Config("fourier_features >= 1 and time_features >= 2 required".into()));
        }
        Ok(())
    }
}

/// Every learned component plus the parameter store they share.
#[derive(Clone, Debug)]
pub struct FlowModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub shape_encoder: ShapeEncoder,
    pub action_encoder: ActionEncoder,
    pub point_net: PointVelocityNet,
    pub latent_net: LatentVelocityNet,
    /// Predicts the action from the shape code (adversarial variant only).
    pub adversary: Option<Mlp>,
}

impl FlowModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let seed = c.init_seed;
        let mut store = ParamStore::new();
        let shape_encoder = ShapeEncoder::new(&mut store, c.point_dim, &c.encoder_hidden, c.latent_dim, seed);
        let action_encoder = ActionEncoder::new(
            &mut store,
            c.action_dim,
            c.fourier_features,
            c.fourier_sigma,
            c.fourier_seed,
            c.action_hidden,
            c.latent_dim,
            seed,
        );
        let point_net = PointVelocityNet::new(
            &mut store,
            c.point_dim,
            c.latent_dim,
            &c.point_hidden,
            c.time_features,
            c.condition_mode,
            seed,
        );
        let latent_net = LatentVelocityNet::new(
            &mut store,
            c.latent_dim,
            &c.latent_hidden,
            c.time_features,
            c.latent_conditioned,
            seed,
        );
        let adversary = c.adversary_hidden.map(|h| {
            Mlp::new(&mut store, "adversary", c.latent_dim, &[h], c.action_dim, Init::Uniform, seed)
        });
        Ok(Self {
            config,
            store,
            shape_encoder,
            action_encoder,
            point_net,
            latent_net,
            adversary,
        })
    }

    pub fn point_dim(&self) -> usize {
        self.config.point_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn action_dim(&self) -> usize {
        self.config.action_dim
    }

    /// Shape codes `[batch, D]` for equal-size clouds.
    pub fn shape_codes(&self, clouds: &[&PointCloud]) -> Result<Tensor> {
        let first = clouds.first().ok_or_else(|| Error::invalid("no clouds to encode"))?;
        if first.is_empty() {
            return Err(Error::invalid("cannot encode an empty point cloud"));
        }
        if clouds.iter().any(|c| c.len() != first.len() || c.dim() != first.dim()) {
            return Err(Error::invalid("clouds in a batch must share size and dimension"));
        }
        let data: Vec<f64> = clouds.iter().flat_map(|c| c.data().iter().copied()).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(clouds.len() * first.len(), first.dim(), data)?);
        let z = self.shape_encoder.forward(&mut tape, &self.store, x, clouds.len())?;
        Ok(tape.value(z).clone())
    }

    pub fn shape_code(&self, cloud: &PointCloud) -> Result<Vec<f64>> {
        Ok(self.shape_codes(&[cloud])?.into_data())
    }

    /// Action codes `[batch, D]` for `actions: [batch, J]`.
    pub fn action_codes(&self, actions: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let a = tape.constant(actions.clone());
        let z = self.action_encoder.forward(&mut tape, &self.store, a)?;
        Ok(tape.value(z).clone())
    }

    pub fn action_code(&self, action: &[f64]) -> Result<Vec<f64>> {
        if action.len() != self.action_dim() {
            return Err(Error::invalid(format!(
                "action has length {}, model expects {}",
                action.len(),
                self.action_dim()
            )));
        }
        Ok(self
            .action_codes(&Tensor::matrix(1, action.len(), action.to_vec())?)?
            .into_data())
    }

    /// Evaluates the point field at one time for `x: [batch * n, d]`.
    pub fn point_field(&self, x: &Tensor, t: f64, z_x: Option<&Tensor>, z_a: Option<&Tensor>) -> Result<Tensor> {
        let batch = z_x.or(z_a).map_or(1, Tensor::rows);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let zx = z_x.map(|z| tape.constant(z.clone()));
        let za = z_a.map(|z| tape.constant(z.clone()));
        let times = vec![t; batch];
        let v = self.point_net.velocity(&mut tape, &self.store, xv, &times, zx, za)?;
        Ok(tape.value(v).clone())
    }

    /// Evaluates the latent field at one time for `y: [batch, D]`.
    pub fn latent_field(&self, y: &Tensor, t: f64, z_a: Option<&Tensor>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let yv = tape.constant(y.clone());
        let za = z_a.map(|z| tape.constant(z.clone()));
        let times = vec![t; y.rows()];
        let v = self.latent_net.velocity(&mut tape, &self.store, yv, &times, za)?;
        Ok(tape.value(v).clone())
    }
}
