use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nets::layers::{Init, Linear, Mlp};
use crate::rng;

/// PointNet-style encoder: shared per-point MLP followed by a max over points.
#[derive(Clone, Debug)]
pub struct ShapeEncoder {
    pub point_dim: usize,
    pub latent_dim: usize,
    per_point: Vec<Linear>,
    proj: Linear,
}

impl ShapeEncoder {
    pub fn new(store: &mut ParamStore, point_dim: usize, hidden: &[usize], latent_dim: usize, seed: u64) -> Self {
        let mut per_point = Vec::new();
        let mut prev = point_dim;
        for (i, &w) in hidden.iter().enumerate() {
            per_point.push(Linear::new(
                store,
                &format!("shape_encoder.point{i}"),
                prev,
                w,
                Init::Uniform,
                seed,
            ));
            prev = w;
        }
        let proj = Linear::new(store, "shape_encoder.proj", prev, latent_dim, Init::Uniform, seed);
        Self {
            point_dim,
            latent_dim,
            per_point,
            proj,
        }
    }

    /// `points: [batch * n, d]` (clouds stored contiguously) to `[batch, D]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, points: Var, batch: usize) -> Result<Var> {
        let shape = tape.shape(points).to_vec();
        if shape.len() != 2 || shape[1] != self.point_dim {
            return Err(Error::shape(
                "encode_shape",
                format!("expected [*, {}], got {:?}", self.point_dim, shape),
            ));
        }
        if shape[0] == 0 || batch == 0 || !shape[0].is_multiple_of(batch) {
            return Err(Error::invalid(format!(
                "encode_shape needs a nonempty cloud per batch item ({} rows, batch {batch})",
                shape[0]
            )));
        }
        let mut h = points;
        for layer in &self.per_point {
            h = layer.forward(tape, store, h)?;
            h = tape.silu(h)?;
        }
        let pooled = tape.max_pool_grouped(h, 0, batch)?;
        self.proj.forward(tape, store, pooled)
    }
}

/// Random Fourier lift of the joint angles followed by an MLP.
#[derive(Clone, Debug)]
pub struct ActionEncoder {
    pub action_dim: usize,
    pub latent_dim: usize,
    pub sigma: f64,
    pub seed: u64,
    /// `[J, F]` frequencies, drawn once from `N(0, sigma^2)` and frozen.
    frequencies: Tensor,
    /// Block-diagonal `[J, J * F]` matrix holding `2 pi B_jk` in row `j`.
    lift: Tensor,
    mlp: Mlp,
}

impl ActionEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        action_dim: usize,
        features_per_joint: usize,
        sigma: f64,
        fourier_seed: u64,
        hidden: usize,
        latent_dim: usize,
        seed: u64,
    ) -> Self {
        let mut r = rng::stream(fourier_seed, &[rng::tag("fourier")]);
        let frequencies = Tensor::from_fn(action_dim, features_per_joint, |_, _| {
            sigma * r.sample::<f64, _>(StandardNormal)
        });
        let f = features_per_joint;
        let lift = Tensor::from_fn(action_dim, action_dim * f, |j, col| {
            if col / f == j {
                2.0 * std::f64::consts::PI * frequencies.get(j, col % f)
            } else {
                0.0
            }
        });
        let mlp = Mlp::new(
            store,
            "action_encoder.mlp",
            2 * action_dim * f,
            &[hidden],
            latent_dim,
            Init::Uniform,
            seed,
        );
        Self {
            action_dim,
            latent_dim,
            sigma,
            seed: fourier_seed,
            frequencies,
            lift,
            mlp,
        }
    }

    pub fn frequencies(&self) -> &Tensor {
        &self.frequencies
    }

    /// `[sin(2 pi B a), cos(2 pi B a)]` per row of `actions: [batch, J]`.
    pub fn fourier_features(&self, tape: &mut Tape, actions: Var) -> Result<Var> {
        let shape = tape.shape(actions).to_vec();
        if shape.len() != 2 || shape[1] != self.action_dim {
            return Err(Error::shape(
                "encode_action",
                format!("expected [*, {}], got {:?}", self.action_dim, shape),
            ));
        }
        let lift = tape.constant(self.lift.clone());
        let arg = tape.matmul(actions, lift)?;
        let s = tape.sin(arg)?;
        let c = tape.cos(arg)?;
        tape.concat(&[s, c], 1)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, actions: Var) -> Result<Var> {
        let features = self.fourier_features(tape, actions)?;
        self.mlp.forward(tape, store, features)
    }
}

/// Sinusoidal features of `t` at geometric frequencies, projected to `D`.
#[derive(Clone, Debug)]
pub struct TimeEmbedding {
    pub latent_dim: usize,
    frequencies: Vec<f64>,
    proj: Linear,
}

/// Frequencies span `[1, TIME_MAX_FREQUENCY]` rad per unit time.
pub const TIME_MAX_FREQUENCY: f64 = 100.0;

impl TimeEmbedding {
    pub fn new(store: &mut ParamStore, name: &str, features: usize, latent_dim: usize, seed: u64) -> Self {
        let half = (features / 2).max(1);
        let frequencies = (0..half)
            .map(|k| {
                if half == 1 {
                    1.0
                } else {
                    TIME_MAX_FREQUENCY.powf(k as f64 / (half - 1) as f64)
                }
            })
            .collect();
        let proj = Linear::new(store, &format!("{name}.proj"), 2 * half, latent_dim, Init::Uniform, seed);
        Self {
            latent_dim,
            frequencies,
            proj,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, times: &[f64]) -> Result<Var> {
        let t = tape.constant(Tensor::matrix(times.len(), 1, times.to_vec())?);
        let w = tape.constant(Tensor::matrix(1, self.frequencies.len(), self.frequencies.clone())?);
        let arg = tape.matmul(t, w)?;
        let s = tape.sin(arg)?;
        let c = tape.cos(arg)?;
        let features = tape.concat(&[s, c], 1)?;
        self.proj.forward(tape, store, features)
    }
}

/// Per-batch-item action tensor from equal-length action vectors.
pub fn action_batch(actions: &[&[f64]]) -> Result<Tensor> {
    let j = actions.first().map_or(0, |a| a.len());
    if actions.iter().any(|a| a.len() != j) {
        return Err(Error::invalid("actions in a batch must have equal length"));
    }
    Tensor::matrix(actions.len(), j, actions.concat())
}
