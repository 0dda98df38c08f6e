//! Fixed-step ODE integration and the generation pipelines built on it.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::nets::FlowModel;
use crate::rng::normal_tensor;

/// Angle below which slerp falls back to linear interpolation.
pub const SLERP_MIN_ANGLE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    #[default]
    Heun,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Euler => "euler",
            Method::Heun => "heun",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Method::Euler),
            "heun" => Ok(Method::Heun),
            _ => Err(Error::Config(format!("unknown integrator {s:?} (expected euler or heun)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegratorConfig {
    pub method: Method,
    pub latent_steps: usize,
    pub point_steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            method: Method::Heun,
            latent_steps: 50,
            point_steps: 100,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_steps == 0 || self.point_steps == 0 {
            return Err(Error::Config("integration step counts must be at least 1".into()));
        }
        Ok(())
    }
}

fn check_finite(x: &Tensor, step: usize) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::IntegrationDiverged { step })
    }
}

fn axpy(x: &mut Tensor, h: f64, k: &Tensor) -> Result<()> {
    if x.shape() != k.shape() {
        return Err(Error::shape(
            "integrate",
            format!("state {:?} vs velocity {:?}", x.shape(), k.shape()),
        ));
    }
    for (a, b) in x.data_mut().iter_mut().zip(k.data()) {
        *a += h * b;
    }
    Ok(())
}

/// Explicit Euler from `t = 0` to `t = 1` in `steps` equal steps.
pub fn euler_integrate<F>(mut field: F, x0: Tensor, steps: usize) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    if steps == 0 {
        return Err(Error::invalid("need at least one integration step"));
    }
    let h = 1.0 / steps as f64;
    let mut x = x0;
    for k in 0..steps {
        let t = k as f64 * h;
        let v = field(&x, t)?;
        axpy(&mut x, h, &v)?;
        check_finite(&x, k)?;
    }
    Ok(x)
}

/// Heun's method (explicit trapezoid): predictor `x + h k1`, corrector
/// `x + h/2 (k1 + k2)`.
pub fn heun_integrate<F>(mut field: F, x0: Tensor, steps: usize) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    if steps == 0 {
        return Err(Error::invalid("need at least one integration step"));
    }
    let h = 1.0 / steps as f64;
    let mut x = x0;
    for k in 0..steps {
        let t = k as f64 * h;
        let k1 = field(&x, t)?;
        let mut predictor = x.clone();
        axpy(&mut predictor, h, &k1)?;
        let k2 = field(&predictor, t + h)?;
        if k2.shape() != x.shape() {
            return Err(Error::shape("integrate", "velocity shape changed"));
        }
        for ((a, b), c) in x.data_mut().iter_mut().zip(k1.data()).zip(k2.data()) {
            *a += (h / 2.0) * (b + c);
        }
        check_finite(&x, k)?;
    }
    Ok(x)
}

pub fn integrate<F>(method: Method, field: F, x0: Tensor, steps: usize) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    match method {
        Method::Euler => euler_integrate(field, x0, steps),
        Method::Heun => heun_integrate(field, x0, steps),
    }
}

/// Spherical interpolation between raw latents using the angle of their
/// directions; nearly parallel inputs are interpolated linearly.
pub fn slerp(z0: &[f64], z1: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if z0.len() != z1.len() {
        return Err(Error::shape("slerp", format!("{} vs {}", z0.len(), z1.len())));
    }
    let n0 = z0.iter().map(|v| v * v).sum::<f64>().sqrt();
    let n1 = z1.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n0 == 0.0 || n1 == 0.0 {
        return Err(Error::invalid("slerp endpoints must be nonzero"));
    }
    let cos = (z0.iter().zip(z1).map(|(a, b)| a * b).sum::<f64>() / (n0 * n1)).clamp(-1.0, 1.0);
    let phi = cos.acos();
    if phi < SLERP_MIN_ANGLE {
        // Written as an offset from z0 so identical endpoints give z0 exactly.
        return Ok(z0.iter().zip(z1).map(|(a, b)| a + alpha * (b - a)).collect());
    }
    if alpha == 0.0 {
        return Ok(z0.to_vec());
    }
    if alpha == 1.0 {
        return Ok(z1.to_vec());
    }
    let s = phi.sin();
    let w0 = ((1.0 - alpha) * phi).sin() / s;
    let w1 = (alpha * phi).sin() / s;
    Ok(z0.iter().zip(z1).map(|(a, b)| w0 * a + w1 * b).collect())
}

/// Generation with a trained model.
#[derive(Clone, Copy, Debug)]
pub struct Sampler<'a> {
    pub model: &'a FlowModel,
    pub config: IntegratorConfig,
}

impl<'a> Sampler<'a> {
    pub fn new(model: &'a FlowModel, config: IntegratorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { model, config })
    }

    fn action_codes(&self, actions: &[Vec<f64>]) -> Result<Tensor> {
        let j = self.model.action_dim();
        if actions.is_empty() {
            return Err(Error::invalid("no actions given"));
        }
        if let Some(a) = actions.iter().find(|a| a.len() != j) {
            return Err(Error::invalid(format!(
                "action has length {}, model expects {j}",
                a.len()
            )));
        }
        let flat = actions.iter().flatten().copied().collect();
        self.model.action_codes(&Tensor::matrix(actions.len(), j, flat)?)
    }

    /// Shape codes from the latent flow, one per action.
    pub fn sample_latents<R: Rng + ?Sized>(&self, actions: &[Vec<f64>], rng: &mut R) -> Result<Tensor> {
        let z_a = self.action_codes(actions)?;
        let y0 = normal_tensor(rng, actions.len(), self.model.latent_dim());
        self.integrate_latent(y0, &z_a)
    }

    fn integrate_latent(&self, y0: Tensor, z_a: &Tensor) -> Result<Tensor> {
        let m = self.model;
        integrate(
            self.config.method,
            |y, t| m.latent_field(y, t, Some(z_a)),
            y0,
            self.config.latent_steps,
        )
    }

    /// Decodes clouds of `points` points from given shape codes `[B, D]`.
    pub fn decode<R: Rng + ?Sized>(
        &self,
        z_x: &Tensor,
        actions: &[Vec<f64>],
        points: usize,
        rng: &mut R,
    ) -> Result<Vec<PointCloud>> {
        let z_a = self.action_codes(actions)?;
        if z_x.rank() != 2 || z_x.rows() != actions.len() || z_x.cols() != self.model.latent_dim() {
            return Err(Error::shape(
                "decode",
                format!("shape codes {:?} for {} actions", z_x.shape(), actions.len()),
            ));
        }
        if points == 0 {
            return Err(Error::invalid("need at least one point"));
        }
        let d = self.model.point_dim();
        let x0 = normal_tensor(rng, actions.len() * points, d);
        let m = self.model;
        let x1 = integrate(
            self.config.method,
            |x, t| m.point_field(x, t, Some(z_x), Some(&z_a)),
            x0,
            self.config.point_steps,
        )?;
        Ok(x1
            .data()
            .chunks(points * d)
            .map(|c| PointCloud::new(d, c.to_vec()).expect("exact chunking"))
            .collect())
    }

    /// Full generation: latent ODE, then point ODE.
    pub fn sample<R: Rng + ?Sized>(&self, action: &[f64], points: usize, rng: &mut R) -> Result<PointCloud> {
        let actions = [action.to_vec()];
        let z_x = self.sample_latents(&actions, rng)?;
        Ok(self.decode(&z_x, &actions, points, rng)?.remove(0))
    }

    /// Like [`Self::sample`] with the shape code given.
    pub fn sample_with_latent<R: Rng + ?Sized>(
        &self,
        z_x: &[f64],
        action: &[f64],
        points: usize,
        rng: &mut R,
    ) -> Result<PointCloud> {
        let z = Tensor::matrix(1, z_x.len(), z_x.to_vec())?;
        Ok(self.decode(&z, &[action.to_vec()], points, rng)?.remove(0))
    }

    /// Neural-simulator mode: the shape code comes from encoding `reference`.
    pub fn simulate<R: Rng + ?Sized>(
        &self,
        reference: &PointCloud,
        action: &[f64],
        points: usize,
        rng: &mut R,
    ) -> Result<PointCloud> {
        Ok(self.simulate_batch(&[reference], &[action.to_vec()], points, rng)?.remove(0))
    }

    /// Simulator mode for several (reference, action) pairs in one batch.
    pub fn simulate_batch<R: Rng + ?Sized>(
        &self,
        references: &[&PointCloud],
        actions: &[Vec<f64>],
        points: usize,
        rng: &mut R,
    ) -> Result<Vec<PointCloud>> {
        if references.len() != actions.len() {
            return Err(Error::invalid("one reference cloud per action required"));
        }
        if let Some(r) = references.iter().find(|r| r.dim() != self.model.point_dim()) {
            return Err(Error::Config(format!(
                "reference has d={}, model expects d={}",
                r.dim(),
                self.model.point_dim()
            )));
        }
        let z_x = self.model.shape_codes(references)?;
        self.decode(&z_x, actions, points, rng)
    }
}
