use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nets::encoders::TimeEmbedding;
use crate::nets::layers::{Film, Init, Linear};

/// How the shape and action codes are merged before the time embedding is added.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConditionMode {
    /// `Z_x + Z_a + e_t`.
    Add,
    /// `W [Z_x, Z_a] + b + e_t`.
    ConcatProject,
}

/// Hidden stack shared by both velocity networks: Linear, FiLM, SiLU per layer,
/// then a zero-initialized output projection.
#[derive(Clone, Debug)]
struct FilmStack {
    layers: Vec<(Linear, Film)>,
    out: Linear,
}

impl FilmStack {
    fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        cond_dim: usize,
        seed: u64,
    ) -> Self {
        let mut layers = Vec::new();
        let mut prev = in_dim;
        for (i, &w) in hidden.iter().enumerate() {
            let lin = Linear::new(store, &format!("{name}.layer{i}"), prev, w, Init::Uniform, seed);
            let film = Film::new(store, &format!("{name}.film{i}"), cond_dim, w, seed);
            layers.push((lin, film));
            prev = w;
        }
        let out = Linear::new(store, &format!("{name}.out"), prev, out_dim, Init::Zeros, seed);
        Self { layers, out }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, cond: Var, film: bool) -> Result<Var> {
        let mut h = x;
        for (lin, f) in &self.layers {
            h = lin.forward(tape, store, h)?;
            if film {
                h = f.forward(tape, store, h, cond)?;
            }
            h = tape.silu(h)?;
        }
        self.out.forward(tape, store, h)
    }
}

fn check_cols(tape: &Tape, op: &'static str, v: Var, cols: usize) -> Result<()> {
    let s = tape.shape(v);
    if s.len() != 2 || s[1] != cols {
        return Err(Error::shape(op, format!("expected [*, {cols}], got {s:?}")));
    }
    Ok(())
}

/// Per-point velocity field `u(X_t, t | Z_x, Z_a)` with shared weights across points.
#[derive(Clone, Debug)]
pub struct PointVelocityNet {
    pub point_dim: usize,
    pub latent_dim: usize,
    pub condition_mode: ConditionMode,
    pub film_enabled: bool,
    time: TimeEmbedding,
    concat_proj: Option<Linear>,
    stack: FilmStack,
}

impl PointVelocityNet {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        point_dim: usize,
        latent_dim: usize,
        hidden: &[usize],
        time_features: usize,
        condition_mode: ConditionMode,
        seed: u64,
    ) -> Self {
        let time = TimeEmbedding::new(store, "point_flow.time", time_features, latent_dim, seed);
        let concat_proj = (condition_mode == ConditionMode::ConcatProject).then(|| {
            Linear::new(store, "point_flow.concat", 2 * latent_dim, latent_dim, Init::Uniform, seed)
        });
        let stack = FilmStack::new(store, "point_flow", point_dim, hidden, point_dim, latent_dim, seed);
        Self {
            point_dim,
            latent_dim,
            condition_mode,
            film_enabled: true,
            time,
            concat_proj,
            stack,
        }
    }

    /// Condition code `c` for a batch: absent codes are omitted from the sum.
    pub fn condition(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z_x: Option<Var>,
        z_a: Option<Var>,
        times: &[f64],
    ) -> Result<Var> {
        for z in [z_x, z_a].into_iter().flatten() {
            check_cols(tape, "condition_code", z, self.latent_dim)?;
            if tape.shape(z)[0] != times.len() {
                return Err(Error::shape(
                    "condition_code",
                    format!("{} codes for {} times", tape.shape(z)[0], times.len()),
                ));
            }
        }
        let e_t = self.time.forward(tape, store, times)?;
        let codes = match (self.condition_mode, z_x, z_a) {
            (_, None, None) => None,
            (ConditionMode::Add, Some(a), None) | (ConditionMode::Add, None, Some(a)) => Some(a),
            (ConditionMode::Add, Some(x), Some(a)) => Some(tape.add(x, a)?),
            (ConditionMode::ConcatProject, x, a) => {
                let b = times.len();
                let zeros = || crate::autodiff::Tensor::zeros(&[b, self.latent_dim]);
                let x = x.unwrap_or_else(|| tape.constant(zeros()));
                let a = a.unwrap_or_else(|| tape.constant(zeros()));
                let joined = tape.concat(&[x, a], 1)?;
                let proj = self.concat_proj.as_ref().expect("built for concat mode");
                Some(proj.forward(tape, store, joined)?)
            }
        };
        match codes {
            Some(c) => tape.add(c, e_t),
            None => Ok(e_t),
        }
    }

    /// `x_t: [batch * n, d]`, `cond: [batch, D]` to per-point velocities.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x_t: Var, cond: Var) -> Result<Var> {
        check_cols(tape, "point_velocity", x_t, self.point_dim)?;
        check_cols(tape, "point_velocity", cond, self.latent_dim)?;
        self.stack.forward(tape, store, x_t, cond, self.film_enabled)
    }

    pub fn velocity(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x_t: Var,
        times: &[f64],
        z_x: Option<Var>,
        z_a: Option<Var>,
    ) -> Result<Var> {
        let c = self.condition(tape, store, z_x, z_a, times)?;
        self.forward(tape, store, x_t, c)
    }

    pub fn films(&self) -> impl Iterator<Item = &Film> {
        self.stack.layers.iter().map(|(_, f)| f)
    }
}

/// Latent velocity field `v(y_t, t | Z_a)`; the action code is wired only when
/// `conditioned` is set.
#[derive(Clone, Debug)]
pub struct LatentVelocityNet {
    pub latent_dim: usize,
    pub conditioned: bool,
    pub film_enabled: bool,
    time: TimeEmbedding,
    stack: FilmStack,
}

impl LatentVelocityNet {
    pub fn new(
        store: &mut ParamStore,
        latent_dim: usize,
        hidden: &[usize],
        time_features: usize,
        conditioned: bool,
        seed: u64,
    ) -> Self {
        let time = TimeEmbedding::new(store, "latent_flow.time", time_features, latent_dim, seed);
        let stack = FilmStack::new(store, "latent_flow", latent_dim, hidden, latent_dim, latent_dim, seed);
        Self {
            latent_dim,
            conditioned,
            film_enabled: true,
            time,
            stack,
        }
    }

    /// `Z_a + e_t` when conditioned, `e_t` otherwise.
    pub fn condition(&self, tape: &mut Tape, store: &ParamStore, z_a: Option<Var>, times: &[f64]) -> Result<Var> {
        let e_t = self.time.forward(tape, store, times)?;
        match (self.conditioned, z_a) {
            (true, Some(a)) => {
                check_cols(tape, "latent_velocity", a, self.latent_dim)?;
                tape.add(a, e_t)
            }
            (true, None) => Err(Error::invalid("conditioned latent flow needs an action code")),
            (false, _) => Ok(e_t),
        }
    }

    pub fn velocity(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        y_t: Var,
        times: &[f64],
        z_a: Option<Var>,
    ) -> Result<Var> {
        check_cols(tape, "latent_velocity", y_t, self.latent_dim)?;
        let c = self.condition(tape, store, z_a, times)?;
        self.stack.forward(tape, store, y_t, c, self.film_enabled)
    }

    pub fn films(&self) -> impl Iterator<Item = &Film> {
        self.stack.layers.iter().map(|(_, f)| f)
    }
}
