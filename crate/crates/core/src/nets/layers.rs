use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::Result;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)` for weights and biases.
    Uniform,
    Zeros,
}

/// Affine map `x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        seed: u64,
    ) -> Self {
        let (weight, bias) = match init {
            Init::Zeros => (
                Tensor::zeros(&[in_dim, out_dim]),
                Tensor::zeros(&[1, out_dim]),
            ),
            Init::Uniform => {
                let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
                let mut r = rng::stream(seed, &[rng::tag(name)]);
                let w = Tensor::from_fn(in_dim, out_dim, |_, _| r.gen_range(-bound..bound));
                let b = Tensor::from_fn(1, out_dim, |_, _| r.gen_range(-bound..bound));
                (w, b)
            }
        };
        Self {
            weight: store.add(format!("{name}.weight"), weight),
            bias: store.add(format!("{name}.bias"), bias),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let h = tape.matmul(x, w)?;
        tape.broadcast_add(h, b)
    }

    /// Sets the bias to a constant, e.g. 1 for FiLM scales.
    pub fn set_bias(&self, store: &mut ParamStore, value: f64) {
        store.get_mut(self.bias).value.fill(value);
    }
}

/// Feature-wise modulation `h * scale(c) + shift(c)`.
///
/// `h` holds `groups * r` rows and `c` one row per group; each row of the
/// condition modulates its own block of `h`.
#[derive(Clone, Debug)]
pub struct Film {
    pub scale: Linear,
    pub shift: Linear,
}

impl Film {
    pub fn new(store: &mut ParamStore, name: &str, cond_dim: usize, features: usize, seed: u64) -> Self {
        let scale = Linear::new(store, &format!("{name}.scale"), cond_dim, features, Init::Uniform, seed);
        scale.set_bias(store, 1.0);
        let shift = Linear::new(store, &format!("{name}.shift"), cond_dim, features, Init::Uniform, seed);
        Self { scale, shift }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, h: Var, cond: Var) -> Result<Var> {
        let gamma = self.scale.forward(tape, store, cond)?;
        let beta = self.shift.forward(tape, store, cond)?;
        let h = tape.broadcast_mul(h, gamma)?;
        tape.broadcast_add(h, beta)
    }

    /// Makes the layer an exact identity: scale 1, shift 0 for every condition.
    pub fn make_identity(&self, store: &mut ParamStore) {
        for lin in [&self.scale, &self.shift] {
            store.get_mut(lin.weight).value.fill(0.0);
        }
        self.scale.set_bias(store, 1.0);
        self.shift.set_bias(store, 0.0);
    }
}

/// SiLU multilayer perceptron; no activation after the last layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        last_init: Init,
        seed: u64,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = in_dim;
        for (i, &w) in hidden.iter().enumerate() {
            layers.push(Linear::new(store, &format!("{name}.{i}"), prev, w, Init::Uniform, seed));
            prev = w;
        }
        layers.push(Linear::new(
            store,
            &format!("{name}.{}", hidden.len()),
            prev,
            out_dim,
            last_init,
            seed,
        ));
        Self { layers }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h)?;
            if i != last {
                h = tape.silu(h)?;
            }
        }
        Ok(h)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }
}
