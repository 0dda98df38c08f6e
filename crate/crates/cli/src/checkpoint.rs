//! Binary checkpoint holding parameters, optimizer moments, the training step
//! and a JSON snapshot of the configs.
//!
//! Layout (little-endian): magic, `u32` version, `u64`-prefixed JSON header,
//! `u64` step, the named parameter tensors, then the main and optional
//! adversary optimizer states.

use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use flowkin::autodiff::Tensor;
use flowkin::nets::{FlowModel, ModelConfig};
use flowkin::optim::Adam;
use flowkin::train::{TrainConfig, Trainer};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const MAGIC: &[u8; 8] = b"FLOWKIN\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub run: RunConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub steps: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl OptimizerState {
    fn of(adam: &Adam) -> Self {
        let (first, second, steps) = adam.state();
        Self {
            steps,
            first: first.to_vec(),
            second: second.to_vec(),
        }
    }

    fn apply(&self, adam: &Adam) -> Result<Adam> {
        let mut adam = adam.clone();
        adam.restore(self.first.clone(), self.second.clone(), self.steps)?;
        Ok(adam)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub step: u64,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: OptimizerState,
    pub adversary_optimizer: Option<OptimizerState>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }

    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn tensors(&mut self, ts: &[Tensor]) {
        self.u32(ts.len() as u32);
        for t in ts {
            self.tensor(t);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        ensure!(self.buf.len() - self.pos >= n, "checkpoint is truncated at byte {}", self.pos);
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into()?))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        ensure!(n as usize as u64 == n && n as usize <= self.buf.len(), "implausible length {n}");
        Ok(n as usize)
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len()?;
        self.take(n)
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        ensure!(rank <= 8, "implausible tensor rank {rank}");
        let shape = (0..rank).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(8).context("tensor too large")?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Tensor::new(shape, data)?)
    }

    fn tensors(&mut self) -> Result<Vec<Tensor>> {
        let n = self.u32()?;
        (0..n).map(|_| self.tensor()).collect()
    }
}

impl Checkpoint {
    /// Snapshot of `trainer`. Paths are dropped from the stored config so
    /// the file does not depend on where the run lives.
    pub fn of(trainer: &Trainer, run: &RunConfig) -> Self {
        let model = &trainer.model;
        let run = RunConfig {
            paths: Default::default(),
            ..run.clone()
        };
        Self {
            header: Header {
                run,
                model: model.config.clone(),
                train: trainer.config.clone(),
            },
            step: trainer.step(),
            params: model.store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect(),
            optimizer: OptimizerState::of(trainer.optimizer()),
            adversary_optimizer: trainer.adversary_optimizer().map(OptimizerState::of),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.bytes(&serde_json::to_vec(&self.header).expect("header serializes"));
        w.u64(self.step);
        w.u32(self.params.len() as u32);
        for (name, t) in &self.params {
            w.bytes(name.as_bytes());
            w.tensor(t);
        }
        for state in [Some(&self.optimizer), self.adversary_optimizer.as_ref()] {
            match state {
                Some(s) => {
                    w.0.push(1);
                    w.u64(s.steps);
                    w.tensors(&s.first);
                    w.tensors(&s.second);
                }
                None => w.0.push(0),
            }
        }
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        ensure!(r.take(MAGIC.len())? == MAGIC, "not a checkpoint file");
        let version = r.u32()?;
        ensure!(
            version == CHECKPOINT_VERSION,
            "checkpoint format version {version} is not supported (expected {CHECKPOINT_VERSION})"
        );
        let header: Header = serde_json::from_slice(r.bytes()?).context("checkpoint header")?;
        let step = r.u64()?;
        let count = r.u32()?;
        let mut params = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name = String::from_utf8(r.bytes()?.to_vec()).context("parameter name")?;
            params.push((name, r.tensor()?));
        }
        let mut states = Vec::new();
        for _ in 0..2 {
            states.push(match r.u8()? {
                0 => None,
                1 => Some(OptimizerState {
                    steps: r.u64()?,
                    first: r.tensors()?,
                    second: r.tensors()?,
                }),
                f => bail!("bad optimizer flag {f}"),
            });
        }
        ensure!(r.pos == buf.len(), "trailing bytes after checkpoint");
        let adversary_optimizer = states.pop().flatten();
        let optimizer = states.pop().flatten().context("checkpoint lacks optimizer state")?;
        Ok(Self {
            header,
            step,
            params,
            optimizer,
            adversary_optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // Write-then-rename so a crash never leaves a half-written file.
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).with_context(|| format!("writing {}", tmp.display()))?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_bytes(&bytes).with_context(|| format!("loading {}", path.display()))
    }

    /// Rebuilds the model and overwrites every parameter by name.
    pub fn model(&self) -> Result<FlowModel> {
        let mut model = FlowModel::new(self.header.model.clone())?;
        ensure!(
            model.store.len() == self.params.len(),
            "checkpoint has {} parameters, model has {}",
            self.params.len(),
            model.store.len()
        );
        for (name, value) in &self.params {
            let id = model
                .store
                .find(name)
                .with_context(|| format!("model has no parameter {name}"))?;
            model.store.set_value(id, value.clone())?;
        }
        Ok(model)
    }

    /// Trainer positioned at the saved step, ready to resume.
    pub fn trainer(&self) -> Result<Trainer> {
        let mut trainer = Trainer::new(self.model()?, self.header.train.clone())?;
        let optimizer = self.optimizer.apply(trainer.optimizer())?;
        let adversary = match (&self.adversary_optimizer, trainer.adversary_optimizer()) {
            (Some(s), Some(adam)) => Some(s.apply(adam)?),
            (None, None) => None,
            _ => bail!("adversary optimizer state does not match the variant"),
        };
        trainer.restore(optimizer, adversary, self.step)?;
        Ok(trainer)
    }

    /// Errors unless the model accepts data of this shape.
    pub fn check_compatible(&self, point_dim: usize, action_dim: usize) -> Result<()> {
        let m = &self.header.model;
        ensure!(
            m.point_dim == point_dim && m.action_dim == action_dim,
            "checkpoint expects d={} J={}, data has d={point_dim} J={action_dim}",
            m.point_dim,
            m.action_dim
        );
        Ok(())
    }
}
