//! Tape-based reverse-mode differentiation over a closed set of ops.
//!
//! Every forward op appends one node holding its output value. `backward`
//! walks the nodes in exact reverse order and accumulates gradients into the
//! inputs of each node; a node used twice receives the sum of both paths.

use crate::autodiff::param::{ParamId, ParamStore};
use crate::autodiff::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf { param: Option<ParamId> },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    BroadcastAdd(Var, Var),
    BroadcastMul(Var, Var),
    Relu(Var),
    // Caches the forward sigmoid for the backward pass.
    Silu(Var, Vec<f64>),
    Sin(Var),
    Cos(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    // `argmax[o]` is the flat input index selected for output element `o`.
    MaxPool { input: Var, argmax: Vec<usize> },
    Mse(Var, Var),
    Scale(Var, f64),
    GradReversal(Var, f64),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::BroadcastAdd(..) => "broadcast_add",
            Op::BroadcastMul(..) => "broadcast_mul",
            Op::Relu(..) => "relu",
            Op::Silu(..) => "silu",
            Op::Sin(..) => "sin",
            Op::Cos(..) => "cos",
            Op::Concat { .. } => "concat",
            Op::MaxPool { .. } => "max_pool",
            Op::Mse(..) => "mse",
            Op::Scale(..) => "scale",
            Op::GradReversal(..) => "gradient_reversal",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-threaded recording context.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(Var, ParamId)>,
}

impl Gradients {
    /// Gradient with respect to `var`, if the loss depends on it.
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Adds every parameter-leaf gradient into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(var, id) in &self.params {
            if let Some(g) = &self.grads[var.0] {
                store.get_mut(id).grad.add_assign(g);
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn require_rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::shape(op, format!("expected rank 2, got {:?}", t.shape())));
    }
    Ok((t.rows(), t.cols()))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// A differentiable input (gradient available via [`Gradients::wrt`]).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf { param: None },
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf { param: None },
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a parameter as a leaf whose gradient flows back into the store.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Leaf { param: Some(id) },
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = require_rank2("matmul", self.value(a))?;
        let (k2, n) = require_rank2("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            self.value(a).data(),
            m,
            k,
            false,
            self.value(b).data(),
            k,
            n,
            false,
            &mut out,
            0.0,
        );
        let rg = self.needs(a) || self.needs(b);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.needs(a) || self.needs(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// Checks `a: [m, n]`, `b: [g, n]` with `g | m`; returns `(m, n, m / g)`.
    fn broadcast_dims(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize, usize)> {
        let (m, n) = require_rank2(op, self.value(a))?;
        let (g, n2) = require_rank2(op, self.value(b))?;
        if n != n2 || g == 0 || m % g != 0 {
            return Err(Error::shape(op, format!("[{m}, {n}] with [{g}, {n2}]")));
        }
        Ok((m, n, m / g))
    }

    /// `out[r] = a[r] + b[r / (m / g)]` for `a: [m, n]`, `b: [g, n]`.
    ///
    /// With `g = 1` this is a bias add; with `g = batch` it applies one row
    /// of `b` to each contiguous group of rows of `a`.
    pub fn broadcast_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n, group) = self.broadcast_dims("broadcast_add", a, b)?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            let brow = &bv[(r / group) * n..(r / group + 1) * n];
            out.extend(av[r * n..(r + 1) * n].iter().zip(brow).map(|(x, y)| x + y));
        }
        let rg = self.needs(a) || self.needs(b);
        self.push(Tensor::matrix(m, n, out)?, Op::BroadcastAdd(a, b), rg)
    }

    /// Grouped broadcast product, same row mapping as [`Tape::broadcast_add`].
    pub fn broadcast_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n, group) = self.broadcast_dims("broadcast_mul", a, b)?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            let brow = &bv[(r / group) * n..(r / group + 1) * n];
            out.extend(av[r * n..(r + 1) * n].iter().zip(brow).map(|(x, y)| x * y));
        }
        let rg = self.needs(a) || self.needs(b);
        self.push(Tensor::matrix(m, n, out)?, Op::BroadcastMul(a, b), rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.needs(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let sig: Vec<f64> = xv.data().iter().map(|&v| sigmoid(v)).collect();
        let out = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().zip(&sig).map(|(v, s)| v * s).collect(),
        )?;
        let rg = self.needs(x);
        self.push(out, Op::Silu(x, sig), rg)
    }

    pub fn sin(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::sin);
        let rg = self.needs(x);
        self.push(out, Op::Sin(x), rg)
    }

    pub fn cos(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::cos);
        let rg = self.needs(x);
        self.push(out, Op::Cos(x), rg)
    }

    /// Concatenates rank-2 tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() || axis > 1 {
            return Err(Error::shape("concat", format!("{} inputs, axis {axis}", inputs.len())));
        }
        let shapes: Vec<(usize, usize)> = inputs
            .iter()
            .map(|&v| require_rank2("concat", self.value(v)))
            .collect::<Result<_>>()?;
        let describe = || format!("{shapes:?} along axis {axis}");
        let out = if axis == 0 {
            let cols = shapes[0].1;
            if shapes.iter().any(|s| s.1 != cols) {
                return Err(Error::shape("concat", describe()));
            }
            let rows = shapes.iter().map(|s| s.0).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for &v in inputs {
                data.extend_from_slice(self.value(v).data());
            }
            Tensor::matrix(rows, cols, data)?
        } else {
            let rows = shapes[0].0;
            if shapes.iter().any(|s| s.0 != rows) {
                return Err(Error::shape("concat", describe()));
            }
            let cols: usize = shapes.iter().map(|s| s.1).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for &v in inputs {
                    data.extend_from_slice(self.value(v).row(r));
                }
            }
            Tensor::matrix(rows, cols, data)?
        };
        let rg = inputs.iter().any(|&v| self.needs(v));
        self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        )
    }

    /// Max over a whole axis of a rank-2 tensor, keeping it as size 1.
    pub fn max_pool(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.max_pool_grouped(x, axis, 1)
    }

    /// Max over `groups` equal contiguous blocks along `axis`.
    ///
    /// For `x: [g * r, n]` and `axis = 0` the output is `[g, n]`. Ties resolve
    /// to the first maximal index.
    pub fn max_pool_grouped(&mut self, x: Var, axis: usize, groups: usize) -> Result<Var> {
        let (m, n) = require_rank2("max_pool", self.value(x))?;
        let extent = if axis == 0 { m } else { n };
        if axis > 1 || groups == 0 || extent == 0 || extent % groups != 0 {
            return Err(Error::shape(
                "max_pool",
                format!("[{m}, {n}] axis {axis} groups {groups}"),
            ));
        }
        let block = extent / groups;
        let data = self.value(x).data();
        let (out_rows, out_cols) = if axis == 0 { (groups, n) } else { (m, groups) };
        let mut out = Vec::with_capacity(out_rows * out_cols);
        let mut argmax = Vec::with_capacity(out_rows * out_cols);
        for orow in 0..out_rows {
            for ocol in 0..out_cols {
                let index = |i: usize| {
                    if axis == 0 {
                        (orow * block + i) * n + ocol
                    } else {
                        orow * n + ocol * block + i
                    }
                };
                let mut best = index(0);
                for i in 1..block {
                    let idx = index(i);
                    if data[idx] > data[best] {
                        best = idx;
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
        let rg = self.needs(x);
        self.push(
            Tensor::matrix(out_rows, out_cols, out)?,
            Op::MaxPool { input: x, argmax },
            rg,
        )
    }

    /// Mean squared error over all entries; returns a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        if av.is_empty() {
            return Err(Error::shape("mse", "empty input"));
        }
        let s: f64 = av.iter().zip(bv).map(|(x, y)| (x - y) * (x - y)).sum();
        let rg = self.needs(a) || self.needs(b);
        self.push(Tensor::scalar(s / av.len() as f64), Op::Mse(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.value(x).scale(factor);
        let rg = self.needs(x);
        self.push(out, Op::Scale(x, factor), rg)
    }

    /// Identity forward; backward multiplies the upstream gradient by `-strength`.
    pub fn gradient_reversal(&mut self, x: Var, strength: f64) -> Result<Var> {
        if !(strength >= 0.0) {
            return Err(Error::invalid(format!(
                "gradient reversal strength must be >= 0, got {strength}"
            )));
        }
        let out = self.value(x).clone();
        let rg = self.needs(x);
        self.push(out, Op::GradReversal(x, strength), rg)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut seed = Tensor::zeros(lv.shape());
        seed.fill(1.0);
        grads[loss.0] = Some(seed);

        let mut params = Vec::new();
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1).rev() {
            if let Op::Leaf { param: Some(id) } = node.op {
                params.push((Var(i), id));
                continue;
            }
            if matches!(node.op, Op::Leaf { .. }) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        params.reverse();
        Ok(Gradients { grads, params })
    }

    fn grad_slot<'a>(&self, grads: &'a mut [Option<Tensor>], v: Var) -> &'a mut Tensor {
        grads[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()))
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf { .. } => {}
            &Op::MatMul(a, b) => {
                let av = self.value(a);
                let bv = self.value(b);
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.needs(a) {
                    let slot = self.grad_slot(grads, a);
                    // dA = G * B^T
                    gemm(g.data(), m, n, false, bv.data(), k, n, true, slot.data_mut(), 1.0);
                }
                if self.needs(b) {
                    let slot = self.grad_slot(grads, b);
                    // dB = A^T * G
                    gemm(av.data(), m, k, true, g.data(), m, n, false, slot.data_mut(), 1.0);
                }
            }
            &Op::Add(a, b) => {
                let gd = g.data();
                for v in [a, b] {
                    self.accumulate(grads, v, |i| gd[i]);
                }
            }
            &Op::Sub(a, b) => {
                let gd = g.data();
                self.accumulate(grads, a, |i| gd[i]);
                self.accumulate(grads, b, |i| -gd[i]);
            }
            &Op::Mul(a, b) => {
                let gd = g.data();
                for (v, other) in [(a, b), (b, a)] {
                    let ov = self.value(other).data();
                    self.accumulate(grads, v, |i| gd[i] * ov[i]);
                }
            }
            &Op::BroadcastAdd(a, b) => {
                let (m, n) = (self.value(a).rows(), self.value(a).cols());
                let group = m / self.value(b).rows();
                let gd = g.data();
                self.accumulate(grads, a, |i| gd[i]);
                if self.needs(b) {
                    let slot = self.grad_slot(grads, b).data_mut();
                    let gd = g.data();
                    for r in 0..m {
                        let brow = &mut slot[(r / group) * n..(r / group + 1) * n];
                        for (s, gv) in brow.iter_mut().zip(&gd[r * n..(r + 1) * n]) {
                            *s += gv;
                        }
                    }
                }
            }
            &Op::BroadcastMul(a, b) => {
                let (m, n) = (self.value(a).rows(), self.value(a).cols());
                let group = m / self.value(b).rows();
                let ad = self.value(a).data();
                let bd = self.value(b).data();
                let gd = g.data();
                let rows_per_b = group * n;
                self.accumulate(grads, a, |i| gd[i] * bd[(i / rows_per_b) * n + i % n]);
                if self.needs(b) {
                    let slot = self.grad_slot(grads, b).data_mut();
                    for r in 0..m {
                        let base = (r / group) * n;
                        for c in 0..n {
                            slot[base + c] += gd[r * n + c] * ad[r * n + c];
                        }
                    }
                }
            }
            &Op::Relu(x) => {
                let (gd, xd) = (g.data(), self.value(x).data());
                self.accumulate(grads, x, |i| if xd[i] > 0.0 { gd[i] } else { 0.0 });
            }
            Op::Silu(x, sig) => {
                let (gd, xd) = (g.data(), self.value(*x).data());
                self.accumulate(grads, *x, |i| {
                    let s = sig[i];
                    gd[i] * (s * (1.0 + xd[i] * (1.0 - s)))
                });
            }
            &Op::Sin(x) => {
                let (gd, xd) = (g.data(), self.value(x).data());
                self.accumulate(grads, x, |i| gd[i] * xd[i].cos());
            }
            &Op::Cos(x) => {
                let (gd, xd) = (g.data(), self.value(x).data());
                self.accumulate(grads, x, |i| gd[i] * -xd[i].sin());
            }
            Op::Concat { inputs, axis } => {
                let gd = g.data();
                let total_cols = g.cols();
                let mut offset = 0;
                for &v in inputs {
                    let (rows, cols) = (self.value(v).rows(), self.value(v).cols());
                    if self.needs(v) {
                        let slot = self.grad_slot(grads, v).data_mut();
                        if *axis == 0 {
                            for (s, gv) in slot.iter_mut().zip(&gd[offset * cols..(offset + rows) * cols]) {
                                *s += gv;
                            }
                        } else {
                            for r in 0..rows {
                                let src = &gd[r * total_cols + offset..r * total_cols + offset + cols];
                                for (s, gv) in slot[r * cols..(r + 1) * cols].iter_mut().zip(src) {
                                    *s += gv;
                                }
                            }
                        }
                    }
                    offset += if *axis == 0 { rows } else { cols };
                }
            }
            Op::MaxPool { input, argmax } => {
                if self.needs(*input) {
                    let slot = self.grad_slot(grads, *input).data_mut();
                    for (gv, &idx) in g.data().iter().zip(argmax) {
                        slot[idx] += gv;
                    }
                }
            }
            &Op::Mse(a, b) => {
                let ad = self.value(a).data();
                let bd = self.value(b).data();
                let coeff = 2.0 * g.item() / ad.len() as f64;
                self.accumulate(grads, a, |i| coeff * (ad[i] - bd[i]));
                self.accumulate(grads, b, |i| -(coeff * (ad[i] - bd[i])));
            }
            &Op::Scale(x, factor) => {
                let gd = g.data();
                self.accumulate(grads, x, |i| factor * gd[i]);
            }
            &Op::GradReversal(x, strength) => {
                let gd = g.data();
                self.accumulate(grads, x, |i| -strength * gd[i]);
            }
        }
    }

    /// Adds `f(i)` into the gradient of `v`, writing it directly when `v`
    /// has no gradient yet.
    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, f: impl Fn(usize) -> f64) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(slot) => {
                for (i, s) in slot.data_mut().iter_mut().enumerate() {
                    *s += f(i);
                }
            }
            empty @ None => {
                let value = &self.nodes[v.0].value;
                let data = (0..value.len()).map(f).collect();
                *empty = Some(Tensor::new(value.shape().to_vec(), data).expect("shape matches"));
            }
        }
    }
}
