//! Execution context shared by every layer forward.
//!
//! A [`Ctx`] runs the same layer code in one of three modes:
//!
//! * `Eager` computes values and keeps nothing else; intermediates are freed as
//!   soon as the layer code drops them.
//! * `Record` also appends every primitive to an [`AutodiffTape`] so that
//!   [`Ctx::backward`] can replay it in reverse.
//! * `Symbolic` propagates shapes only and charges closed-form MAC counts and
//!   parameter counts to the innermost open scope. This is what the profiler and
//!   the shape tracer run on.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::float::Float;
use crate::ops::{self, Activation, BnMode, MacCounter, PoolKind};
use crate::param::Param;
use crate::tensor::{Shape, Tensor};

/// Per-channel batch mean and variance.
pub type BatchStats<T> = (Tensor<T>, Tensor<T>);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eager,
    Record,
    Symbolic,
}

/// A value flowing through a forward pass.
#[derive(Clone, Debug)]
pub struct Var<T: Float> {
    shape: Shape,
    value: Option<Tensor<T>>,
    slot: Option<usize>,
}

impl<T: Float> Var<T> {
    /// A shape-only value for symbolic execution.
    pub fn symbolic(shape: Shape) -> Self {
        Var { shape, value: None, slot: None }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn value(&self) -> Result<&Tensor<T>> {
        self.value.as_ref().ok_or(Error::NoData)
    }

    pub fn tensor(&self) -> Result<Tensor<T>> {
        self.value().cloned()
    }

    pub fn slot(&self) -> Option<usize> {
        self.slot
    }
}

impl<T: Float> From<Tensor<T>> for Var<T> {
    fn from(t: Tensor<T>) -> Self {
        Var { shape: t.shape(), value: Some(t), slot: None }
    }
}

/// Intermediates a primitive keeps for its vector-Jacobian product.
enum Saved<T: Float> {
    Conv { x: Tensor<T>, w: Tensor<T>, stride: usize, pad: usize, depthwise: bool },
    BatchNorm { x: Tensor<T>, gamma: Tensor<T>, mean: Vec<T>, inv_std: Vec<T>, mode: BnMode },
    LayerNorm { x: Tensor<T>, gamma: Tensor<T>, mean: Vec<T>, inv_std: Vec<T> },
    Act { x: Tensor<T>, kind: Activation },
    Add,
    Mul { x: Tensor<T>, y: Tensor<T> },
    Scale { k: T },
    BroadcastMul { x: Tensor<T>, g: Tensor<T> },
    Concat { channels: Vec<usize> },
    Narrow { full: Shape, start: usize },
    Upsample { xs: Shape },
    MaxPool { xs: Shape, arg: Vec<usize> },
    SpaceToDepth { xs: Shape },
    GlobalPool { xs: Shape, kind: PoolKind, arg: Vec<usize> },
    ChannelPool { xs: Shape, kind: PoolKind, arg: Vec<usize> },
    Sum { xs: Shape },
}

impl<T: Float> Saved<T> {
    fn name(&self) -> &'static str {
        match self {
            Saved::Conv { depthwise: false, .. } => "conv2d",
            Saved::Conv { depthwise: true, .. } => "depthwise_conv2d",
            Saved::BatchNorm { .. } => "batch_norm",
            Saved::LayerNorm { .. } => "layer_norm",
            Saved::Act { .. } => "activation",
            Saved::Add => "add",
            Saved::Mul { .. } => "mul",
            Saved::Scale { .. } => "scale",
            Saved::BroadcastMul { .. } => "broadcast_mul",
            Saved::Concat { .. } => "concat_channels",
            Saved::Narrow { .. } => "split_channels",
            Saved::Upsample { .. } => "upsample_nearest2x",
            Saved::MaxPool { .. } => "max_pool",
            Saved::SpaceToDepth { .. } => "space_to_depth",
            Saved::GlobalPool { .. } => "global_pool",
            Saved::ChannelPool { .. } => "channel_pool",
            Saved::Sum { .. } => "sum",
        }
    }

    /// Gradients for each input, `None` where `need` is false.
    fn backward(&self, dy: &Tensor<T>, need: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let want = |i: usize| need.get(i).copied().unwrap_or(false);
        Ok(match self {
            Saved::Conv { x, w, stride, pad, depthwise } => {
                let flags = [want(0), want(1), want(2)];
                let g = if *depthwise {
                    ops::depthwise_conv2d_backward(x, w, *stride, *pad, dy, flags)?
                } else {
                    ops::conv2d_backward(x, w, *stride, *pad, dy, flags)?
                };
                vec![g.dx, g.dw, g.db]
            }
            Saved::BatchNorm { x, gamma, mean, inv_std, mode } => {
                let g = ops::batch_norm_backward(x, gamma, mean, inv_std, *mode, dy, [want(0), want(1), want(2)])?;
                vec![g.dx, g.dgamma, g.dbeta]
            }
            Saved::LayerNorm { x, gamma, mean, inv_std } => {
                let g = ops::layer_norm_backward(x, gamma, mean, inv_std, dy, [want(0), want(1), want(2)])?;
                vec![g.dx, g.dgamma, g.dbeta]
            }
            Saved::Act { x, kind } => vec![Some(ops::activation_backward(x, *kind, dy)?)],
            Saved::Add => vec![Some(dy.clone()), Some(dy.clone())],
            Saved::Mul { x, y } => vec![
                want(0).then(|| ops::mul(dy, y, None)).transpose()?,
                want(1).then(|| ops::mul(dy, x, None)).transpose()?,
            ],
            Saved::Scale { k } => vec![Some(ops::scale(dy, *k, None))],
            Saved::BroadcastMul { x, g } => {
                let (dx, dg) = ops::broadcast_mul_backward(x, g, dy)?;
                vec![Some(dx), Some(dg)]
            }
            Saved::Concat { channels } => {
                let mut start = 0;
                channels
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| {
                        let part = want(i).then(|| ops::narrow_channels(dy, start, c)).transpose();
                        start += c;
                        part
                    })
                    .collect::<Result<_>>()?
            }
            Saved::Narrow { full, start } => vec![Some(ops::narrow_backward(*full, *start, dy)?)],
            Saved::Upsample { xs } => vec![Some(ops::upsample_nearest2x_backward(*xs, dy))],
            Saved::MaxPool { xs, arg } => vec![Some(ops::max_pool_backward(*xs, arg, dy)?)],
            Saved::SpaceToDepth { xs } => vec![Some(ops::space_to_depth_backward(*xs, dy))],
            Saved::GlobalPool { xs, kind, arg } => vec![Some(ops::global_pool_backward(*xs, *kind, arg, dy))],
            Saved::ChannelPool { xs, kind, arg } => vec![Some(ops::channel_pool_backward(*xs, *kind, arg, dy))],
            Saved::Sum { xs } => vec![Some(Tensor::full(*xs, dy.data()[0]))],
        })
    }
}

struct Record<T: Float> {
    inputs: Vec<Option<usize>>,
    output: usize,
    saved: Saved<T>,
}

/// Ordered record of executed primitives. Single writer, single use.
pub struct AutodiffTape<T: Float> {
    records: Vec<Record<T>>,
    slot_shapes: Vec<Shape>,
    leaves: HashMap<String, usize>,
    consumed: bool,
}

impl<T: Float> AutodiffTape<T> {
    fn new() -> Self {
        AutodiffTape { records: Vec::new(), slot_shapes: Vec::new(), leaves: HashMap::new(), consumed: false }
    }

    fn new_slot(&mut self, shape: Shape) -> usize {
        self.slot_shapes.push(shape);
        self.slot_shapes.len() - 1
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Primitive names in execution order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.records.iter().map(|r| r.saved.name()).collect()
    }
}

/// Gradients produced by one backward pass.
pub struct Grads<T: Float> {
    slots: Vec<Option<Tensor<T>>>,
    shapes: Vec<Shape>,
    leaves: HashMap<String, usize>,
    /// Record indices in the order the backward pass visited them.
    pub visit_order: Vec<usize>,
}

impl<T: Float> Grads<T> {
    /// Gradient with respect to `v`; zero if `v` is not on any path to the output.
    pub fn wrt(&self, v: &Var<T>) -> Tensor<T> {
        v.slot
            .and_then(|s| self.slots.get(s).cloned().flatten())
            .unwrap_or_else(|| Tensor::zeros(v.shape))
    }

    /// Gradient of a named parameter used during the recorded forward.
    pub fn param(&self, name: &str) -> Option<Tensor<T>> {
        let slot = *self.leaves.get(name)?;
        Some(self.slots[slot].clone().unwrap_or_else(|| Tensor::zeros(self.shapes[slot])))
    }

    /// Stores this pass's gradient in `p` (zero when `p` did not take part).
    pub fn apply_to(&self, p: &mut Param<T>) -> Result<()> {
        if !p.trainable() {
            return Ok(());
        }
        let g = self.param(p.name()).unwrap_or_else(|| Tensor::zeros(p.shape()));
        p.set_grad(Some(g))
    }
}

/// Per-scope tallies collected in symbolic mode.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProbeRow {
    pub name: String,
    pub shape: Option<Shape>,
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Default)]
pub struct Probe {
    rows: Vec<ProbeRow>,
    index: HashMap<String, usize>,
    seen: HashSet<String>,
}

impl Probe {
    fn row(&mut self, name: &str) -> &mut ProbeRow {
        let idx = match self.index.get(name) {
            Some(&i) => i,
            None => {
                self.rows.push(ProbeRow { name: name.to_string(), ..Default::default() });
                self.index.insert(name.to_string(), self.rows.len() - 1);
                self.rows.len() - 1
            }
        };
        &mut self.rows[idx]
    }

    pub fn rows(&self) -> &[ProbeRow] {
        &self.rows
    }

    pub fn into_rows(self) -> Vec<ProbeRow> {
        self.rows
    }

    pub fn total_macs(&self) -> u64 {
        self.rows.iter().map(|r| r.macs).sum()
    }

    pub fn total_params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }
}

const ROOT: &str = "(root)";

const BRANCH_SEED: u64 = 0xcbf2_9ce4_8422_2325;

pub struct Ctx<T: Float> {
    mode: Mode,
    tape: AutodiffTape<T>,
    counter: Option<Arc<MacCounter>>,
    probe: Probe,
    scopes: Vec<String>,
    branches: u64,
}

impl<T: Float> Ctx<T> {
    pub fn new(mode: Mode) -> Self {
        Ctx { mode, tape: AutodiffTape::new(), counter: None, probe: Probe::default(), scopes: Vec::new(), branches: BRANCH_SEED }
    }

    pub fn eager() -> Self {
        Self::new(Mode::Eager)
    }

    pub fn record() -> Self {
        Self::new(Mode::Record)
    }

    pub fn symbolic() -> Self {
        Self::new(Mode::Symbolic)
    }

    /// Routes executed multiply-accumulates of every kernel into `counter`.
    pub fn with_counter(mut self, counter: Arc<MacCounter>) -> Self {
        self.counter = Some(counter);
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn tape(&self) -> &AutodiffTape<T> {
        &self.tape
    }

    pub fn probe(&self) -> &Probe {
        &self.probe
    }

    pub fn into_probe(self) -> Probe {
        self.probe
    }

    /// Fingerprint of every branch taken so far: relu signs and max-pooling winners.
    /// Two evaluations with equal fingerprints lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        self.branches
    }

    fn note_branches(&mut self, decisions: impl Iterator<Item = u64>) {
        for d in decisions {
            self.branches = (self.branches ^ d).wrapping_mul(0x0000_0100_0000_01b3);
        }
        self.branches = (self.branches ^ u64::MAX).wrapping_mul(0x0000_0100_0000_01b3);
    }

    fn counter(&self) -> Option<&MacCounter> {
        self.counter.as_deref()
    }

    fn scope(&self) -> &str {
        self.scopes.last().map(String::as_str).unwrap_or(ROOT)
    }

    /// A differentiable leaf (network input).
    pub fn input(&mut self, t: Tensor<T>) -> Var<T> {
        let shape = t.shape();
        if self.mode == Mode::Symbolic {
            return Var::symbolic(shape);
        }
        let slot = (self.mode == Mode::Record).then(|| self.tape.new_slot(shape));
        Var { shape, value: Some(t), slot }
    }

    /// A leaf for a model tensor. Trainable parameters become differentiable
    /// leaves when recording (one leaf per name); buffers are constants.
    pub fn param(&mut self, p: &Param<T>) -> Var<T> {
        let shape = p.shape();
        match self.mode {
            Mode::Symbolic => {
                if p.trainable() && self.probe.seen.insert(p.name().to_string()) {
                    let scope = self.scope().to_string();
                    self.probe.row(&scope).params += p.numel() as u64;
                }
                Var::symbolic(shape)
            }
            Mode::Record if p.trainable() => {
                let slot = match self.tape.leaves.get(p.name()) {
                    Some(&s) => s,
                    None => {
                        let s = self.tape.new_slot(shape);
                        self.tape.leaves.insert(p.name().to_string(), s);
                        s
                    }
                };
                Var { shape, value: Some(p.value().clone()), slot: Some(slot) }
            }
            _ => Var::from(p.value().clone()),
        }
    }

    /// Runs `f` as the named layer: errors carry the layer path and, in symbolic
    /// mode, the layer gets a profile row holding its output shape.
    pub fn scoped(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<Var<T>>) -> Result<Var<T>> {
        self.enter(name);
        let out = f(self);
        self.exit(name, out.as_ref().ok().map(|v| v.shape));
        out.map_err(|e| e.at(name))
    }

    /// Like [`Ctx::scoped`] for layers that do not return a single value.
    pub fn within<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<R>) -> Result<R> {
        self.enter(name);
        let out = f(self);
        self.exit(name, None);
        out.map_err(|e| e.at(name))
    }

    fn enter(&mut self, name: &str) {
        if self.mode == Mode::Symbolic {
            self.probe.row(name);
        }
        self.scopes.push(name.to_string());
    }

    fn exit(&mut self, name: &str, shape: Option<Shape>) {
        self.scopes.pop();
        if self.mode == Mode::Symbolic {
            if let Some(s) = shape {
                self.probe.row(name).shape = Some(s);
            }
        }
    }

    /// Adds a zero-cost row naming an intermediate value (symbolic mode only).
    pub fn tag(&mut self, name: &str, v: &Var<T>) {
        if self.mode == Mode::Symbolic {
            self.probe.row(name).shape = Some(v.shape);
        }
    }

    fn symbolic_out(&mut self, macs: u64, shape: Shape) -> Var<T> {
        let scope = self.scope().to_string();
        self.probe.row(&scope).macs += macs;
        Var::symbolic(shape)
    }

    fn finish(&mut self, inputs: &[Option<usize>], y: Tensor<T>, saved: impl FnOnce() -> Saved<T>) -> Var<T> {
        let shape = y.shape();
        if self.mode == Mode::Record && inputs.iter().any(Option::is_some) {
            let output = self.tape.new_slot(shape);
            self.tape.records.push(Record { inputs: inputs.to_vec(), output, saved: saved() });
            Var { shape, value: Some(y), slot: Some(output) }
        } else {
            Var::from(y)
        }
    }

    pub fn conv2d(&mut self, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>, stride: usize, pad: usize) -> Result<Var<T>> {
        let ys = ops::conv2d_shape(x.shape, w.shape, b.map(|b| b.shape.numel()), stride, pad)?;
        if self.mode == Mode::Symbolic {
            return Ok(self.symbolic_out(ops::conv2d_macs(x.shape, w.shape, ys), ys));
        }
        let (xv, wv) = (x.value()?, w.value()?);
        let bv = b.map(|b| b.value()).transpose()?;
        let y = ops::conv2d(xv, wv, bv, stride, pad, self.counter())?;
        Ok(self.finish(&[x.slot, w.slot, b.and_then(|b| b.slot)], y, || Saved::Conv {
            x: xv.clone(),
            w: wv.clone(),
            stride,
            pad,
            depthwise: false,
        }))
    }

    pub fn depthwise_conv2d(
        &mut self,
        x: &Var<T>,
        w: &Var<T>,
        b: Option<&Var<T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<T>> {
        let ys = ops::depthwise_shape(x.shape, w.shape, b.map(|b| b.shape.numel()), stride, pad)?;
        if self.mode == Mode::Symbolic {
            return Ok(self.symbolic_out(ops::depthwise_macs(w.shape, ys), ys));
        }
        let (xv, wv) = (x.value()?, w.value()?);
        let bv = b.map(|b| b.value()).transpose()?;
        let y = ops::depthwise_conv2d(xv, wv, bv, stride, pad, self.counter())?;
        Ok(self.finish(&[x.slot, w.slot, b.and_then(|b| b.slot)], y, || Saved::Conv {
            x: xv.clone(),
            w: wv.clone(),
            stride,
            pad,
            depthwise: true,
        }))
    }

    /// Batch normalization. In train mode also returns the updated running
    /// statistics; storing them is the caller's business.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: &Var<T>,
        gamma: &Var<T>,
        beta: &Var<T>,
        mean: &Var<T>,
        var: &Var<T>,
        eps: f64,
        mode: BnMode,
    ) -> Result<(Var<T>, Option<BatchStats<T>>)> {
        for (what, v) in [("gamma", gamma), ("beta", beta), ("running_mean", mean), ("running_var", var)] {
            if v.shape.numel() != x.shape.c {
                return Err(Error::shape("batch_norm", format!("{what} has {} entries for {}", v.shape.numel(), x.shape)));
            }
        }
        if self.mode == Mode::Symbolic {
            return Ok((self.symbolic_out(x.shape.numel() as u64, x.shape), None));
        }
        let xv = x.value()?;
        let gv = gamma.value()?;
        let out = ops::batch_norm(xv, gv, beta.value()?, mean.value()?, var.value()?, eps, mode, self.counter())?;
        let ops::BatchNormOut { y, mean: m, inv_std, running } = out;
        let v = self.finish(&[x.slot, gamma.slot, beta.slot], y, || Saved::BatchNorm {
            x: xv.clone(),
            gamma: gv.clone(),
            mean: m,
            inv_std,
            mode,
        });
        Ok((v, running))
    }

    pub fn layer_norm(&mut self, x: &Var<T>, gamma: &Var<T>, beta: &Var<T>, eps: f64) -> Result<Var<T>> {
        if gamma.shape.numel() != x.shape.c || beta.shape.numel() != x.shape.c {
            return Err(Error::shape("layer_norm", format!("affine vectors do not match {}", x.shape)));
        }
        if self.mode == Mode::Symbolic {
            return Ok(self.symbolic_out(x.shape.numel() as u64, x.shape));
        }
        let xv = x.value()?;
        let gv = gamma.value()?;
        let ops::LayerNormOut { y, mean, inv_std } = ops::layer_norm(xv, gv, beta.value()?, eps, self.counter())?;
        Ok(self.finish(&[x.slot, gamma.slot, beta.slot], y, || Saved::LayerNorm {
            x: xv.clone(),
            gamma: gv.clone(),
            mean,
            inv_std,
        }))
    }

    pub fn act(&mut self, x: &Var<T>, kind: Activation) -> Result<Var<T>> {
        if self.mode == Mode::Symbolic {
            return Ok(self.symbolic_out(x.shape.numel() as u64, x.shape));
        }
        let xv = x.value()?;
        if kind == Activation::Relu {
            self.note_branches(xv.data().iter().map(|&v| (v > T::zero()) as u64));
        }
        let y = ops::activation(xv, kind, self.counter());
        Ok(self.finish(&[x.slot], y, || Saved::Act { x: xv.clone(), kind }))
    }

    pub fn add(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let s = ops::add_shape(a.shape, b.shape)?;
        if self.mode == Mode::Symbolic {
            return Ok(self.symbolic_out(s.numel() as u64, s));
        }
        let y = ops::add(a.value()?, b.value()?, self.counter())?;
        Ok(self.finish(&[a.slot, b.slot], y, || Saved::Add))
    }

    pub fn mul(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let s = ops::mul_shape(a.shape, b.shape)?;
        if self.mode == Mode::Symbolic {
            return Ok(self.symbolic_out(s.numel() as u64, s));
        }
        let (av, bv) = (a.value()?, b.value()?);
        let y = ops::mul(av, bv, self.counter())?;
        Ok(self.finish(&[a.slot, b.slot], y, || Saved::Mul { x: av.clone(), y: bv.clone() }))
    }

    pub fn scale(&mut self, x: &Var<T>, k: f64) -> Result<Var<T>> {
        if self.mode == Mode::Symbolic {
            return Ok(self.symbolic_out(x.shape.numel() as u64, x.shape));
        }
        let k = T::lit(k);
        let y = ops::scale(x.value()?, k, self.counter());
        Ok(self.finish(&[x.slot], y, || Saved::Scale { k }))
    }

    /// `x ⊙ g` with `g` broadcast along its unit dimensions.
    pub fn broadcast_mul(&mut self, x: &Var<T>, g: &Var<T>) -> Result<Var<T>> {
        let s = ops::broadcast_shape(x.shape, g.shape)?;
        if self.mode == Mode::Symbolic {
            return Ok(self.symbolic_out(s.numel() as u64, s));
        }
        let (xv, gv) = (x.value()?, g.value()?);
        let y = ops::broadcast_mul(xv, gv, self.counter())?;
        Ok(self.finish(&[x.slot, g.slot], y, || Saved::BroadcastMul { x: xv.clone(), g: gv.clone() }))
    }

    pub fn concat(&mut self, xs: &[&Var<T>]) -> Result<Var<T>> {
        let shapes: Vec<Shape> = xs.iter().map(|v| v.shape).collect();
        let s = ops::concat_shape(&shapes)?;
        if self.mode == Mode::Symbolic {
            return Ok(self.symbolic_out(0, s));
        }
        let values = xs.iter().map(|v| v.value()).collect::<Result<Vec<_>>>()?;
        let y = ops::concat_channels(&values)?;
        let slots: Vec<Option<usize>> = xs.iter().map(|v| v.slot).collect();
        Ok(self.finish(&slots, y, || Saved::Concat { channels: shapes.iter().map(|s| s.c).collect() }))
    }

    pub fn narrow(&mut self, x: &Var<T>, start: usize, len: usize) -> Result<Var<T>> {
        let s = ops::narrow_shape(x.shape, start, len)?;
        if self.mode == Mode::Symbolic {
            return Ok(self.symbolic_out(0, s));
        }
        let y = ops::narrow_channels(x.value()?, start, len)?;
        let full = x.shape;
        Ok(self.finish(&[x.slot], y, || Saved::Narrow { full, start }))
    }

    pub fn split(&mut self, x: &Var<T>, sizes: &[usize]) -> Result<Vec<Var<T>>> {
        if sizes.iter().sum::<usize>() != x.shape.c {
            return Err(Error::shape(
                "split_channels",
                format!("sizes {sizes:?} do not sum to {} channels", x.shape.c),
            ));
        }
        let mut start = 0;
        let mut parts = Vec::with_capacity(sizes.len());
        for &len in sizes {
            parts.push(self.narrow(x, start, len)?);
            start += len;
        }
        Ok(parts)
    }

    pub fn upsample2x(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let s = ops::upsample_shape(x.shape);
        if self.mode == Mode::Symbolic {
            return Ok(self.symbolic_out(0, s));
        }
        let y = ops::upsample_nearest2x(x.value()?);
        let xs = x.shape;
        Ok(self.finish(&[x.slot], y, || Saved::Upsample { xs }))
    }

    pub fn max_pool(&mut self, x: &Var<T>, k: usize, stride: usize, pad: usize) -> Result<Var<T>> {
        let s = ops::max_pool_shape(x.shape, k, stride, pad)?;
        if self.mode == Mode::Symbolic {
            return Ok(self.symbolic_out(0, s));
        }
        let (y, arg) = ops::max_pool(x.value()?, k, stride, pad)?;
        self.note_branches(arg.iter().map(|&i| i as u64));
        let xs = x.shape;
        Ok(self.finish(&[x.slot], y, || Saved::MaxPool { xs, arg }))
    }

    pub fn space_to_depth(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let s = ops::space_to_depth_shape(x.shape)?;
        if self.mode == Mode::Symbolic {
            return Ok(self.symbolic_out(0, s));
        }
        let y = ops::space_to_depth(x.value()?)?;
        let xs = x.shape;
        Ok(self.finish(&[x.slot], y, || Saved::SpaceToDepth { xs }))
    }

    pub fn global_pool(&mut self, x: &Var<T>, kind: PoolKind) -> Result<Var<T>> {
        let s = Shape::new(x.shape.n, x.shape.c, 1, 1);
        if self.mode == Mode::Symbolic {
            return Ok(self.symbolic_out(0, s));
        }
        let (y, arg) = ops::global_pool(x.value()?, kind);
        self.note_branches(arg.iter().map(|&i| i as u64));
        let xs = x.shape;
        Ok(self.finish(&[x.slot], y, || Saved::GlobalPool { xs, kind, arg }))
    }

    pub fn channel_pool(&mut self, x: &Var<T>, kind: PoolKind) -> Result<Var<T>> {
        let s = Shape::new(x.shape.n, 1, x.shape.h, x.shape.w);
        if self.mode == Mode::Symbolic {
            return Ok(self.symbolic_out(0, s));
        }
        let (y, arg) = ops::channel_pool(x.value()?, kind);
        self.note_branches(arg.iter().map(|&i| i as u64));
        let xs = x.shape;
        Ok(self.finish(&[x.slot], y, || Saved::ChannelPool { xs, kind, arg }))
    }

    pub fn sum(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let s = Shape::new(1, 1, 1, 1);
        if self.mode == Mode::Symbolic {
            return Ok(self.symbolic_out(0, s));
        }
        let y = ops::sum_all(x.value()?);
        let xs = x.shape;
        Ok(self.finish(&[x.slot], y, || Saved::Sum { xs }))
    }

    /// Replays the tape in reverse, seeding `output` with `grad`. Consumes the tape.
    pub fn backward(&mut self, output: &Var<T>, grad: &Tensor<T>) -> Result<Grads<T>> {
        if self.mode != Mode::Record {
            return Err(Error::domain("backward", "context is not recording"));
        }
        if self.tape.consumed {
            return Err(Error::TapeConsumed);
        }
        if grad.shape() != output.shape {
            return Err(Error::shape("backward", format!("grad {} for output {}", grad.shape(), output.shape)));
        }
        self.tape.consumed = true;
        let records = std::mem::take(&mut self.tape.records);
        let mut slots: Vec<Option<Tensor<T>>> = vec![None; self.tape.slot_shapes.len()];
        if let Some(s) = output.slot {
            slots[s] = Some(grad.clone());
        }
        let mut visit_order = Vec::with_capacity(records.len());
        for (idx, rec) in records.iter().enumerate().rev() {
            let Some(dy) = slots[rec.output].clone() else {
                continue;
            };
            visit_order.push(idx);
            let need: Vec<bool> = rec.inputs.iter().map(Option::is_some).collect();
            let grads = rec.saved.backward(&dy, &need).map_err(|e| e.at(rec.saved.name()))?;
            for (slot, g) in rec.inputs.iter().zip(grads) {
                if let (Some(s), Some(g)) = (slot, g) {
                    slots[*s] = Some(match slots[*s].take() {
                        Some(acc) => ops::add(&acc, &g, None)?,
                        None => g,
                    });
                }
            }
        }
        Ok(Grads {
            slots,
            shapes: self.tape.slot_shapes.clone(),
            leaves: self.tape.leaves.clone(),
            visit_order,
        })
    }
}
