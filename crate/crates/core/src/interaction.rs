//! Gated, recursive gated and recursive residual gated convolutions.
//!
//! A layer of order `n` on `C` channels projects its input to `2C` channels,
//! splits off a carrier `p_0` (`C_0` channels) and a bundle of neighbour features
//! that a single 7×7 depthwise pass turns into `f_0 .. f_{n-1}`, with
//! `C_k = C / 2^{n-1-k}`. Each order then computes
//!
//! ```text
//! s_k     = g_k(p_k)                      g_0 = identity, g_k = SiLU(BN(conv1x1))
//! p_{k+1} = (s_k + f_k + f_k ⊙ s_k) / λ   residual form
//! p_{k+1} = (f_k ⊙ s_k) / λ               plain form
//! ```
//!
//! and the output is `φ_out(p_n)`.

use std::fmt;
use std::str::FromStr;

use drsi_tensor::ops::{self, BnMode};
use drsi_tensor::{Activation, Ctx, Float, Initializer, Param, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Params, Conv2d, ConvBnSilu, DepthwiseConv2d, Layer};

pub const DW_KERNEL: usize = 7;

/// Per-order channel widths of an order-`n` layer on `c` channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelScheme {
    pub c: usize,
    pub n: usize,
    pub c_k: Vec<usize>,
    pub c_0: usize,
    pub c_q: usize,
}

impl ChannelScheme {
    pub fn new(c: usize, n: usize) -> Result<Self> {
        if n < 1 {
            return Err(Error::Scheme(format!("order must be at least 1, got {n}")));
        }
        if n > 16 || c == 0 || !c.is_multiple_of(1 << (n - 1)) {
            return Err(Error::Scheme(format!("{c} channels are not divisible by 2^{}", n - 1)));
        }
        let c_k: Vec<usize> = (0..n).map(|k| c >> (n - 1 - k)).collect();
        Ok(ChannelScheme { c, n, c_0: c_k[0], c_q: c_k.iter().sum(), c_k })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interaction {
    #[default]
    ResGnConv,
    GnConv,
}

impl FromStr for Interaction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "res_gn_conv" => Ok(Interaction::ResGnConv),
            "gn_conv" => Ok(Interaction::GnConv),
            other => Err(Error::Unknown {
                kind: "interaction",
                name: other.into(),
                known: "gn_conv, res_gn_conv".into(),
            }),
        }
    }
}

impl fmt::Display for Interaction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Interaction::ResGnConv => "res_gn_conv",
            Interaction::GnConv => "gn_conv",
        })
    }
}

/// Values seen at one order of the recursion.
#[derive(Clone, Debug)]
pub struct OrderTrace<T: Float> {
    pub p: Tensor<T>,
    pub s: Tensor<T>,
    pub f: Tensor<T>,
    pub next: Tensor<T>,
}

pub struct ResGnConv<T: Float> {
    pub name: String,
    pub scheme: ChannelScheme,
    pub phi_in: Conv2d<T>,
    /// Depthwise 7×7 over the whole `C_q`-channel neighbour bundle.
    pub dw: DepthwiseConv2d<T>,
    /// Projections `g_1 .. g_{n-1}`.
    pub g: Vec<ConvBnSilu<T>>,
    pub phi_out: Conv2d<T>,
    pub lambda: f64,
    pub residual: bool,
}

impl<T: Float> ResGnConv<T> {
    pub fn new(init: &Initializer, name: &str, c: usize, n: usize, lambda: f64, residual: bool) -> Result<Self> {
        let scheme = ChannelScheme::new(c, n)?;
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::config(format!("lambda must be positive, got {lambda}")));
        }
        let g = (1..n)
            .map(|k| ConvBnSilu::new(init, &format!("{name}.g.{k}"), scheme.c_k[k - 1], scheme.c_k[k], 1, 1))
            .collect();
        Ok(ResGnConv {
            name: name.to_string(),
            phi_in: Conv2d::new(init, &format!("{name}.phi_in"), c, 2 * c, 1, 1, true),
            dw: DepthwiseConv2d::new(init, &format!("{name}.dw"), scheme.c_q, DW_KERNEL, true),
            phi_out: Conv2d::new(init, &format!("{name}.phi_out"), c, c, 1, 1, true),
            g,
            scheme,
            lambda,
            residual,
        })
    }

    /// Builds the variant selected by `kind`; the plain form always uses λ = 1.
    pub fn with_interaction(
        init: &Initializer,
        name: &str,
        c: usize,
        n: usize,
        lambda: f64,
        kind: Interaction,
    ) -> Result<Self> {
        match kind {
            Interaction::ResGnConv => Self::new(init, name, c, n, lambda, true),
            Interaction::GnConv => Self::new(init, name, c, n, 1.0, false),
        }
    }

    fn run(&self, cx: &mut Ctx<T>, x: &Var<T>, mut trace: Option<&mut Vec<OrderTrace<T>>>) -> drsi_tensor::Result<Var<T>> {
        let sc = &self.scheme;
        if x.shape().c != sc.c {
            return Err(drsi_tensor::Error::shape("res_gn_conv", format!("expected {} channels, got {}", sc.c, x.shape())));
        }
        let h = self.phi_in.forward(cx, x)?;
        let pq = cx.split(&h, &[sc.c_0, sc.c_q])?;
        let fq = self.dw.forward(cx, &pq[1])?;
        let fs = cx.split(&fq, &sc.c_k)?;
        let mut p = pq[0].clone();
        for (k, f) in fs.iter().enumerate() {
            let s = if k == 0 { p.clone() } else { self.g[k - 1].forward(cx, &p)? };
            let prod = cx.mul(f, &s)?;
            let mut next = if self.residual {
                let sf = cx.add(&s, f)?;
                cx.add(&sf, &prod)?
            } else {
                prod
            };
            if self.lambda != 1.0 {
                next = cx.scale(&next, 1.0 / self.lambda)?;
            }
            if let Some(t) = trace.as_deref_mut() {
                t.push(OrderTrace { p: p.tensor()?, s: s.tensor()?, f: f.tensor()?, next: next.tensor()? });
            }
            p = next;
        }
        self.phi_out.forward(cx, &p)
    }

    /// Eager forward that also returns the per-order intermediates.
    pub fn forward_traced(&self, x: &Tensor<T>) -> drsi_tensor::Result<(Tensor<T>, Vec<OrderTrace<T>>)> {
        let mut cx = Ctx::eager();
        let mut trace = Vec::with_capacity(self.scheme.n);
        let y = self.run(&mut cx, &Var::from(x.clone()), Some(&mut trace))?;
        Ok((y.tensor()?, trace))
    }
}

impl<T: Float> Layer<T> for ResGnConv<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&self, cx: &mut Ctx<T>, x: &Var<T>) -> drsi_tensor::Result<Var<T>> {
        cx.scoped(&self.name, |cx| self.run(cx, x, None))
    }
}

impl<T: Float> Params<T> for ResGnConv<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.phi_in.visit(f);
        self.dw.visit(f);
        self.g.iter().for_each(|g| g.visit(f));
        self.phi_out.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.phi_in.visit_mut(f);
        self.dw.visit_mut(f);
        self.g.iter_mut().for_each(|g| g.visit_mut(f));
        self.phi_out.visit_mut(f);
    }
}

fn conv<T: Float>(c: &Conv2d<T>, x: &Tensor<T>) -> drsi_tensor::Result<Tensor<T>> {
    ops::conv2d(x, c.weight.value(), c.bias.as_ref().map(Param::value), c.stride, c.pad, None)
}

fn depthwise<T: Float>(c: &DepthwiseConv2d<T>, x: &Tensor<T>) -> drsi_tensor::Result<Tensor<T>> {
    ops::depthwise_conv2d(x, c.weight.value(), c.bias.as_ref().map(Param::value), c.stride, c.pad, None)
}

fn conv_bn_silu<T: Float>(l: &ConvBnSilu<T>, x: &Tensor<T>) -> drsi_tensor::Result<Tensor<T>> {
    let y = conv(&l.conv, x)?;
    let bn = &l.bn;
    let y = ops::batch_norm(
        &y,
        bn.gamma.value(),
        bn.beta.value(),
        bn.running_mean.value(),
        bn.running_var.value(),
        bn.eps,
        BnMode::Eval,
        None,
    )?
    .y;
    Ok(ops::activation(&y, Activation::Silu, None))
}

/// Single-order gated convolution `φ_out(p_0 ⊙ f(q_0))`, evaluated directly on
/// tensors with the layer's weights. Requires `n = 1`.
pub fn gconv_forward<T: Float>(layer: &ResGnConv<T>, x: &Tensor<T>) -> drsi_tensor::Result<Tensor<T>> {
    if layer.scheme.n != 1 {
        return Err(drsi_tensor::Error::domain("gconv_forward", format!("order {} != 1", layer.scheme.n)));
    }
    let h = conv(&layer.phi_in, x)?;
    let p0 = ops::narrow_channels(&h, 0, layer.scheme.c)?;
    let q0 = ops::narrow_channels(&h, layer.scheme.c, layer.scheme.c)?;
    let f = depthwise(&layer.dw, &q0)?;
    conv(&layer.phi_out, &ops::mul(&p0, &f, None)?)
}

/// Plain recursive gated convolution `p_{k+1} = f_k ⊙ g_k(p_k)`, evaluated
/// directly on tensors with the layer's weights, ignoring `residual` and `lambda`.
pub fn gn_conv_forward<T: Float>(layer: &ResGnConv<T>, x: &Tensor<T>) -> drsi_tensor::Result<Tensor<T>> {
    let sc = &layer.scheme;
    let h = conv(&layer.phi_in, x)?;
    let mut p = ops::narrow_channels(&h, 0, sc.c_0)?;
    let q = ops::narrow_channels(&h, sc.c_0, sc.c_q)?;
    let fq = depthwise(&layer.dw, &q)?;
    let mut start = 0;
    for (k, &ck) in sc.c_k.iter().enumerate() {
        let f = ops::narrow_channels(&fq, start, ck)?;
        start += ck;
        let s = if k == 0 { p } else { conv_bn_silu(&layer.g[k - 1], &p)? };
        p = ops::mul(&s, &f, None)?;
    }
    conv(&layer.phi_out, &p)
}
