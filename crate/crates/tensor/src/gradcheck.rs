//! Central finite-difference oracle for reverse-mode gradients.

use rand::seq::index;
use rand::SeedableRng;
use rand_xoshiro::SplitMix64;

use crate::autodiff::{Ctx, Var};
use crate::error::{Error, Result};
use crate::param::Param;
use crate::tensor::Tensor;

/// A differentiable function of one input tensor and, optionally, trainable parameters.
pub trait GradTarget {
    fn forward(&self, cx: &mut Ctx<f64>, x: &Var<f64>) -> Result<Var<f64>>;

    /// Visits every parameter in a fixed order. Targets without parameters keep the default.
    fn visit_params_mut(&mut self, _f: &mut dyn FnMut(&mut Param<f64>)) {}
}

/// Adapts a closure into a parameter-free [`GradTarget`].
pub struct FnTarget<F>(pub F);

impl<F> GradTarget for FnTarget<F>
where
    F: Fn(&mut Ctx<f64>, &Var<f64>) -> Result<Var<f64>>,
{
    fn forward(&self, cx: &mut Ctx<f64>, x: &Var<f64>) -> Result<Var<f64>> {
        (self.0)(cx, x)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Worst {
    /// `"input"` or the parameter name.
    pub leaf: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Coordinates whose stencil crossed a relu or max-pooling kink.
    pub coords_skipped: usize,
    pub worst: Option<Worst>,
}

/// Central difference formula.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`, truncation `O(h²)`.
    ThreePoint,
    /// `(8(f(x+h) − f(x−h)) − (f(x+2h) − f(x−2h))) / 12h`, truncation `O(h⁴)`.
    FivePoint,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Base step; the actual step at value `v` is `step · max(1, |v|)`.
    pub step: f64,
    pub stencil: Stencil,
    /// Skip coordinates whose perturbed evaluations take a different branch
    /// than the unperturbed one.
    pub skip_kinks: bool,
    /// Check at most this many coordinates (sampled per leaf in proportion to size).
    pub max_coords: Option<usize>,
    /// Also check trainable parameters, not just the input.
    pub params: bool,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { step: 1e-5, stencil: Stencil::ThreePoint, skip_kinks: true, max_coords: None, params: true, seed: 0 }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Max relative error between reverse-mode and finite-difference gradients of
/// `f` at `x`, for the input only.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, seed: u64) -> Result<f64>
where
    F: Fn(&mut Ctx<f64>, &Var<f64>) -> Result<Var<f64>>,
{
    let cfg = GradCheck { seed, ..GradCheck::default() };
    Ok(cfg.run(&mut FnTarget(f), x)?.max_rel_error)
}

/// Vector-Jacobian product `rᵀ·∂f/∂x` at `x`.
pub fn vjp(target: &dyn GradTarget, x: &Tensor<f64>, r: &Tensor<f64>) -> Result<Tensor<f64>> {
    let mut cx = Ctx::record();
    let xv = cx.input(x.clone());
    let y = target.forward(&mut cx, &xv)?;
    let g = cx.backward(&y, r)?;
    Ok(g.wrt(&xv))
}

fn eager(target: &dyn GradTarget, x: &Tensor<f64>) -> Result<(Tensor<f64>, u64)> {
    let mut cx = Ctx::eager();
    let y = target.forward(&mut cx, &Var::from(x.clone()))?;
    Ok((y.tensor()?, cx.branch_signature()))
}

/// `Σ_j r_j (a_j − b_j)`, differencing before weighting so that untouched outputs
/// contribute exactly zero.
fn weighted_diff(r: &Tensor<f64>, a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    r.data().iter().zip(a.data().iter().zip(b.data())).map(|(&w, (&p, &m))| w * (p - m)).sum()
}


fn with_param<R>(target: &mut dyn GradTarget, idx: usize, f: impl FnOnce(&mut Param<f64>) -> R) -> R {
    let mut f = Some(f);
    let mut out = None;
    let mut i = 0;
    target.visit_params_mut(&mut |p| {
        if p.trainable() {
            if i == idx {
                out = Some((f.take().expect("visited once"))(p));
            }
            i += 1;
        }
    });
    out.expect("parameter index in range")
}

impl GradCheck {
    fn offsets(&self) -> &'static [f64] {
        match self.stencil {
            Stencil::ThreePoint => &[1.0, -1.0],
            Stencil::FivePoint => &[1.0, -1.0, 2.0, -2.0],
        }
    }

    /// Derivative estimate from outputs at `v + k·h` for each offset `k`, or
    /// `None` when any of them leaves the branch of `base`. `span` is the
    /// representable distance between the `±h` points.
    fn estimate(&self, r: &Tensor<f64>, base: u64, span: f64, outs: &[(Tensor<f64>, u64)]) -> Option<f64> {
        if self.skip_kinks && outs.iter().any(|(_, b)| *b != base) {
            return None;
        }
        let d1 = weighted_diff(r, &outs[0].0, &outs[1].0);
        Some(match self.stencil {
            Stencil::ThreePoint => d1 / span,
            Stencil::FivePoint => (8.0 * d1 - weighted_diff(r, &outs[2].0, &outs[3].0)) / (6.0 * span),
        })
    }

    pub fn run(&self, target: &mut dyn GradTarget, x: &Tensor<f64>) -> Result<GradReport> {
        let (y0, base) = eager(target, x)?;
        let (y1, base1) = eager(target, x)?;
        if !y0.bit_eq(&y1) || base != base1 {
            return Err(Error::NonDeterministic("two evaluations at the same point differ".into()));
        }
        let r = Tensor::uniform(y0.shape(), self.seed ^ 0x9e37_79b9_7f4a_7c15, -1.0, 1.0);

        let mut cx = Ctx::record();
        let xv = cx.input(x.clone());
        let y = target.forward(&mut cx, &xv)?;
        let grads = cx.backward(&y, &r)?;

        // Leaves: the input, then trainable parameters in visit order.
        let mut leaves: Vec<(String, Tensor<f64>)> = vec![("input".into(), grads.wrt(&xv))];
        if self.params {
            target.visit_params_mut(&mut |p| {
                if p.trainable() {
                    let g = grads.param(p.name()).unwrap_or_else(|| Tensor::zeros(p.shape()));
                    leaves.push((p.name().to_string(), g));
                }
            });
        }
        let total: usize = leaves.iter().map(|(_, g)| g.numel()).sum();
        let mut rng = SplitMix64::seed_from_u64(self.seed);

        let mut report = GradReport { max_rel_error: 0.0, coords_checked: 0, coords_skipped: 0, worst: None };
        for (li, (name, analytic)) in leaves.iter().enumerate() {
            let n = analytic.numel();
            let coords: Vec<usize> = match self.max_coords {
                Some(cap) if total > cap => {
                    let share = ((cap as f64 * n as f64 / total as f64).ceil() as usize).max(2).min(n);
                    let mut v = index::sample(&mut rng, n, share).into_vec();
                    v.sort_unstable();
                    v
                }
                _ => (0..n).collect(),
            };
            let orig = if li == 0 { x.clone() } else { with_param(target, li - 1, |prm| prm.value().clone()) };
            for i in coords {
                let v = orig.data()[i];
                let h = self.step * v.abs().max(1.0);
                let mut outs = Vec::with_capacity(4);
                for &k in self.offsets() {
                    let moved = orig.with_value(i, v + k * h);
                    let out = if li == 0 {
                        eager(target, &moved)
                    } else {
                        with_param(target, li - 1, |prm| prm.set_value(moved))?;
                        eager(target, x)
                    };
                    outs.push(out);
                }
                if li > 0 {
                    with_param(target, li - 1, |prm| prm.set_value(orig.clone()))?;
                }
                let outs = outs.into_iter().collect::<Result<Vec<_>>>()?;
                let Some(numeric) = self.estimate(&r, base, (v + h) - (v - h), &outs) else {
                    report.coords_skipped += 1;
                    continue;
                };
                let a = analytic.data()[i];
                let err = relative_error(a, numeric);
                report.coords_checked += 1;
                if err > report.max_rel_error || report.worst.is_none() {
                    report.max_rel_error = report.max_rel_error.max(err);
                    report.worst = Some(Worst { leaf: name.clone(), index: i, analytic: a, numeric });
                }
            }
        }
        Ok(report)
    }
}
