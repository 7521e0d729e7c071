//! Layer trait and the leaf layers everything else is assembled from.

use drsi_tensor::{Activation, BnMode, Ctx, Float, GradTarget, Initializer, Param, Result, Tensor, Var};

/// Default batch-norm epsilon.
pub const BN_EPS: f64 = 1e-3;
/// Default layer-norm epsilon.
pub const LN_EPS: f64 = 1e-6;

/// Anything that owns named parameters, visited in a fixed order.
pub trait Params<T: Float> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>));

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));
}

/// A single-input, single-output layer.
///
/// Every layer is scoped under its own absolute name, which prefixes its
/// parameter names and labels its profile row.
pub trait Layer<T: Float>: Params<T> + Send + Sync {
    fn name(&self) -> &str;

    fn forward(&self, cx: &mut Ctx<T>, x: &Var<T>) -> Result<Var<T>>;
}

/// Number of trainable scalars.
pub fn count_trainable<T: Float, L: Params<T> + ?Sized>(layer: &L) -> u64 {
    let mut n = 0;
    layer.visit(&mut |p| {
        if p.trainable() {
            n += p.numel() as u64;
        }
    });
    n
}

pub fn param_names<T: Float, L: Params<T> + ?Sized>(layer: &L) -> Vec<String> {
    let mut names = Vec::new();
    layer.visit(&mut |p| names.push(p.name().to_string()));
    names
}

/// Sets every parameter whose name starts with `prefix` to the constant `v`.
/// Returns how many parameters were touched.
pub fn fill_params<T: Float, L: Params<T> + ?Sized>(layer: &mut L, prefix: &str, v: f64) -> usize {
    let mut n = 0;
    layer.visit_mut(&mut |p| {
        if p.name().starts_with(prefix) {
            p.set_value(Tensor::full(p.shape(), T::lit(v))).expect("same shape");
            n += 1;
        }
    });
    n
}

/// Replaces the value of the parameter called `name`. Returns false if absent.
pub fn set_param<T: Float, L: Params<T> + ?Sized>(layer: &mut L, name: &str, value: Tensor<T>) -> Result<bool> {
    let mut out = Ok(false);
    let mut value = Some(value);
    layer.visit_mut(&mut |p| {
        if p.name() == name {
            if let Some(v) = value.take() {
                out = p.set_value(v).map(|_| true);
            }
        }
    });
    out
}

/// Runs an eval-mode forward without recording anything.
pub fn eval<T: Float, L: Layer<T> + ?Sized>(layer: &L, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut cx = Ctx::eager();
    layer.forward(&mut cx, &Var::from(x.clone()))?.tensor()
}

/// Gradient-check adapter for a 64-bit layer.
pub struct Checked<'a>(pub &'a mut dyn Layer<f64>);

impl GradTarget for Checked<'_> {
    fn forward(&self, cx: &mut Ctx<f64>, x: &Var<f64>) -> Result<Var<f64>> {
        self.0.forward(cx, x)
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
        self.0.visit_mut(f)
    }
}

fn join(prefix: &str, leaf: &str) -> String {
    format!("{prefix}.{leaf}")
}

pub struct Conv2d<T: Float> {
    pub name: String,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Float> Conv2d<T> {
    /// `same` padding (`k / 2`).
    pub fn new(init: &Initializer, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, bias: bool) -> Self {
        Conv2d {
            name: name.to_string(),
            weight: init.kaiming(join(name, "weight"), &[c_out, c_in, k, k]),
            bias: bias.then(|| init.constant(join(name, "bias"), &[c_out], 0.0, true)),
            stride,
            pad: k / 2,
        }
    }
}

impl<T: Float> Layer<T> for Conv2d<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&self, cx: &mut Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        cx.scoped(&self.name, |cx| {
            let w = cx.param(&self.weight);
            let b = self.bias.as_ref().map(|b| cx.param(b));
            cx.conv2d(x, &w, b.as_ref(), self.stride, self.pad)
        })
    }
}

impl<T: Float> Params<T> for Conv2d<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        self.bias.iter().for_each(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        self.bias.iter_mut().for_each(f);
    }
}

pub struct DepthwiseConv2d<T: Float> {
    pub name: String,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Float> DepthwiseConv2d<T> {
    pub fn new(init: &Initializer, name: &str, c: usize, k: usize, bias: bool) -> Self {
        DepthwiseConv2d {
            name: name.to_string(),
            weight: init.kaiming(join(name, "weight"), &[c, 1, k, k]),
            bias: bias.then(|| init.constant(join(name, "bias"), &[c], 0.0, true)),
            stride: 1,
            pad: k / 2,
        }
    }
}

impl<T: Float> Layer<T> for DepthwiseConv2d<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&self, cx: &mut Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        cx.scoped(&self.name, |cx| {
            let w = cx.param(&self.weight);
            let b = self.bias.as_ref().map(|b| cx.param(b));
            cx.depthwise_conv2d(x, &w, b.as_ref(), self.stride, self.pad)
        })
    }
}

impl<T: Float> Params<T> for DepthwiseConv2d<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        self.bias.iter().for_each(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        self.bias.iter_mut().for_each(f);
    }
}

/// Batch normalization, always applied with running statistics (inference mode).
pub struct BatchNorm2d<T: Float> {
    pub name: String,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub eps: f64,
}

impl<T: Float> BatchNorm2d<T> {
    pub fn new(init: &Initializer, name: &str, c: usize) -> Self {
        BatchNorm2d {
            name: name.to_string(),
            gamma: init.constant(join(name, "weight"), &[c], 1.0, true),
            beta: init.constant(join(name, "bias"), &[c], 0.0, true),
            running_mean: init.constant(join(name, "running_mean"), &[c], 0.0, false),
            running_var: init.constant(join(name, "running_var"), &[c], 1.0, false),
            eps: BN_EPS,
        }
    }
}

impl<T: Float> Layer<T> for BatchNorm2d<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&self, cx: &mut Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        cx.scoped(&self.name, |cx| {
            let g = cx.param(&self.gamma);
            let b = cx.param(&self.beta);
            let m = cx.param(&self.running_mean);
            let v = cx.param(&self.running_var);
            Ok(cx.batch_norm(x, &g, &b, &m, &v, self.eps, BnMode::Eval)?.0)
        })
    }
}

impl<T: Float> Params<T> for BatchNorm2d<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.gamma);
        f(&self.beta);
        f(&self.running_mean);
        f(&self.running_var);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

/// Layer normalization over channels at every spatial position.
pub struct LayerNorm2d<T: Float> {
    pub name: String,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub eps: f64,
}

impl<T: Float> LayerNorm2d<T> {
    pub fn new(init: &Initializer, name: &str, c: usize) -> Self {
        LayerNorm2d {
            name: name.to_string(),
            gamma: init.constant(join(name, "weight"), &[c], 1.0, true),
            beta: init.constant(join(name, "bias"), &[c], 0.0, true),
            eps: LN_EPS,
        }
    }
}

impl<T: Float> Layer<T> for LayerNorm2d<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&self, cx: &mut Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        cx.scoped(&self.name, |cx| {
            let g = cx.param(&self.gamma);
            let b = cx.param(&self.beta);
            cx.layer_norm(x, &g, &b, self.eps)
        })
    }
}

impl<T: Float> Params<T> for LayerNorm2d<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

/// Conv (no bias) → batch norm → SiLU, padding `k / 2`.
pub struct ConvBnSilu<T: Float> {
    pub name: String,
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

impl<T: Float> ConvBnSilu<T> {
    pub fn new(init: &Initializer, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        ConvBnSilu {
            name: name.to_string(),
            conv: Conv2d::new(init, &join(name, "conv"), c_in, c_out, k, stride, false),
            bn: BatchNorm2d::new(init, &join(name, "bn"), c_out),
        }
    }

    pub fn c_out(&self) -> usize {
        self.conv.weight.dims()[0]
    }
}

impl<T: Float> Layer<T> for ConvBnSilu<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&self, cx: &mut Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        cx.scoped(&self.name, |cx| {
            let y = self.conv.forward(cx, x)?;
            let y = self.bn.forward(cx, &y)?;
            cx.act(&y, Activation::Silu)
        })
    }
}

impl<T: Float> Params<T> for ConvBnSilu<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.conv.visit(f);
        self.bn.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv.visit_mut(f);
        self.bn.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use drsi_tensor::Shape;

    #[test]
    fn pointwise_conv_param_count() {
        let conv = Conv2d::<f32>::new(&Initializer::new(0), "c", 64, 128, 1, 1, true);
        assert_eq!(count_trainable(&conv), 8_320);
    }

    #[test]
    fn batch_norm_buffers_are_not_trainable() {
        let bn = BatchNorm2d::<f32>::new(&Initializer::new(0), "bn", 16);
        assert_eq!(count_trainable(&bn), 32);
        assert_eq!(param_names(&bn), ["bn.weight", "bn.bias", "bn.running_mean", "bn.running_var"]);
    }

    #[test]
    fn conv_bn_silu_keeps_spatial_size_and_names_params() {
        let layer = ConvBnSilu::<f32>::new(&Initializer::new(0), "stem", 3, 8, 3, 1);
        let y = eval(&layer, &Tensor::uniform(Shape::new(1, 3, 9, 7), 0, -1.0, 1.0)).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 8, 9, 7));
        assert_eq!(param_names(&layer)[0], "stem.conv.weight");
    }

    #[test]
    fn set_and_fill_params() {
        let mut conv = Conv2d::<f64>::new(&Initializer::new(0), "c", 2, 2, 1, 1, true);
        assert_eq!(fill_params(&mut conv, "c.weight", 0.0), 1);
        assert!(set_param(&mut conv, "c.bias", Tensor::full(Shape::new(2, 1, 1, 1), 2.5)).unwrap());
        assert!(!set_param(&mut conv, "nope", Tensor::zeros(Shape::new(2, 1, 1, 1))).unwrap());
        let y = eval(&conv, &Tensor::ones(Shape::new(1, 2, 2, 2))).unwrap();
        assert!(y.data().iter().all(|&v| v == 2.5));
    }
}
