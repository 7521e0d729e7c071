//! Named finite-difference gradient checks over every primitive, block, neck
//! style and the assembled miniature model.

use drsi_tensor::{
    shape_for_dims, Activation, BnMode, Ctx, GradCheck, GradReport, GradTarget, Stencil, Initializer, Param, PoolKind, Shape,
    Tensor, Var,
};

use crate::blocks::{Bottleneck, C3dr, Cbam, DrsiBlock, DrsiOptions, Focus, InvertedBottleneck, Spp, C3};
use crate::config::ModelConfig;
use crate::error::Result;
use crate::interaction::{Interaction, ResGnConv};
use crate::network::{Model, Neck};
use crate::nn::{ConvBnSilu, Layer, Params};
use crate::registry::{neck_styles, NeckOptions, Registry};

type TResult<T> = drsi_tensor::Result<T>;

/// Tolerance on the max relative error for single components.
pub const COMPONENT_TOLERANCE: f64 = 1e-4;
/// Tolerance for the end-to-end model.
pub const MODEL_TOLERANCE: f64 = 1e-3;

/// Three-point step for single layers.
const FINE_STEP: f64 = 1e-5;
/// Five-point step for composite networks, where gradients span many decades.
const COARSE_STEP: f64 = 1e-3;

pub struct GradSetup {
    pub target: Box<dyn GradTarget>,
    pub input: Tensor<f64>,
    pub tolerance: f64,
    pub max_coords: Option<usize>,
    pub step: f64,
    pub stencil: Stencil,
}

/// Builds a seeded gradient-check problem.
pub trait GradCase: Send + Sync {
    fn setup(&self, seed: u64) -> Result<GradSetup>;
}

impl<F: Fn(u64) -> Result<GradSetup> + Send + Sync> GradCase for F {
    fn setup(&self, seed: u64) -> Result<GradSetup> {
        self(seed)
    }
}

#[derive(Clone, Debug)]
pub struct GradOutcome {
    pub name: &'static str,
    pub report: GradReport,
    pub tolerance: f64,
}

impl GradOutcome {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error <= self.tolerance
    }
}

pub fn run_case(name: &'static str, case: &dyn GradCase, seed: u64) -> Result<GradOutcome> {
    let mut s = case.setup(seed)?;
    let check = GradCheck { seed, max_coords: s.max_coords, step: s.step, stencil: s.stencil, ..GradCheck::default() };
    let report = check.run(s.target.as_mut(), &s.input)?;
    Ok(GradOutcome { name, report, tolerance: s.tolerance })
}

type OpFn = dyn Fn(&mut Ctx<f64>, &Var<f64>, &[Var<f64>]) -> TResult<Var<f64>> + Send + Sync;

struct OpTarget {
    params: Vec<Param<f64>>,
    f: Box<OpFn>,
}

impl GradTarget for OpTarget {
    fn forward(&self, cx: &mut Ctx<f64>, x: &Var<f64>) -> TResult<Var<f64>> {
        let ps: Vec<Var<f64>> = self.params.iter().map(|p| cx.param(p)).collect();
        (self.f)(cx, x, &ps)
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
        self.params.iter_mut().for_each(f);
    }
}

struct LayerTarget(Box<dyn Layer<f64>>);

impl GradTarget for LayerTarget {
    fn forward(&self, cx: &mut Ctx<f64>, x: &Var<f64>) -> TResult<Var<f64>> {
        self.0.forward(cx, x)
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
        self.0.visit_mut(f)
    }
}

/// Lays several square power-of-two outputs side by side as one `(n, k, 1, 1)`
/// value. Pure data movement, so finite differences see every element.
fn flatten(cx: &mut Ctx<f64>, outs: &[Var<f64>]) -> TResult<Var<f64>> {
    let mut parts = Vec::with_capacity(outs.len());
    for o in outs {
        let mut v = o.clone();
        while v.shape().h > 1 {
            v = cx.space_to_depth(&v)?;
        }
        parts.push(v);
    }
    let refs: Vec<&Var<f64>> = parts.iter().collect();
    cx.concat(&refs)
}

/// Neck levels derived from one input by space-to-depth and channel slicing.
struct NeckTarget {
    neck: Neck<f64>,
}

impl NeckTarget {
    fn pyramid(&self, cx: &mut Ctx<f64>, x: &Var<f64>) -> TResult<Vec<Var<f64>>> {
        let mut levels = vec![x.clone()];
        for &c in &self.neck.widths[1..] {
            let d = cx.space_to_depth(levels.last().expect("non-empty"))?;
            levels.push(cx.narrow(&d, 0, c)?);
        }
        Ok(levels)
    }
}

impl GradTarget for NeckTarget {
    fn forward(&self, cx: &mut Ctx<f64>, x: &Var<f64>) -> TResult<Var<f64>> {
        let levels = self.pyramid(cx, x)?;
        let outs = self.neck.forward(cx, &levels)?;
        flatten(cx, &outs)
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
        self.neck.visit_mut(f)
    }
}

struct ModelTarget {
    model: Model<f64>,
}

impl GradTarget for ModelTarget {
    fn forward(&self, cx: &mut Ctx<f64>, x: &Var<f64>) -> TResult<Var<f64>> {
        let out = self.model.forward(cx, x)?;
        flatten(cx, &out.heads)
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
        self.model.visit_mut(f)
    }
}

/// Moves batch-norm running statistics away from their identity defaults.
fn perturb_statistics<P: Params<f64> + ?Sized>(layer: &mut P, seed: u64) {
    set_statistics(layer, seed, (0.5, 1.5));
}

/// Draws running means in `[-0.2, 0.2]` and running variances in `var`.
fn set_statistics<P: Params<f64> + ?Sized>(layer: &mut P, seed: u64, var: (f64, f64)) {
    let mut k = 0u64;
    layer.visit_mut(&mut |p| {
        let range = if p.name().ends_with("running_mean") {
            Some((-0.2, 0.2))
        } else if p.name().ends_with("running_var") {
            Some(var)
        } else {
            None
        };
        if let Some((lo, hi)) = range {
            k += 1;
            let v = Tensor::uniform(p.shape(), seed.wrapping_mul(31).wrapping_add(k), lo, hi);
            p.set_value(v).expect("same shape");
        }
    });
}

fn uniform_param(name: &str, dims: &[usize], seed: u64, lo: f64, hi: f64) -> Param<f64> {
    let shape = shape_for_dims(dims).expect("valid dims");
    Param::new(name, dims, Tensor::uniform(shape, seed, lo, hi), true).expect("matching shape")
}

fn input(shape: Shape, seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, seed.wrapping_add(1000), -1.0, 1.0)
}

fn op_case(
    shape: Shape,
    params: impl Fn(u64) -> Vec<Param<f64>> + Send + Sync + 'static,
    f: impl Fn(&mut Ctx<f64>, &Var<f64>, &[Var<f64>]) -> TResult<Var<f64>> + Send + Sync + Copy + 'static,
) -> Box<dyn GradCase> {
    Box::new(move |seed: u64| -> Result<GradSetup> {
        Ok(GradSetup {
            target: Box::new(OpTarget { params: params(seed), f: Box::new(f) }),
            input: input(shape, seed),
            tolerance: COMPONENT_TOLERANCE,
            max_coords: None,
            step: FINE_STEP,
            stencil: Stencil::ThreePoint,
        })
    })
}

fn no_params(_: u64) -> Vec<Param<f64>> {
    Vec::new()
}

fn layer_case(
    shape: Shape,
    max_coords: Option<usize>,
    build: impl Fn(&Initializer) -> Result<Box<dyn Layer<f64>>> + Send + Sync + 'static,
) -> Box<dyn GradCase> {
    Box::new(move |seed: u64| -> Result<GradSetup> {
        let mut layer = build(&Initializer::new(seed))?;
        perturb_statistics(layer.as_mut(), seed);
        Ok(GradSetup {
            target: Box::new(LayerTarget(layer)),
            input: input(shape, seed),
            tolerance: COMPONENT_TOLERANCE,
            max_coords,
            step: FINE_STEP,
            stencil: Stencil::ThreePoint,
        })
    })
}

fn neck_case(style: &'static str) -> Box<dyn GradCase> {
    Box::new(move |seed: u64| -> Result<GradSetup> {
        let cfg = ModelConfig::miniature();
        let styles = neck_styles::<f64>();
        let opts = NeckOptions {
            sam_top_down: cfg.sam_kernels.top_down,
            sam_bottom_up: cfg.sam_kernels.bottom_up,
            cbam_reduction: cfg.cbam_reduction,
            drsi: cfg.drsi_options(),
        };
        let widths = [8, 16, 24, 32];
        let mut neck = Neck::new(&Initializer::new(seed), "neck", styles.get(style)?.as_ref(), &widths, 1, &opts)?;
        perturb_statistics(&mut neck, seed);
        let x = input(Shape::new(1, widths[0], 8, 8), seed);
        Ok(GradSetup {
            target: Box::new(NeckTarget { neck }),
            input: x,
            tolerance: COMPONENT_TOLERANCE,
            max_coords: Some(400),
            step: COARSE_STEP,
            stencil: Stencil::FivePoint,
        })
    })
}

fn model_case(seed: u64) -> Result<GradSetup> {
    let mut model = Model::<f64>::build(&ModelConfig::miniature(), seed)?;
    set_statistics(&mut model, seed, (0.5, 1.5));
    let x = Tensor::uniform(Shape::new(1, 3, 64, 64), seed.wrapping_add(1000), 0.0, 1.0);
    Ok(GradSetup {
        target: Box::new(ModelTarget { model }),
        input: x,
        tolerance: MODEL_TOLERANCE,
        max_coords: Some(300),
        step: COARSE_STEP,
        stencil: Stencil::FivePoint,
    })
}

fn boxed(l: impl Layer<f64> + 'static) -> Result<Box<dyn Layer<f64>>> {
    Ok(Box::new(l))
}

/// Every gradient check, keyed by name.
pub fn grad_cases() -> Registry<Box<dyn GradCase>> {
    let mut r: Registry<Box<dyn GradCase>> = Registry::new("gradient check");
    let s = Shape::new(2, 3, 5, 5);

    r.register(
        "op.conv2d",
        op_case(
            s,
            |t| vec![Initializer::new(t).kaiming("w", &[4, 3, 3, 3]), uniform_param("b", &[4], t, -0.5, 0.5)],
            |cx, x, p| cx.conv2d(x, &p[0], Some(&p[1]), 2, 1),
        ),
    );
    r.register(
        "op.depthwise_conv2d",
        op_case(
            Shape::new(2, 3, 6, 6),
            |t| vec![Initializer::new(t).kaiming("w", &[3, 1, 7, 7]), uniform_param("b", &[3], t, -0.5, 0.5)],
            |cx, x, p| cx.depthwise_conv2d(x, &p[0], Some(&p[1]), 1, 3),
        ),
    );
    r.register(
        "op.batch_norm",
        op_case(
            s,
            |t| {
                vec![
                    uniform_param("g", &[3], t, 0.5, 1.5),
                    uniform_param("b", &[3], t + 1, -0.5, 0.5),
                    Param::new("m", &[3], Tensor::uniform(Shape::new(3, 1, 1, 1), t + 2, -0.5, 0.5), false).expect("shape"),
                    Param::new("v", &[3], Tensor::uniform(Shape::new(3, 1, 1, 1), t + 3, 0.5, 2.0), false).expect("shape"),
                ]
            },
            |cx, x, p| Ok(cx.batch_norm(x, &p[0], &p[1], &p[2], &p[3], 1e-3, BnMode::Eval)?.0),
        ),
    );
    r.register(
        "op.layer_norm",
        op_case(
            s,
            |t| vec![uniform_param("g", &[3], t, 0.5, 1.5), uniform_param("b", &[3], t + 1, -0.5, 0.5)],
            |cx, x, p| cx.layer_norm(x, &p[0], &p[1], 1e-6),
        ),
    );
    r.register("op.silu", op_case(s, no_params, |cx, x, _| cx.act(x, Activation::Silu)));
    r.register("op.gelu", op_case(s, no_params, |cx, x, _| cx.act(x, Activation::Gelu)));
    r.register("op.sigmoid", op_case(s, no_params, |cx, x, _| cx.act(x, Activation::Sigmoid)));
    r.register("op.relu", op_case(s, no_params, |cx, x, _| cx.act(x, Activation::Relu)));
    r.register(
        "op.add",
        op_case(s, |t| vec![uniform_param("a", &[2, 3, 5, 5], t, -1.0, 1.0)], |cx, x, p| cx.add(x, &p[0])),
    );
    r.register(
        "op.mul",
        op_case(s, |t| vec![uniform_param("a", &[2, 3, 5, 5], t, -1.0, 1.0)], |cx, x, p| {
            let y = cx.mul(x, &p[0])?;
            cx.mul(&y, x)
        }),
    );
    r.register("op.scale", op_case(s, no_params, |cx, x, _| cx.scale(x, -1.0 / 3.0)));
    r.register(
        "op.broadcast_mul",
        op_case(
            s,
            |t| vec![uniform_param("c", &[2, 3, 1, 1], t, -1.0, 1.0), uniform_param("p", &[2, 1, 5, 5], t + 1, -1.0, 1.0)],
            |cx, x, p| {
                let y = cx.broadcast_mul(x, &p[0])?;
                cx.broadcast_mul(&y, &p[1])
            },
        ),
    );
    r.register(
        "op.concat_narrow_split",
        op_case(s, no_params, |cx, x, _| {
            let a = cx.narrow(x, 1, 2)?;
            let parts = cx.split(x, &[1, 2])?;
            let b = cx.mul(&parts[1], &a)?;
            cx.concat(&[&b, &parts[0], x])
        }),
    );
    r.register("op.upsample2x", op_case(s, no_params, |cx, x, _| cx.upsample2x(x)));
    r.register("op.max_pool", op_case(Shape::new(2, 3, 7, 7), no_params, |cx, x, _| cx.max_pool(x, 5, 1, 2)));
    r.register("op.space_to_depth", op_case(Shape::new(2, 3, 6, 6), no_params, |cx, x, _| cx.space_to_depth(x)));
    r.register(
        "op.global_pool",
        op_case(s, no_params, |cx, x, _| {
            let a = cx.global_pool(x, PoolKind::Mean)?;
            let m = cx.global_pool(x, PoolKind::Max)?;
            cx.concat(&[&a, &m])
        }),
    );
    r.register(
        "op.channel_pool",
        op_case(s, no_params, |cx, x, _| {
            let a = cx.channel_pool(x, PoolKind::Mean)?;
            let m = cx.channel_pool(x, PoolKind::Max)?;
            cx.concat(&[&a, &m])
        }),
    );
    r.register("op.sum", op_case(s, no_params, |cx, x, _| cx.sum(x)));

    let x8 = Shape::new(1, 8, 6, 6);
    let drsi = DrsiOptions::default();
    r.register("layer.conv_bn_silu", layer_case(x8, None, |i| boxed(ConvBnSilu::new(i, "cbs", 8, 8, 3, 2))));
    r.register("layer.focus", layer_case(Shape::new(1, 3, 6, 6), None, |i| boxed(Focus::new(i, "focus", 3, 8, 3))));
    r.register("layer.spp", layer_case(Shape::new(1, 8, 5, 5), Some(400), |i| boxed(Spp::new(i, "spp", 8, 8))));
    r.register("layer.bottleneck", layer_case(x8, Some(400), |i| boxed(Bottleneck::new(i, "b", 8, true))));
    r.register("layer.c3", layer_case(x8, Some(400), |i| boxed(C3::new(i, "c3", 8, 16, 2, false))));
    r.register(
        "layer.inverted_bottleneck",
        layer_case(x8, Some(400), |i| boxed(InvertedBottleneck::new(i, "ib", 8, 4))),
    );
    for (name, n) in [("layer.res_gn_conv.1", 1), ("layer.res_gn_conv.2", 2), ("layer.res_gn_conv.3", 3)] {
        r.register(name, layer_case(x8, Some(400), move |i| boxed(ResGnConv::new(i, "rgc", 8, n, 3.0, true)?)));
    }
    r.register(
        "layer.gn_conv",
        layer_case(x8, Some(400), |i| boxed(ResGnConv::with_interaction(i, "gc", 8, 3, 3.0, Interaction::GnConv)?)),
    );
    r.register("layer.drsi_block", layer_case(x8, Some(400), move |i| boxed(DrsiBlock::new(i, "dr", 8, &drsi)?)));
    r.register("layer.c3dr", layer_case(x8, Some(400), move |i| boxed(C3dr::new(i, "c3dr", 8, 16, 2, &drsi)?)));
    r.register(
        "layer.cbam",
        layer_case(Shape::new(1, 16, 6, 6), Some(400), |i| boxed(Cbam::new(i, "cbam", 16, 4, 7)?)),
    );
    for style in ["pan", "cbam_pan", "asi_pan"] {
        let name: &'static str = match style {
            "pan" => "neck.pan",
            "cbam_pan" => "neck.cbam_pan",
            _ => "neck.asi_pan",
        };
        r.register(name, neck_case(style));
    }
    r.register("model.miniature", Box::new(model_case));
    r
}
