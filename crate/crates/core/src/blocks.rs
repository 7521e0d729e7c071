//! Composite blocks: Focus, SPP, C3, the inverted bottleneck, the DRSI block,
//! the cross-stage C3DR module and CBAM attention.

use drsi_tensor::{Activation, Ctx, Float, Initializer, Param, PoolKind, Tensor, Var};

use crate::error::{Error, Result};
use crate::interaction::{Interaction, ResGnConv};
use crate::nn::{Params, BatchNorm2d, Conv2d, ConvBnSilu, DepthwiseConv2d, Layer, LayerNorm2d};

type TResult<T> = drsi_tensor::Result<T>;

fn check_channels(op: &'static str, x: &Var<impl Float>, c: usize) -> TResult<()> {
    if x.shape().c != c {
        return Err(drsi_tensor::Error::shape(op, format!("expected {c} channels, got {}", x.shape())));
    }
    Ok(())
}

/// Space-to-depth (2×2) followed by a ConvBnSilu.
pub struct Focus<T: Float> {
    pub name: String,
    pub conv: ConvBnSilu<T>,
}

impl<T: Float> Focus<T> {
    pub fn new(init: &Initializer, name: &str, c_in: usize, c_out: usize, k: usize) -> Self {
        Focus { name: name.into(), conv: ConvBnSilu::new(init, &format!("{name}.conv"), 4 * c_in, c_out, k, 1) }
    }
}

impl<T: Float> Layer<T> for Focus<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&self, cx: &mut Ctx<T>, x: &Var<T>) -> TResult<Var<T>> {
        cx.scoped(&self.name, |cx| {
            let y = cx.space_to_depth(x)?;
            self.conv.forward(cx, &y)
        })
    }
}

impl<T: Float> Params<T> for Focus<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.conv.visit(f)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv.visit_mut(f)
    }
}

pub const SPP_KERNELS: [usize; 3] = [5, 9, 13];

/// Spatial pyramid pooling: 1×1 reduce to `c_in / 2`, identity plus stride-1 max
/// pools of 5, 9 and 13, concat, 1×1 out.
pub struct Spp<T: Float> {
    pub name: String,
    pub cv1: ConvBnSilu<T>,
    pub cv2: ConvBnSilu<T>,
}

impl<T: Float> Spp<T> {
    pub fn new(init: &Initializer, name: &str, c_in: usize, c_out: usize) -> Self {
        let c_ = c_in / 2;
        Spp {
            name: name.into(),
            cv1: ConvBnSilu::new(init, &format!("{name}.cv1"), c_in, c_, 1, 1),
            cv2: ConvBnSilu::new(init, &format!("{name}.cv2"), c_ * (SPP_KERNELS.len() + 1), c_out, 1, 1),
        }
    }
}

impl<T: Float> Layer<T> for Spp<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&self, cx: &mut Ctx<T>, x: &Var<T>) -> TResult<Var<T>> {
        cx.scoped(&self.name, |cx| {
            let y = self.cv1.forward(cx, x)?;
            let pools = SPP_KERNELS.iter().map(|&k| cx.max_pool(&y, k, 1, k / 2)).collect::<TResult<Vec<_>>>()?;
            let cat = cx.concat(&[&y, &pools[0], &pools[1], &pools[2]])?;
            self.cv2.forward(cx, &cat)
        })
    }
}

impl<T: Float> Params<T> for Spp<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.cv1.visit(f);
        self.cv2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.cv1.visit_mut(f);
        self.cv2.visit_mut(f);
    }
}

/// 1×1 then 3×3 ConvBnSilu, with an optional identity skip.
pub struct Bottleneck<T: Float> {
    pub name: String,
    pub cv1: ConvBnSilu<T>,
    pub cv2: ConvBnSilu<T>,
    pub shortcut: bool,
}

impl<T: Float> Bottleneck<T> {
    pub fn new(init: &Initializer, name: &str, c: usize, shortcut: bool) -> Self {
        Bottleneck {
            name: name.into(),
            cv1: ConvBnSilu::new(init, &format!("{name}.cv1"), c, c, 1, 1),
            cv2: ConvBnSilu::new(init, &format!("{name}.cv2"), c, c, 3, 1),
            shortcut,
        }
    }
}

impl<T: Float> Layer<T> for Bottleneck<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&self, cx: &mut Ctx<T>, x: &Var<T>) -> TResult<Var<T>> {
        cx.scoped(&self.name, |cx| {
            let y = self.cv1.forward(cx, x)?;
            let y = self.cv2.forward(cx, &y)?;
            if self.shortcut {
                cx.add(x, &y)
            } else {
                Ok(y)
            }
        })
    }
}

impl<T: Float> Params<T> for Bottleneck<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.cv1.visit(f);
        self.cv2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.cv1.visit_mut(f);
        self.cv2.visit_mut(f);
    }
}

/// CSP bottleneck with three convolutions: `cv3(concat[m(cv1(x)), cv2(x)])`.
pub struct C3<T: Float> {
    pub name: String,
    pub cv1: ConvBnSilu<T>,
    pub cv2: ConvBnSilu<T>,
    pub m: Vec<Bottleneck<T>>,
    pub cv3: ConvBnSilu<T>,
}

impl<T: Float> C3<T> {
    pub fn new(init: &Initializer, name: &str, c_in: usize, c_out: usize, depth: usize, shortcut: bool) -> Self {
        let c_ = c_out / 2;
        C3 {
            name: name.into(),
            cv1: ConvBnSilu::new(init, &format!("{name}.cv1"), c_in, c_, 1, 1),
            cv2: ConvBnSilu::new(init, &format!("{name}.cv2"), c_in, c_, 1, 1),
            m: (0..depth).map(|i| Bottleneck::new(init, &format!("{name}.m.{i}"), c_, shortcut)).collect(),
            cv3: ConvBnSilu::new(init, &format!("{name}.cv3"), 2 * c_, c_out, 1, 1),
        }
    }
}

impl<T: Float> Layer<T> for C3<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&self, cx: &mut Ctx<T>, x: &Var<T>) -> TResult<Var<T>> {
        cx.scoped(&self.name, |cx| {
            let mut a = self.cv1.forward(cx, x)?;
            for b in &self.m {
                a = b.forward(cx, &a)?;
            }
            let b = self.cv2.forward(cx, x)?;
            let cat = cx.concat(&[&a, &b])?;
            self.cv3.forward(cx, &cat)
        })
    }
}

impl<T: Float> Params<T> for C3<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.cv1.visit(f);
        self.cv2.visit(f);
        self.m.iter().for_each(|b| b.visit(f));
        self.cv3.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.cv1.visit_mut(f);
        self.cv2.visit_mut(f);
        self.m.iter_mut().for_each(|b| b.visit_mut(f));
        self.cv3.visit_mut(f);
    }
}

/// Pre-norm inverted bottleneck:
/// `x + c2(gelu(bn3(d(gelu(bn2(c1(bn1(x))))))))` with a 3×3 depthwise `d`.
pub struct InvertedBottleneck<T: Float> {
    pub name: String,
    pub c: usize,
    pub bn1: BatchNorm2d<T>,
    pub c1: Conv2d<T>,
    pub bn2: BatchNorm2d<T>,
    pub d: DepthwiseConv2d<T>,
    pub bn3: BatchNorm2d<T>,
    pub c2: Conv2d<T>,
}

impl<T: Float> InvertedBottleneck<T> {
    pub fn new(init: &Initializer, name: &str, c: usize, expansion: usize) -> Self {
        let e = c * expansion;
        InvertedBottleneck {
            name: name.into(),
            c,
            bn1: BatchNorm2d::new(init, &format!("{name}.bn1"), c),
            c1: Conv2d::new(init, &format!("{name}.c1"), c, e, 1, 1, true),
            bn2: BatchNorm2d::new(init, &format!("{name}.bn2"), e),
            d: DepthwiseConv2d::new(init, &format!("{name}.d"), e, 3, true),
            bn3: BatchNorm2d::new(init, &format!("{name}.bn3"), e),
            c2: Conv2d::new(init, &format!("{name}.c2"), e, c, 1, 1, true),
        }
    }
}

impl<T: Float> Layer<T> for InvertedBottleneck<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&self, cx: &mut Ctx<T>, x: &Var<T>) -> TResult<Var<T>> {
        cx.scoped(&self.name, |cx| {
            check_channels("inverted_bottleneck", x, self.c)?;
            let y = self.bn1.forward(cx, x)?;
            let y = self.c1.forward(cx, &y)?;
            let y = self.bn2.forward(cx, &y)?;
            let y = cx.act(&y, Activation::Gelu)?;
            let y = self.d.forward(cx, &y)?;
            let y = self.bn3.forward(cx, &y)?;
            let y = cx.act(&y, Activation::Gelu)?;
            let y = self.c2.forward(cx, &y)?;
            cx.add(x, &y)
        })
    }
}

impl<T: Float> Params<T> for InvertedBottleneck<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.bn1.visit(f);
        self.c1.visit(f);
        self.bn2.visit(f);
        self.d.visit(f);
        self.bn3.visit(f);
        self.c2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.bn1.visit_mut(f);
        self.c1.visit_mut(f);
        self.bn2.visit_mut(f);
        self.d.visit_mut(f);
        self.bn3.visit_mut(f);
        self.c2.visit_mut(f);
    }
}

/// Settings shared by every DRSI block of a model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DrsiOptions {
    pub order: usize,
    pub lambda: f64,
    pub expansion: usize,
    pub interaction: Interaction,
}

impl Default for DrsiOptions {
    fn default() -> Self {
        DrsiOptions { order: 2, lambda: 3.0, expansion: 4, interaction: Interaction::ResGnConv }
    }
}

/// `y = I + rgc(LN(I))` with `I` the inverted bottleneck output.
pub struct DrsiBlock<T: Float> {
    pub name: String,
    pub invbn: InvertedBottleneck<T>,
    pub ln: LayerNorm2d<T>,
    pub rgc: ResGnConv<T>,
}

impl<T: Float> DrsiBlock<T> {
    pub fn new(init: &Initializer, name: &str, c: usize, opts: &DrsiOptions) -> Result<Self> {
        Ok(DrsiBlock {
            name: name.into(),
            invbn: InvertedBottleneck::new(init, &format!("{name}.invbn"), c, opts.expansion),
            ln: LayerNorm2d::new(init, &format!("{name}.ln"), c),
            rgc: ResGnConv::with_interaction(init, &format!("{name}.rgc"), c, opts.order, opts.lambda, opts.interaction)?,
        })
    }
}

impl<T: Float> Layer<T> for DrsiBlock<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&self, cx: &mut Ctx<T>, x: &Var<T>) -> TResult<Var<T>> {
        cx.scoped(&self.name, |cx| {
            let i = self.invbn.forward(cx, x)?;
            let y = self.ln.forward(cx, &i)?;
            let y = self.rgc.forward(cx, &y)?;
            cx.add(&i, &y)
        })
    }
}

impl<T: Float> Params<T> for DrsiBlock<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.invbn.visit(f);
        self.ln.visit(f);
        self.rgc.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.invbn.visit_mut(f);
        self.ln.visit_mut(f);
        self.rgc.visit_mut(f);
    }
}

/// Cross-stage module: `conv_final(concat[conv_main(x), DR_n(.. DR_1(conv_cross(x)))])`.
pub struct C3dr<T: Float> {
    pub name: String,
    pub c_in: usize,
    pub conv_cross: ConvBnSilu<T>,
    pub conv_main: ConvBnSilu<T>,
    pub blocks: Vec<DrsiBlock<T>>,
    pub conv_final: ConvBnSilu<T>,
}

impl<T: Float> C3dr<T> {
    pub fn new(init: &Initializer, name: &str, c_in: usize, c_out: usize, depth: usize, opts: &DrsiOptions) -> Result<Self> {
        if !c_out.is_multiple_of(2) || depth == 0 {
            return Err(Error::config(format!("{name}: C3DR needs an even width and at least one block")));
        }
        let half = c_out / 2;
        Ok(C3dr {
            name: name.into(),
            c_in,
            conv_cross: ConvBnSilu::new(init, &format!("{name}.conv_cross"), c_in, half, 1, 1),
            conv_main: ConvBnSilu::new(init, &format!("{name}.conv_main"), c_in, half, 1, 1),
            blocks: (0..depth)
                .map(|i| DrsiBlock::new(init, &format!("{name}.blocks.{i}"), half, opts))
                .collect::<Result<_>>()?,
            conv_final: ConvBnSilu::new(init, &format!("{name}.conv_final"), c_out, c_out, 1, 1),
        })
    }
}

impl<T: Float> Layer<T> for C3dr<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&self, cx: &mut Ctx<T>, x: &Var<T>) -> TResult<Var<T>> {
        cx.scoped(&self.name, |cx| {
            check_channels("c3dr", x, self.c_in)?;
            let mut cross = self.conv_cross.forward(cx, x)?;
            let main = self.conv_main.forward(cx, x)?;
            for b in &self.blocks {
                cross = b.forward(cx, &cross)?;
            }
            let cat = cx.concat(&[&main, &cross])?;
            self.conv_final.forward(cx, &cat)
        })
    }
}

impl<T: Float> Params<T> for C3dr<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.conv_cross.visit(f);
        self.conv_main.visit(f);
        self.blocks.iter().for_each(|b| b.visit(f));
        self.conv_final.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv_cross.visit_mut(f);
        self.conv_main.visit_mut(f);
        self.blocks.iter_mut().for_each(|b| b.visit_mut(f));
        self.conv_final.visit_mut(f);
    }
}

pub const CBAM_REDUCTION: usize = 16;

/// Channel attention (shared MLP over average- and max-pooled descriptors)
/// followed by spatial attention (conv over channel-mean and channel-max maps).
pub struct Cbam<T: Float> {
    pub name: String,
    pub c: usize,
    pub fc1: Conv2d<T>,
    pub fc2: Conv2d<T>,
    pub sam: Conv2d<T>,
}

impl<T: Float> Cbam<T> {
    pub fn new(init: &Initializer, name: &str, c: usize, reduction: usize, sam_kernel: usize) -> Result<Self> {
        if reduction == 0 || c < reduction {
            return Err(Error::config(format!("{name}: {c} channels is fewer than the reduction ratio {reduction}")));
        }
        if sam_kernel.is_multiple_of(2) {
            return Err(Error::config(format!("{name}: spatial attention kernel must be odd, got {sam_kernel}")));
        }
        let hidden = (c / reduction).max(1);
        Ok(Cbam {
            name: name.into(),
            c,
            fc1: Conv2d::new(init, &format!("{name}.cam.fc1"), c, hidden, 1, 1, true),
            fc2: Conv2d::new(init, &format!("{name}.cam.fc2"), hidden, c, 1, 1, true),
            sam: Conv2d::new(init, &format!("{name}.sam"), 2, 1, sam_kernel, 1, true),
        })
    }

    fn mlp(&self, cx: &mut Ctx<T>, v: &Var<T>) -> TResult<Var<T>> {
        let h = self.fc1.forward(cx, v)?;
        let h = cx.act(&h, Activation::Relu)?;
        self.fc2.forward(cx, &h)
    }

    /// Returns `(output, channel map, spatial map)`.
    fn run(&self, cx: &mut Ctx<T>, x: &Var<T>) -> TResult<(Var<T>, Var<T>, Var<T>)> {
        check_channels("cbam", x, self.c)?;
        let avg = cx.global_pool(x, PoolKind::Mean)?;
        let max = cx.global_pool(x, PoolKind::Max)?;
        let a = self.mlp(cx, &avg)?;
        let b = self.mlp(cx, &max)?;
        let logits = cx.add(&a, &b)?;
        let cam = cx.act(&logits, Activation::Sigmoid)?;
        let y = cx.broadcast_mul(x, &cam)?;
        let mean = cx.channel_pool(&y, PoolKind::Mean)?;
        let max = cx.channel_pool(&y, PoolKind::Max)?;
        let desc = cx.concat(&[&mean, &max])?;
        let s = self.sam.forward(cx, &desc)?;
        let sam = cx.act(&s, Activation::Sigmoid)?;
        let out = cx.broadcast_mul(&y, &sam)?;
        Ok((out, cam, sam))
    }

    /// Eager forward that also returns the channel and spatial attention maps.
    pub fn attention_maps(&self, x: &Tensor<T>) -> TResult<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let mut cx = Ctx::eager();
        let (y, cam, sam) = self.run(&mut cx, &Var::from(x.clone()))?;
        Ok((y.tensor()?, cam.tensor()?, sam.tensor()?))
    }
}

impl<T: Float> Layer<T> for Cbam<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&self, cx: &mut Ctx<T>, x: &Var<T>) -> TResult<Var<T>> {
        cx.scoped(&self.name, |cx| Ok(self.run(cx, x)?.0))
    }
}

impl<T: Float> Params<T> for Cbam<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.fc1.visit(f);
        self.fc2.visit(f);
        self.sam.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.fc1.visit_mut(f);
        self.fc2.visit_mut(f);
        self.sam.visit_mut(f);
    }
}

/// Layers applied one after another under a common name.
pub struct Sequential<T: Float> {
    pub name: String,
    pub layers: Vec<Box<dyn Layer<T>>>,
}

impl<T: Float> Layer<T> for Sequential<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&self, cx: &mut Ctx<T>, x: &Var<T>) -> TResult<Var<T>> {
        cx.scoped(&self.name, |cx| {
            let mut y = x.clone();
            for l in &self.layers {
                y = l.forward(cx, &y)?;
            }
            Ok(y)
        })
    }
}

impl<T: Float> Params<T> for Sequential<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.layers.iter().for_each(|l| l.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.layers.iter_mut().for_each(|l| l.visit_mut(f));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{count_trainable, eval, fill_params};
    use drsi_tensor::{ops, Shape};

    fn init() -> Initializer {
        Initializer::new(7)
    }

    #[test]
    fn focus_rearranges_then_convolves() {
        let x = Tensor::<f32>::from_fn(Shape::new(1, 1, 4, 4), |_, _, h, w| (h * 4 + w) as f32);
        let s2d = ops::space_to_depth(&x).unwrap();
        assert_eq!(s2d.shape(), Shape::new(1, 4, 2, 2));
        let mut a = s2d.to_vec();
        a.sort_by(f32::total_cmp);
        assert_eq!(a, x.to_vec());
        let f = Focus::<f32>::new(&init(), "focus", 3, 16, 3);
        assert_eq!(eval(&f, &Tensor::zeros(Shape::new(1, 3, 8, 8))).unwrap().shape(), Shape::new(1, 16, 4, 4));
        assert!(eval(&f, &Tensor::zeros(Shape::new(1, 3, 8, 8))).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(eval(&f, &Tensor::zeros(Shape::new(1, 3, 7, 8))).is_err());
    }

    #[test]
    fn spp_constant_input() {
        let spp = Spp::<f64>::new(&init(), "spp", 16, 8);
        assert_eq!(spp.cv2.conv.weight.dims()[1], 32);
        let x = Tensor::full(Shape::new(1, 16, 6, 6), 0.7);
        let y = eval(&spp, &x).unwrap();
        let first = y.at(0, 0, 0, 0);
        for c in 0..8 {
            let v = y.at(0, c, 0, 0);
            assert!(y.data()[c * 36..(c + 1) * 36].iter().all(|&u| u == v));
        }
        assert!(first.is_finite());
    }

    #[test]
    fn c3_with_zero_bottlenecks_passes_branch_through() {
        let mut c3 = C3::<f64>::new(&init(), "c3", 8, 8, 2, true);
        let x = Tensor::uniform(Shape::new(1, 8, 5, 5), 1, -1.0, 1.0);
        fill_params(&mut c3, "c3.m.", 0.0);
        let y = eval(&c3, &x).unwrap();
        let a = eval(&c3.cv1, &x).unwrap();
        let b = eval(&c3.cv2, &x).unwrap();
        let expect = eval(&c3.cv3, &ops::concat_channels(&[&a, &b]).unwrap()).unwrap();
        assert!(y.bit_eq(&expect));
    }

    #[test]
    fn inverted_bottleneck_skips() {
        let mut ib = InvertedBottleneck::<f64>::new(&init(), "ib", 8, 4);
        let y = eval(&ib, &Tensor::zeros(Shape::new(1, 8, 6, 6))).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        fill_params(&mut ib, "ib.c2.weight", 0.0);
        let x = Tensor::uniform(Shape::new(1, 8, 6, 6), 2, -1.0, 1.0);
        assert!(eval(&ib, &x).unwrap().bit_eq(&x));
    }

    #[test]
    fn drsi_block_zero_rgc_projection_is_bottleneck() {
        let mut blk = DrsiBlock::<f64>::new(&init(), "b", 8, &DrsiOptions::default()).unwrap();
        fill_params(&mut blk, "b.rgc.phi_out", 0.0);
        let x = Tensor::uniform(Shape::new(1, 8, 6, 6), 3, -1.0, 1.0);
        assert!(eval(&blk, &x).unwrap().bit_eq(&eval(&blk.invbn, &x).unwrap()));
        let y = eval(&blk, &Tensor::zeros(Shape::new(1, 8, 6, 6))).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn drsi_block_preserves_shape() {
        for c in [8, 16, 32] {
            let blk = DrsiBlock::<f32>::new(&init(), "b", c, &DrsiOptions::default()).unwrap();
            let x = Tensor::uniform(Shape::new(2, c, 5, 7), 3, -1.0, 1.0);
            assert_eq!(eval(&blk, &x).unwrap().shape(), x.shape());
        }
    }

    #[test]
    fn c3dr_shapes_and_split() {
        let m = C3dr::<f32>::new(&init(), "m", 64, 128, 3, &DrsiOptions::default()).unwrap();
        assert_eq!(m.conv_cross.c_out(), 64);
        assert_eq!(m.blocks.len(), 3);
        let y = eval(&m, &Tensor::uniform(Shape::new(1, 64, 8, 8), 0, -1.0, 1.0)).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 128, 8, 8));
        assert!(C3dr::<f32>::new(&init(), "m", 64, 127, 3, &DrsiOptions::default()).is_err());
    }

    #[test]
    fn c3dr_without_cross_branch_depends_on_main_only() {
        let mut m = C3dr::<f64>::new(&init(), "m", 8, 16, 2, &DrsiOptions::default()).unwrap();
        fill_params(&mut m, "m.conv_cross.conv.weight", 0.0);
        let mut biases = Vec::new();
        m.visit(&mut |p| {
            if p.name().starts_with("m.blocks.") && p.name().ends_with(".bias") {
                biases.push(p.name().to_string());
            }
        });
        for b in &biases {
            fill_params(&mut m, b, 0.0);
        }
        let x = Tensor::uniform(Shape::new(1, 8, 6, 6), 4, -1.0, 1.0);
        let main = eval(&m.conv_main, &x).unwrap();
        let zeros = Tensor::zeros(main.shape());
        let expect = eval(&m.conv_final, &ops::concat_channels(&[&main, &zeros]).unwrap()).unwrap();
        let y = eval(&m, &x).unwrap();
        assert!(y.all_finite());
        assert!(y.bit_eq(&expect));
    }

    #[test]
    fn c3dr_param_count_is_sum_of_parts() {
        let m = C3dr::<f32>::new(&init(), "m", 32, 64, 2, &DrsiOptions::default()).unwrap();
        let parts = count_trainable(&m.conv_cross)
            + count_trainable(&m.conv_main)
            + m.blocks.iter().map(count_trainable).sum::<u64>()
            + count_trainable(&m.conv_final);
        assert_eq!(count_trainable(&m), parts);
        // closed form for one block at c = 32, order 2, expansion 4
        let c = 32u64;
        let e = 4 * c;
        let invbn = 2 * c + (c * e + e) + 2 * e + (9 * e + e) + 2 * e + (e * c + c);
        let rgc = (c * 2 * c + 2 * c) + (49 * 48 + 48) + (16 * 32 + 2 * 32) + (c * c + c);
        assert_eq!(count_trainable(&m.blocks[0]), invbn + 2 * c + rgc);
    }

    #[test]
    fn cbam_half_gates() {
        let mut a = Cbam::<f64>::new(&init(), "a", 16, 16, 3).unwrap();
        fill_params(&mut a, "a.", 0.0);
        let x = Tensor::uniform(Shape::new(1, 16, 5, 5), 5, -1.0, 1.0);
        let y = eval(&a, &x).unwrap();
        assert!(y.max_abs_diff(&x.map(|v| v / 4.0)) == 0.0);
    }

    #[test]
    fn cbam_maps_are_open_unit_interval() {
        let a = Cbam::<f64>::new(&init(), "a", 32, 16, 3).unwrap();
        for seed in 0..5 {
            let x = Tensor::uniform(Shape::new(2, 32, 6, 6), seed, -3.0, 3.0);
            let (_, cam, sam) = a.attention_maps(&x).unwrap();
            assert!(cam.data().iter().chain(sam.data()).all(|&v| v > 0.0 && v < 1.0));
        }
        assert!(Cbam::<f32>::new(&init(), "a", 8, 16, 3).is_err());
    }
}
