//! Backbone, neck, heads and the assembled model.

use drsi_tensor::{Ctx, Float, Initializer, Param, Shape, Tensor, Var};

use crate::blocks::{Focus, Spp, C3};
use crate::config::{ModelConfig, MAX_STRIDE};
use crate::error::{Error, Result};
use crate::nn::{count_trainable, Conv2d, ConvBnSilu, Layer, Params};
use crate::registry::{neck_styles, stage_blocks, NeckOptions, NeckStyle};

type TResult<T> = drsi_tensor::Result<T>;

/// Number of pyramid levels passed to the neck.
pub const LEVELS: usize = 4;
pub const ANCHORS_PER_CELL: usize = 3;

pub struct Stage<T: Float> {
    pub down: ConvBnSilu<T>,
    pub block: Box<dyn Layer<T>>,
}

/// Focus stem, four stride-2 stages (P2..P5), then stride-2 conv, SPP and C3 (P6).
pub struct Backbone<T: Float> {
    pub focus: Focus<T>,
    pub stages: Vec<Stage<T>>,
    pub down: ConvBnSilu<T>,
    pub spp: Spp<T>,
    pub c3: C3<T>,
}

impl<T: Float> Backbone<T> {
    pub fn new(init: &Initializer, cfg: &ModelConfig) -> Result<Self> {
        let widths = cfg.channels();
        let depths = cfg.depths();
        let registry = stage_blocks::<T>();
        let block = registry.get(&cfg.backbone_block)?;
        let opts = cfg.drsi_options();
        let stem = cfg.stem_channels();
        let mut stages = Vec::with_capacity(4);
        let mut c_in = stem;
        for (i, (&c, &d)) in widths.iter().zip(&depths).enumerate() {
            let prefix = format!("backbone.stage{}", i + 1);
            stages.push(Stage {
                down: ConvBnSilu::new(init, &format!("{prefix}.conv"), c_in, c, 3, 2),
                block: block.build(init, &format!("{prefix}.{}", cfg.backbone_block), c, c, d, &opts)?,
            });
            c_in = c;
        }
        let c6 = widths[4];
        Ok(Backbone {
            focus: Focus::new(init, "backbone.focus", 3, stem, 3),
            stages,
            down: ConvBnSilu::new(init, "backbone.stage5.conv", c_in, c6, 3, 2),
            spp: Spp::new(init, "backbone.stage5.spp", c6, c6),
            c3: C3::new(init, "backbone.stage5.c3", c6, c6, cfg.fusion_depth(), false),
        })
    }

    /// Returns P3..P6.
    pub fn forward(&self, cx: &mut Ctx<T>, x: &Var<T>) -> TResult<Vec<Var<T>>> {
        let mut y = self.focus.forward(cx, x)?;
        let mut out = Vec::with_capacity(LEVELS);
        for (i, s) in self.stages.iter().enumerate() {
            y = s.down.forward(cx, &y)?;
            y = s.block.forward(cx, &y)?;
            cx.tag(&format!("backbone.P{}", i + 2), &y);
            if i > 0 {
                out.push(y.clone());
            }
        }
        y = self.down.forward(cx, &y)?;
        y = self.spp.forward(cx, &y)?;
        y = self.c3.forward(cx, &y)?;
        cx.tag("backbone.P6", &y);
        out.push(y);
        Ok(out)
    }
}

impl<T: Float> Params<T> for Backbone<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.focus.visit(f);
        for s in &self.stages {
            s.down.visit(f);
            s.block.visit(f);
        }
        self.down.visit(f);
        self.spp.visit(f);
        self.c3.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.focus.visit_mut(f);
        for s in &mut self.stages {
            s.down.visit_mut(f);
            s.block.visit_mut(f);
        }
        self.down.visit_mut(f);
        self.spp.visit_mut(f);
        self.c3.visit_mut(f);
    }
}

/// Path-aggregation neck over any number of levels (shallowest first).
///
/// Top-down, level `i` gets `lateral[i]` of the deeper result, upsampled and
/// concatenated with input `i`, fused by `td[i]`. Bottom-up, level `i + 1` gets
/// `down[i]` of the refined level `i`, concatenated with `lateral[i]`'s output,
/// fused by `bu[i]`.
pub struct Neck<T: Float> {
    pub widths: Vec<usize>,
    pub lateral: Vec<Box<dyn Layer<T>>>,
    pub td: Vec<C3<T>>,
    pub down: Vec<Box<dyn Layer<T>>>,
    pub bu: Vec<C3<T>>,
}

impl<T: Float> Neck<T> {
    pub fn new(
        init: &Initializer,
        prefix: &str,
        style: &dyn NeckStyle<T>,
        widths: &[usize],
        depth: usize,
        opts: &NeckOptions,
    ) -> Result<Self> {
        let l = widths.len();
        if l < 2 {
            return Err(Error::config("the neck needs at least two levels"));
        }
        let mut neck = Neck { widths: widths.to_vec(), lateral: vec![], td: vec![], down: vec![], bu: vec![] };
        for i in 0..l - 1 {
            let c = widths[i];
            neck.lateral.push(style.lateral(init, &format!("{prefix}.lateral.{i}"), widths[i + 1], c, opts)?);
            neck.td.push(C3::new(init, &format!("{prefix}.td.{i}"), 2 * c, c, depth, false));
            neck.down.push(style.downsample(init, &format!("{prefix}.down.{i}"), c, opts)?);
            neck.bu.push(C3::new(init, &format!("{prefix}.bu.{i}"), 2 * c, widths[i + 1], depth, false));
        }
        Ok(neck)
    }

    pub fn forward(&self, cx: &mut Ctx<T>, feats: &[Var<T>]) -> TResult<Vec<Var<T>>> {
        let l = self.widths.len();
        if feats.len() != l {
            return Err(drsi_tensor::Error::shape("neck", format!("expected {l} levels, got {}", feats.len())));
        }
        let mut x = feats[l - 1].clone();
        let mut t = vec![None; l - 1];
        for i in (0..l - 1).rev() {
            let ti = self.lateral[i].forward(cx, &x)?;
            let up = cx.upsample2x(&ti)?;
            let cat = cx.concat(&[&up, &feats[i]])?;
            x = self.td[i].forward(cx, &cat)?;
            t[i] = Some(ti);
        }
        let mut outs = vec![x];
        for (i, ti) in t.iter().enumerate() {
            let d = self.down[i].forward(cx, &outs[i])?;
            let cat = cx.concat(&[&d, ti.as_ref().expect("filled above")])?;
            outs.push(self.bu[i].forward(cx, &cat)?);
        }
        Ok(outs)
    }
}

impl<T: Float> Params<T> for Neck<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        for i in 0..self.lateral.len() {
            self.lateral[i].visit(f);
            self.td[i].visit(f);
            self.down[i].visit(f);
            self.bu[i].visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for i in 0..self.lateral.len() {
            self.lateral[i].visit_mut(f);
            self.td[i].visit_mut(f);
            self.down[i].visit_mut(f);
            self.bu[i].visit_mut(f);
        }
    }
}

pub struct ModelOutput<T: Float> {
    /// Backbone P3..P6.
    pub pyramid: Vec<Var<T>>,
    /// Neck outputs at strides 8..64.
    pub features: Vec<Var<T>>,
    /// Raw head logits, `3 · (6 + 3K)` channels per level.
    pub heads: Vec<Var<T>>,
}

pub struct Model<T: Float> {
    pub cfg: ModelConfig,
    pub backbone: Backbone<T>,
    pub neck: Neck<T>,
    pub heads: Vec<Conv2d<T>>,
}

impl<T: Float> Model<T> {
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let init = Initializer::new(seed);
        let widths = cfg.channels()[1..].to_vec();
        let styles = neck_styles::<T>();
        let style = styles.get(&cfg.neck)?;
        let opts = NeckOptions {
            sam_top_down: cfg.sam_kernels.top_down,
            sam_bottom_up: cfg.sam_kernels.bottom_up,
            cbam_reduction: cfg.cbam_reduction,
            drsi: cfg.drsi_options(),
        };
        Ok(Model {
            cfg: cfg.clone(),
            backbone: Backbone::new(&init, cfg)?,
            neck: Neck::new(&init, "neck", style.as_ref(), &widths, cfg.fusion_depth(), &opts)?,
            heads: widths
                .iter()
                .enumerate()
                .map(|(i, &c)| Conv2d::new(&init, &format!("head.{i}"), c, cfg.head_channels(), 1, 1, true))
                .collect(),
        })
    }

    pub fn check_input(&self, s: Shape) -> TResult<()> {
        if s.c != 3 || s.h == 0 || s.w == 0 || !s.h.is_multiple_of(MAX_STRIDE) || !s.w.is_multiple_of(MAX_STRIDE) {
            return Err(drsi_tensor::Error::domain(
                "model",
                format!("input must be (n, 3, H, W) with H and W positive multiples of {MAX_STRIDE}, got {s}"),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, cx: &mut Ctx<T>, x: &Var<T>) -> TResult<ModelOutput<T>> {
        self.check_input(x.shape())?;
        let pyramid = self.backbone.forward(cx, x)?;
        let features = self.neck.forward(cx, &pyramid)?;
        for (i, f) in features.iter().enumerate() {
            cx.tag(&format!("neck.N{}", i + 3), f);
        }
        let heads = features.iter().zip(&self.heads).map(|(f, h)| h.forward(cx, f)).collect::<TResult<_>>()?;
        Ok(ModelOutput { pyramid, features, heads })
    }

    /// Eager forward returning the head logits.
    pub fn infer(&self, x: &Tensor<T>) -> TResult<Vec<Tensor<T>>> {
        let mut cx = Ctx::eager();
        let out = self.forward(&mut cx, &Var::from(x.clone()))?;
        out.heads.iter().map(Var::tensor).collect()
    }

    pub fn count_trainable(&self) -> u64 {
        count_trainable(self)
    }
}

impl<T: Float> Params<T> for Model<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.backbone.visit(f);
        self.neck.visit(f);
        self.heads.iter().for_each(|h| h.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.backbone.visit_mut(f);
        self.neck.visit_mut(f);
        self.heads.iter_mut().for_each(|h| h.visit_mut(f));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::param_names;

    fn tiny() -> ModelConfig {
        ModelConfig::miniature()
    }

    #[test]
    fn tiny_model_shapes() {
        for neck in ["pan", "cbam_pan", "asi_pan"] {
            let mut cfg = tiny();
            cfg.neck = neck.into();
            let m = Model::<f32>::build(&cfg, 0).unwrap();
            let mut cx = Ctx::eager();
            let x = Var::from(Tensor::uniform(Shape::new(1, 3, 128, 128), 0, 0.0, 1.0));
            let out = m.forward(&mut cx, &x).unwrap();
            let want = [(16, 16), (32, 8), (48, 4), (64, 2)];
            for (i, &(c, s)) in want.iter().enumerate() {
                assert_eq!(out.pyramid[i].shape(), Shape::new(1, c, s, s));
                assert_eq!(out.features[i].shape(), Shape::new(1, c, s, s));
                assert_eq!(out.heads[i].shape(), Shape::new(1, 171, s, s));
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = Model::<f32>::build(&tiny(), 0).unwrap();
        for s in [Shape::new(1, 3, 100, 128), Shape::new(1, 1, 128, 128)] {
            assert!(m.infer(&Tensor::zeros(s)).is_err());
        }
    }

    #[test]
    fn names_are_unique_and_hierarchical() {
        let m = Model::<f32>::build(&tiny(), 0).unwrap();
        let names = param_names(&m);
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert!(names.contains(&"backbone.stage2.c3dr.blocks.0.invbn.c1.weight".to_string()));
        assert!(names.contains(&"neck.lateral.0.rgc.phi_in.weight".to_string()));
    }

    #[test]
    fn unknown_styles_are_errors() {
        let mut cfg = tiny();
        cfg.neck = "bifpn".into();
        assert!(matches!(Model::<f32>::build(&cfg, 0), Err(Error::Unknown { .. })));
        let mut cfg = tiny();
        cfg.backbone_block = "csp".into();
        assert!(matches!(Model::<f32>::build(&cfg, 0), Err(Error::Unknown { .. })));
    }
}
