//! Name-keyed registries of interchangeable strategies.
//!
//! Configs and command lines select variants by name; each registry maps those
//! names to trait objects implementing a common interface.

use drsi_tensor::{Float, Initializer};

use crate::blocks::{C3dr, Cbam, DrsiOptions, Sequential, C3};
use crate::error::{Error, Result};
use crate::interaction::ResGnConv;
use crate::nn::{ConvBnSilu, Layer};

pub struct Registry<V> {
    kind: &'static str,
    entries: Vec<(&'static str, V)>,
}

impl<V> Registry<V> {
    pub fn new(kind: &'static str) -> Self {
        Registry { kind, entries: Vec::new() }
    }

    /// Adds or replaces an entry.
    pub fn register(&mut self, name: &'static str, value: V) -> &mut Self {
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((name, value)),
        }
        self
    }

    pub fn get(&self, name: &str) -> Result<&V> {
        self.entries.iter().find(|(n, _)| *n == name).map(|(_, v)| v).ok_or_else(|| Error::Unknown {
            kind: self.kind,
            name: name.to_string(),
            known: self.names().join(", "),
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &V)> {
        self.entries.iter().map(|(n, v)| (*n, v))
    }
}

/// Settings the neck styles draw from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NeckOptions {
    pub sam_top_down: usize,
    pub sam_bottom_up: usize,
    pub cbam_reduction: usize,
    pub drsi: DrsiOptions,
}

/// How a neck variant realizes its two resampling transforms.
pub trait NeckStyle<T: Float>: Send + Sync {
    /// Top-down transform applied before upsampling (`c_in → c_out`).
    fn lateral(&self, init: &Initializer, name: &str, c_in: usize, c_out: usize, o: &NeckOptions)
        -> Result<Box<dyn Layer<T>>>;

    /// Bottom-up stride-2 downsampling (`c → c`).
    fn downsample(&self, init: &Initializer, name: &str, c: usize, o: &NeckOptions) -> Result<Box<dyn Layer<T>>>;
}

fn conv<T: Float>(init: &Initializer, name: &str, c_in: usize, c_out: usize, k: usize, s: usize) -> Box<dyn Layer<T>> {
    Box::new(ConvBnSilu::new(init, name, c_in, c_out, k, s))
}

fn seq<T: Float>(name: &str, layers: Vec<Box<dyn Layer<T>>>) -> Box<dyn Layer<T>> {
    Box::new(Sequential { name: name.to_string(), layers })
}

/// Plain path aggregation: 1×1 conv laterals, 3×3 stride-2 downsampling.
pub struct Pan;

/// Adds CBAM after every lateral (SAM kernel `sam_top_down`) and downsampling
/// (SAM kernel `sam_bottom_up`) convolution.
pub struct CbamPan;

/// Like [`CbamPan`] but with a recursive residual gated convolution after each
/// top-down lateral instead of CBAM.
pub struct AsiPan;

impl<T: Float> NeckStyle<T> for Pan {
    fn lateral(&self, init: &Initializer, name: &str, c_in: usize, c_out: usize, _: &NeckOptions) -> Result<Box<dyn Layer<T>>> {
        Ok(seq(name, vec![conv(init, &format!("{name}.conv"), c_in, c_out, 1, 1)]))
    }

    fn downsample(&self, init: &Initializer, name: &str, c: usize, _: &NeckOptions) -> Result<Box<dyn Layer<T>>> {
        Ok(seq(name, vec![conv(init, &format!("{name}.conv"), c, c, 3, 2)]))
    }
}

fn cbam_downsample<T: Float>(init: &Initializer, name: &str, c: usize, o: &NeckOptions) -> Result<Box<dyn Layer<T>>> {
    let attn = Cbam::new(init, &format!("{name}.cbam"), c, o.cbam_reduction, o.sam_bottom_up)?;
    Ok(seq(name, vec![conv(init, &format!("{name}.conv"), c, c, 3, 2), Box::new(attn)]))
}

impl<T: Float> NeckStyle<T> for CbamPan {
    fn lateral(&self, init: &Initializer, name: &str, c_in: usize, c_out: usize, o: &NeckOptions) -> Result<Box<dyn Layer<T>>> {
        let attn = Cbam::new(init, &format!("{name}.cbam"), c_out, o.cbam_reduction, o.sam_top_down)?;
        Ok(seq(name, vec![conv(init, &format!("{name}.conv"), c_in, c_out, 1, 1), Box::new(attn)]))
    }

    fn downsample(&self, init: &Initializer, name: &str, c: usize, o: &NeckOptions) -> Result<Box<dyn Layer<T>>> {
        cbam_downsample(init, name, c, o)
    }
}

impl<T: Float> NeckStyle<T> for AsiPan {
    fn lateral(&self, init: &Initializer, name: &str, c_in: usize, c_out: usize, o: &NeckOptions) -> Result<Box<dyn Layer<T>>> {
        let d = &o.drsi;
        let rgc = ResGnConv::with_interaction(init, &format!("{name}.rgc"), c_out, d.order, d.lambda, d.interaction)?;
        Ok(seq(name, vec![conv(init, &format!("{name}.conv"), c_in, c_out, 1, 1), Box::new(rgc)]))
    }

    fn downsample(&self, init: &Initializer, name: &str, c: usize, o: &NeckOptions) -> Result<Box<dyn Layer<T>>> {
        cbam_downsample(init, name, c, o)
    }
}

pub fn neck_styles<T: Float>() -> Registry<Box<dyn NeckStyle<T>>> {
    let mut r: Registry<Box<dyn NeckStyle<T>>> = Registry::new("neck");
    r.register("pan", Box::new(Pan)).register("cbam_pan", Box::new(CbamPan)).register("asi_pan", Box::new(AsiPan));
    r
}

/// The block that follows each backbone stage's stride-2 convolution.
pub trait StageBlock<T: Float>: Send + Sync {
    fn build(
        &self,
        init: &Initializer,
        name: &str,
        c_in: usize,
        c_out: usize,
        depth: usize,
        opts: &DrsiOptions,
    ) -> Result<Box<dyn Layer<T>>>;
}

/// Cross-stage module over DRSI blocks.
pub struct C3drBlock;

/// CSP bottleneck stack with residual bottlenecks.
pub struct C3Block;

impl<T: Float> StageBlock<T> for C3drBlock {
    fn build(&self, init: &Initializer, name: &str, c_in: usize, c_out: usize, depth: usize, opts: &DrsiOptions) -> Result<Box<dyn Layer<T>>> {
        Ok(Box::new(C3dr::new(init, name, c_in, c_out, depth, opts)?))
    }
}

impl<T: Float> StageBlock<T> for C3Block {
    fn build(&self, init: &Initializer, name: &str, c_in: usize, c_out: usize, depth: usize, _: &DrsiOptions) -> Result<Box<dyn Layer<T>>> {
        Ok(Box::new(C3::new(init, name, c_in, c_out, depth, true)))
    }
}

pub fn stage_blocks<T: Float>() -> Registry<Box<dyn StageBlock<T>>> {
    let mut r: Registry<Box<dyn StageBlock<T>>> = Registry::new("backbone block");
    r.register("c3dr", Box::new(C3drBlock)).register("c3", Box::new(C3Block));
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_lists_known_names() {
        let r = neck_styles::<f32>();
        assert_eq!(r.names(), ["pan", "cbam_pan", "asi_pan"]);
        let err = r.get("fpn").err().unwrap().to_string();
        assert!(err.contains("fpn") && err.contains("cbam_pan"), "{err}");
        assert!(stage_blocks::<f32>().get("c3dr").is_ok());
    }

    #[test]
    fn register_replaces() {
        let mut r = Registry::new("thing");
        r.register("a", 1).register("b", 2).register("a", 3);
        assert_eq!(*r.get("a").unwrap(), 3);
        assert_eq!(r.names(), ["a", "b"]);
    }
}
