//! Model configuration, loaded from TOML. Unknown keys are rejected.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::blocks::{DrsiOptions, CBAM_REDUCTION};
use crate::error::{Error, Result};
use crate::interaction::{ChannelScheme, Interaction};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    S,
    M,
    L,
    Custom,
}

impl Variant {
    /// `(depth_mult, width_mult)` of the named sizes.
    pub fn multipliers(self) -> Option<(f64, f64)> {
        match self {
            Variant::S => Some((0.33, 0.50)),
            Variant::M => Some((0.67, 0.75)),
            Variant::L => Some((1.0, 1.0)),
            Variant::Custom => None,
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "s" => Ok(Variant::S),
            "m" => Ok(Variant::M),
            "l" => Ok(Variant::L),
            "custom" => Ok(Variant::Custom),
            other => Err(Error::Unknown { kind: "variant", name: other.into(), known: "s, m, l, custom".into() }),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::S => "s",
            Variant::M => "m",
            Variant::L => "l",
            Variant::Custom => "custom",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamKernels {
    pub top_down: usize,
    pub bottom_up: usize,
}

impl Default for SamKernels {
    fn default() -> Self {
        SamKernels { top_down: 1, bottom_up: 3 }
    }
}

/// Placeholder anchor priors `(w, h)` in input pixels for strides 8, 16, 32, 64.
/// They are smoke-test defaults, not fitted to any dataset.
pub const DEFAULT_ANCHORS: [[[f64; 2]; 3]; 4] = [
    [[19.0, 27.0], [44.0, 40.0], [38.0, 94.0]],
    [[96.0, 68.0], [86.0, 152.0], [180.0, 137.0]],
    [[140.0, 301.0], [303.0, 264.0], [238.0, 542.0]],
    [[436.0, 615.0], [739.0, 380.0], [925.0, 792.0]],
];

pub const BASE_CHANNELS: [usize; 5] = [128, 256, 512, 768, 1024];
pub const BASE_DEPTHS: [usize; 4] = [3, 9, 9, 3];
pub const STRIDES: [usize; 4] = [8, 16, 32, 64];
/// Largest stride; inputs must be a multiple of it.
pub const MAX_STRIDE: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    variant: Variant,
    width_mult: Option<f64>,
    depth_mult: Option<f64>,
    base_channels: Option<Vec<usize>>,
    base_depths: Option<Vec<usize>>,
    order_n: Option<usize>,
    lambda: Option<f64>,
    neck: Option<String>,
    strides: Option<Vec<usize>>,
    anchors: Option<Vec<Vec<[f64; 2]>>>,
    expansion: Option<usize>,
    sam_kernels: Option<SamKernels>,
    num_keypoints: Option<usize>,
    channel_round: Option<usize>,
    interaction: Option<Interaction>,
    backbone_block: Option<String>,
    cbam_reduction: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub width_mult: f64,
    pub depth_mult: f64,
    pub base_channels: Vec<usize>,
    pub base_depths: Vec<usize>,
    pub order_n: usize,
    pub lambda: f64,
    /// Neck style name (`pan`, `cbam_pan`, `asi_pan`).
    pub neck: String,
    pub strides: Vec<usize>,
    pub anchors: Vec<Vec<[f64; 2]>>,
    pub expansion: usize,
    pub sam_kernels: SamKernels,
    pub num_keypoints: usize,
    pub channel_round: usize,
    pub interaction: Interaction,
    /// Backbone stage block name (`c3dr`, `c3`).
    pub backbone_block: String,
    pub cbam_reduction: usize,
}

impl ModelConfig {
    /// Defaults for one of the named sizes.
    pub fn preset(variant: Variant) -> Self {
        let (depth_mult, width_mult) = variant.multipliers().unwrap_or((1.0, 1.0));
        ModelConfig {
            variant,
            width_mult,
            depth_mult,
            base_channels: BASE_CHANNELS.to_vec(),
            base_depths: BASE_DEPTHS.to_vec(),
            order_n: 2,
            lambda: 3.0,
            neck: "asi_pan".into(),
            strides: STRIDES.to_vec(),
            anchors: DEFAULT_ANCHORS.iter().map(|a| a.to_vec()).collect(),
            expansion: 4,
            sam_kernels: SamKernels::default(),
            num_keypoints: 17,
            channel_round: 8,
            interaction: Interaction::ResGnConv,
            backbone_block: "c3dr".into(),
            cbam_reduction: CBAM_REDUCTION,
        }
    }

    /// Width-8 stem, one block per stage: small enough for gradient checks.
    pub fn miniature() -> Self {
        let mut cfg = Self::preset(Variant::Custom);
        cfg.width_mult = 0.0625;
        cfg.depth_mult = 0.1;
        cfg.cbam_reduction = 4;
        cfg
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string().trim_end().to_string()))?;
        let mut cfg = ModelConfig::preset(raw.variant);
        match (raw.variant.multipliers(), raw.depth_mult, raw.width_mult) {
            (None, Some(d), Some(w)) => {
                cfg.depth_mult = d;
                cfg.width_mult = w;
            }
            (None, _, _) => return Err(Error::config("custom variant needs width_mult and depth_mult")),
            (Some((d0, w0)), d, w) => {
                if d.is_some_and(|d| d != d0) || w.is_some_and(|w| w != w0) {
                    return Err(Error::config(format!(
                        "variant {} fixes depth_mult = {d0} and width_mult = {w0}; use variant = \"custom\" to change them",
                        raw.variant
                    )));
                }
            }
        }
        macro_rules! take {
            ($($field:ident),*) => {
                $(if let Some(v) = raw.$field { cfg.$field = v; })*
            };
        }
        take!(
            base_channels,
            base_depths,
            order_n,
            lambda,
            neck,
            strides,
            anchors,
            expansion,
            sam_kernels,
            num_keypoints,
            channel_round,
            interaction,
            backbone_block,
            cbam_reduction
        );
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::config(msg));
        if !(self.width_mult > 0.0 && self.width_mult.is_finite()) || !(self.depth_mult > 0.0 && self.depth_mult.is_finite()) {
            return bad(format!("multipliers must be positive (width {}, depth {})", self.width_mult, self.depth_mult));
        }
        if self.base_channels.len() != 5 || self.base_channels.contains(&0) {
            return bad(format!("base_channels needs 5 positive widths, got {:?}", self.base_channels));
        }
        if self.base_depths.len() != 4 || self.base_depths.contains(&0) {
            return bad(format!("base_depths needs 4 positive depths, got {:?}", self.base_depths));
        }
        if self.strides != STRIDES {
            return bad(format!("strides must be {STRIDES:?} for this backbone, got {:?}", self.strides));
        }
        if self.anchors.len() != self.strides.len() || self.anchors.iter().any(|a| a.len() != 3) {
            return bad("anchors needs exactly 3 (w, h) pairs for each of the 4 strides".into());
        }
        if self.anchors.iter().flatten().flatten().any(|&v| !(v > 0.0 && v.is_finite())) {
            return bad("anchor sizes must be positive".into());
        }
        if self.channel_round == 0 || self.expansion == 0 || self.num_keypoints == 0 {
            return bad("channel_round, expansion and num_keypoints must be positive".into());
        }
        if self.sam_kernels.top_down.is_multiple_of(2) || self.sam_kernels.bottom_up.is_multiple_of(2) {
            return bad(format!("sam_kernels must be odd, got {:?}", self.sam_kernels));
        }
        if self.cbam_reduction == 0 {
            return bad("cbam_reduction must be positive".into());
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be positive, got {}", self.lambda));
        }
        for c in self.channels() {
            ChannelScheme::new(c / 2, self.order_n).map_err(|e| Error::config(format!("scaled width {c}: {e}")))?;
        }
        Ok(())
    }

    /// Rounds a scaled width up to a multiple of `channel_round`.
    pub fn round_channels(&self, c: f64) -> usize {
        let r = self.channel_round;
        (((c - 1e-9) / r as f64).ceil() as usize).max(1) * r
    }

    /// Scaled widths of P2..P6.
    pub fn channels(&self) -> Vec<usize> {
        self.base_channels.iter().map(|&c| self.round_channels(c as f64 * self.width_mult)).collect()
    }

    pub fn stem_channels(&self) -> usize {
        self.round_channels(self.base_channels[0] as f64 / 2.0 * self.width_mult)
    }

    pub fn scale_depth(&self, d: usize) -> usize {
        ((d as f64 * self.depth_mult).round() as usize).max(1)
    }

    /// Scaled block counts of the four C3DR stages.
    pub fn depths(&self) -> Vec<usize> {
        self.base_depths.iter().map(|&d| self.scale_depth(d)).collect()
    }

    /// Bottleneck count of the C3 fusion blocks (P6 stage and neck).
    pub fn fusion_depth(&self) -> usize {
        self.scale_depth(self.base_depths[3])
    }

    pub fn head_channels(&self) -> usize {
        3 * (6 + 3 * self.num_keypoints)
    }

    pub fn drsi_options(&self) -> DrsiOptions {
        DrsiOptions { order: self.order_n, lambda: self.lambda, expansion: self.expansion, interaction: self.interaction }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_scale_widths_and_depths() {
        let l = ModelConfig::preset(Variant::L);
        assert_eq!(l.channels(), [128, 256, 512, 768, 1024]);
        assert_eq!(l.depths(), [3, 9, 9, 3]);
        let s = ModelConfig::preset(Variant::S);
        assert_eq!(s.channels(), [64, 128, 256, 384, 512]);
        assert_eq!(s.depths(), [1, 3, 3, 1]);
        assert_eq!(s.stem_channels(), 32);
        let m = ModelConfig::preset(Variant::M);
        assert_eq!(m.channels(), [96, 192, 384, 576, 768]);
        assert_eq!(m.depths(), [2, 6, 6, 2]);
        assert_eq!(l.head_channels(), 171);
    }

    #[test]
    fn parses_minimal_and_full_files() {
        let cfg = ModelConfig::from_toml_str("variant = \"s\"\n").unwrap();
        assert_eq!(cfg, ModelConfig::preset(Variant::S));
        let text = r#"
            variant = "custom"
            width_mult = 0.0625
            depth_mult = 0.33
            neck = "pan"
            interaction = "gn_conv"
            sam_kernels = { top_down = 1, bottom_up = 5 }
            cbam_reduction = 4
        "#;
        let cfg = ModelConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.channels(), [8, 16, 32, 48, 64]);
        assert_eq!(cfg.interaction, Interaction::GnConv);
        assert_eq!(cfg.sam_kernels.bottom_up, 5);
        let again = ModelConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn rejects_bad_files() {
        for text in [
            "variant = \"s\"\nmystery = 1\n",
            "variant = \"xl\"\n",
            "variant = \"custom\"\n",
            "variant = \"s\"\nwidth_mult = 0.7\n",
            "variant = \"s\"\nstrides = [8, 16, 32]\n",
            "variant = \"s\"\nanchors = [[[1.0, 2.0]]]\n",
            "variant = \"s\"\nlambda = 0.0\n",
            "variant = \"s\"\norder_n = 0\n",
            "variant = \"custom\"\nwidth_mult = 0.0625\ndepth_mult = 1.0\norder_n = 4\n",
            "variant = \"s\"\nsam_kernels = { top_down = 2, bottom_up = 3 }\n",
            "variant = \"s\"\ninteraction = \"fancy\"\n",
        ] {
            assert!(matches!(ModelConfig::from_toml_str(text), Err(Error::Config(_))), "{text}");
        }
    }
}
