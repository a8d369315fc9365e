use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which of the detector's three contributed blocks are present. Removed
/// blocks are replaced by dimension-matched plain layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "no-tvconv")]
    NoTvConv,
    #[serde(rename = "no-mab-tvconv")]
    NoMabTvConv,
    #[serde(rename = "no-dcl-mab-tvconv")]
    NoDclMabTvConv,
}

impl Variant {
    /// Ablation table order: baseline first, full model last.
    pub const ALL: [Variant; 4] = [
        Variant::NoDclMabTvConv,
        Variant::NoMabTvConv,
        Variant::NoTvConv,
        Variant::Full,
    ];

    pub fn has_dcl(self) -> bool {
        self != Variant::NoDclMabTvConv
    }

    pub fn has_mab(self) -> bool {
        matches!(self, Variant::Full | Variant::NoTvConv)
    }

    pub fn has_tvconv(self) -> bool {
        self == Variant::Full
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoTvConv => "no-tvconv",
            Variant::NoMabTvConv => "no-mab-tvconv",
            Variant::NoDclMabTvConv => "no-dcl-mab-tvconv",
        }
    }

    /// Row label in the ablation table.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "DTNet",
            Variant::NoTvConv => "DTNet without TVConv",
            Variant::NoMabTvConv => "DTNet without MAB and TVConv",
            Variant::NoDclMabTvConv => "DTNet without DCL, MAB and TVConv",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

/// Topology knobs for the whole detector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input `(height, width)` in pixels.
    pub input: (usize, usize),
    /// Output widths of the dynamic block, the attention block and the
    /// compensation block.
    pub widths: [usize; 3],
    pub mab_depth: usize,
    pub window: usize,
    pub heads: usize,
    pub alpha: f64,
    pub mlp_ratio: usize,
    pub reduction: usize,
    /// Anchor `(width, height)` pairs in pixels.
    pub anchors: Vec<(f64, f64)>,
    pub num_classes: usize,
    pub head_stride: usize,
    pub tv_affine_channels: usize,
    pub tv_hidden: usize,
    pub dcl_gate: bool,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input: (256, 256),
            widths: [64, 128, 256],
            mab_depth: 1,
            window: 8,
            heads: 4,
            alpha: 0.01,
            mlp_ratio: 2,
            reduction: 16,
            anchors: vec![(16.0, 16.0), (32.0, 24.0), (64.0, 40.0)],
            num_classes: 4,
            head_stride: 32,
            tv_affine_channels: 8,
            tv_hidden: 32,
            dcl_gate: false,
            variant: Variant::Full,
        }
    }
}

impl ModelConfig {
    /// Smallest sensible model: 8-channel widths on 64×64 inputs.
    pub fn tiny() -> Self {
        Self {
            input: (64, 64),
            widths: [8, 8, 8],
            window: 4,
            heads: 2,
            reduction: 4,
            tv_affine_channels: 4,
            tv_hidden: 8,
            anchors: vec![(12.0, 12.0), (24.0, 16.0)],
            ..Self::default()
        }
    }

    /// Model sized to train on a single CPU core in minutes.
    pub fn desk() -> Self {
        Self {
            input: (128, 128),
            widths: [16, 32, 64],
            window: 8,
            heads: 4,
            reduction: 8,
            tv_affine_channels: 8,
            tv_hidden: 16,
            anchors: vec![(24.0, 34.0), (48.0, 30.0), (72.0, 34.0)],
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "desk" => Ok(Self::desk()),
            "default" | "full" => Ok(Self::default()),
            other => Err(Error::Config(format!("unknown model size `{other}`"))),
        }
    }

    pub fn num_anchors(&self) -> usize {
        self.anchors.len()
    }

    /// Channels per anchor: box (4), objectness (1), classes.
    pub fn anchor_channels(&self) -> usize {
        5 + self.num_classes
    }

    pub fn head_channels(&self) -> usize {
        self.num_anchors() * self.anchor_channels()
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.input.0 / self.head_stride, self.input.1 / self.head_stride)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.head_stride != 32 {
            return err(format!("head stride is fixed at 32 by the topology, got {}", self.head_stride));
        }
        let (h, w) = self.input;
        if h == 0 || w == 0 || h % self.head_stride != 0 || w % self.head_stride != 0 {
            return err(format!("input {h}x{w} not divisible by stride {}", self.head_stride));
        }
        if self.anchors.is_empty() {
            return err("at least one anchor is required".into());
        }
        if self.anchors.iter().any(|&(aw, ah)| !(aw > 0.0 && ah > 0.0)) {
            return err("anchor extents must be positive".into());
        }
        if self.num_classes == 0 {
            return err("at least one class is required".into());
        }
        if self.widths.iter().any(|&c| c < 2 || c % 2 != 0) {
            return err(format!("widths must be even and >= 2, got {:?}", self.widths));
        }
        if self.variant.has_mab() && self.mab_depth > 0 {
            let c = self.widths[1];
            if self.heads == 0 || c % self.heads != 0 {
                return err(format!("{c} channels not divisible by {} heads", self.heads));
            }
            if self.reduction == 0 || c % self.reduction != 0 {
                return err(format!("{c} channels not divisible by reduction {}", self.reduction));
            }
            if self.window == 0 {
                return err("window must be positive".into());
            }
        }
        if !(self.alpha.is_finite()) {
            return err("alpha must be finite".into());
        }
        Ok(())
    }
}
