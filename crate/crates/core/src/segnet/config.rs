use serde::{Deserialize, Serialize};

use crate::data::{MAX_BANDS, ORIGINAL_BANDS, PATCH_SIZE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// Two conv3×3 → BN → LeakyReLU units.
    DoubleConv,
    /// Parallel 2×2 / 3×3 branches, a 3×3 merge and a residual connection.
    ResConv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    None,
    Se,
    Cbam,
    ProAtt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadLayout {
    #[serde(rename = "single_128")]
    Single128,
    #[serde(rename = "triple_64_128_256")]
    Triple64_128_256,
}

impl HeadLayout {
    pub fn resolutions(self) -> &'static [usize] {
        match self {
            HeadLayout::Single128 => &[128],
            HeadLayout::Triple64_128_256 => &[64, 128, 256],
        }
    }
}

/// Architecture switchboard for the U-Net family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub block_kind: BlockKind,
    pub attention_kind: AttentionKind,
    pub heads: HeadLayout,
    pub encoder_channels: Vec<usize>,
    pub dropout: f32,
    pub leaky_slope: f32,
    pub attention_heads: usize,
    pub se_reduction: usize,
}

/// Encoder widths of the plain U-Net.
pub const BASELINE_CHANNELS: [usize; 5] = [64, 128, 256, 512, 1024];

/// Encoder widths of the Res-Conv / Pro-Att / three-head network: the baseline
/// widths scaled by 25/32.
pub const BEST_CHANNELS: [usize; 5] = [50, 100, 200, 400, 800];

impl ModelConfig {
    pub fn baseline(input_channels: usize) -> Self {
        ModelConfig {
            input_channels,
            block_kind: BlockKind::DoubleConv,
            attention_kind: AttentionKind::None,
            heads: HeadLayout::Single128,
            encoder_channels: BASELINE_CHANNELS.to_vec(),
            dropout: 0.2,
            leaky_slope: 0.01,
            attention_heads: 4,
            se_reduction: 16,
        }
    }

    pub fn best(input_channels: usize) -> Self {
        ModelConfig {
            block_kind: BlockKind::ResConv,
            attention_kind: AttentionKind::ProAtt,
            heads: HeadLayout::Triple64_128_256,
            encoder_channels: BEST_CHANNELS.to_vec(),
            ..Self::baseline(input_channels)
        }
    }

    /// Divides every encoder width by `divisor` (rounding down, at least 1).
    pub fn width_divided(mut self, divisor: usize) -> Self {
        let d = divisor.max(1);
        for c in &mut self.encoder_channels {
            *c = (*c / d).max(1);
        }
        self
    }

    /// Spatial size of encoder level `i` for a 128×128 input.
    pub fn level_size(&self, level: usize) -> usize {
        PATCH_SIZE >> level
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(ORIGINAL_BANDS..=MAX_BANDS).contains(&self.input_channels) {
            return bad(format!("input_channels must lie in {ORIGINAL_BANDS}..={MAX_BANDS}, got {}", self.input_channels));
        }
        let ch = &self.encoder_channels;
        if ch.len() < 2 {
            return bad("encoder_channels needs at least two levels".into());
        }
        if PATCH_SIZE >> (ch.len() - 1) == 0 || (PATCH_SIZE >> (ch.len() - 1)) << (ch.len() - 1) != PATCH_SIZE {
            return bad(format!("{} levels cannot halve a {PATCH_SIZE}-pixel patch evenly", ch.len()));
        }
        if ch[0] == 0 || ch.windows(2).any(|w| w[1] <= w[0]) {
            return bad(format!("encoder_channels must be positive and strictly increasing, got {ch:?}"));
        }
        if self.heads == HeadLayout::Triple64_128_256 && ch.len() < 3 {
            return bad("three heads need at least three encoder levels".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope.is_finite()) {
            return bad(format!("leaky_slope must be finite and >= 0, got {}", self.leaky_slope));
        }
        if self.attention_heads == 0 {
            return bad("attention_heads must be >= 1".into());
        }
        if self.se_reduction == 0 {
            return bad("se_reduction must be >= 1".into());
        }
        if self.attention_kind == AttentionKind::ProAtt {
            for level in 0..ch.len() {
                let s = self.level_size(level);
                if s % self.attention_heads != 0 {
                    return bad(format!("attention_heads {} does not divide feature size {s}", self.attention_heads));
                }
            }
        }
        Ok(())
    }
}

/// `[H, W, C]` of an intermediate feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMapShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl FeatureMapShape {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        FeatureMapShape { height, width, channels }
    }
}

impl std::fmt::Display for FeatureMapShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}
