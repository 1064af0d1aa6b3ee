use crate::error::{Error, Result};

/// Shape of one hierarchical backbone.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BackboneConfig {
    /// Square input side in pixels.
    pub input_resolution: usize,
    /// Attention window side (block size and grid size).
    pub window: usize,
    pub stem_channels: usize,
    pub stage_channels: [usize; 4],
    pub stage_depths: [usize; 4],
    /// FFN hidden width as a multiple of the stage width.
    pub ffn_expansion: usize,
    pub heads: usize,
}

/// MBConv inverted-bottleneck expansion ratio.
pub const MBCONV_EXPANSION: usize = 4;
/// Squeeze-excitation channel reduction.
pub const SE_REDUCTION: usize = 4;

impl BackboneConfig {
    /// 128×128 input, window 4.
    pub fn desk_a() -> Self {
        Self {
            input_resolution: 128,
            window: 4,
            stem_channels: 16,
            stage_channels: [16, 32, 48, 64],
            stage_depths: [1, 1, 1, 1],
            ffn_expansion: 4,
            heads: 2,
        }
    }

    /// 96×96 input, window 3.
    pub fn desk_b() -> Self {
        Self {
            input_resolution: 96,
            window: 3,
            ..Self::desk_a()
        }
    }

    /// Full-size layout: 256×256, window 8, depths (2,2,5,2).
    pub fn full_a() -> Self {
        Self {
            input_resolution: 256,
            window: 8,
            stem_channels: 64,
            stage_channels: [96, 192, 384, 768],
            stage_depths: [2, 2, 5, 2],
            ffn_expansion: 4,
            heads: 3,
        }
    }

    /// Full-size layout: 224×224, window 7.
    pub fn full_b() -> Self {
        Self {
            input_resolution: 224,
            window: 7,
            ..Self::full_a()
        }
    }

    /// Side lengths of the four pyramid levels.
    pub fn pyramid_sizes(&self) -> [usize; 4] {
        let r = self.input_resolution;
        [r / 8, r / 16, r / 32, r / 32]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.window == 0 || self.input_resolution == 0 {
            return bad("resolution and window must be positive".into());
        }
        if self.input_resolution % (32 * self.window) != 0 {
            return bad(format!(
                "input resolution {} is not divisible by 32·window = {}",
                self.input_resolution,
                32 * self.window
            ));
        }
        if self.stage_depths.iter().any(|&d| d == 0) {
            return bad("stage depths must be >= 1".into());
        }
        if self.stem_channels == 0 || self.ffn_expansion == 0 || self.heads == 0 {
            return bad("stem channels, ffn expansion and heads must be positive".into());
        }
        for &c in &self.stage_channels {
            if c == 0 || c % self.heads != 0 {
                return bad(format!("stage width {c} not divisible by {} heads", self.heads));
            }
        }
        Ok(())
    }
}
