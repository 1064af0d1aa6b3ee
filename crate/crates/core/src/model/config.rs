use crate::blocks::BackboneConfig;
use crate::decoder::{Aggregation, HeadWeights};
use crate::error::{Error, Result};
use crate::tensor::Interpolation;
use std::fmt;
use std::str::FromStr;

/// How the backbones are wired.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Mode {
    /// Backbone A and its decoder only (ablation baseline).
    Single,
    /// Both branches run independently and meet only at head aggregation.
    Parallel,
    /// Branch A drives branch B through the feedback image and cascaded skips.
    #[default]
    Cascaded,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Single => "single",
            Mode::Parallel => "parallel",
            Mode::Cascaded => "cascaded",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Mode::Single),
            "parallel" => Ok(Mode::Parallel),
            "cascaded" => Ok(Mode::Cascaded),
            other => Err(Error::invalid(format!("unknown mode '{other}'"))),
        }
    }
}

/// How the saliency map of decoder A is combined with the image for backbone B.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum FeedbackCombine {
    #[default]
    Multiplicative,
    Additive,
}

impl FeedbackCombine {
    pub fn name(self) -> &'static str {
        match self {
            FeedbackCombine::Multiplicative => "multiplicative",
            FeedbackCombine::Additive => "additive",
        }
    }
}

impl fmt::Display for FeedbackCombine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeedbackCombine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multiplicative" => Ok(FeedbackCombine::Multiplicative),
            "additive" => Ok(FeedbackCombine::Additive),
            other => Err(Error::invalid(format!("unknown feedback combination '{other}'"))),
        }
    }
}

/// Full model configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct MeritConfig {
    pub mode: Mode,
    pub backbone_a: BackboneConfig,
    pub backbone_b: BackboneConfig,
    pub num_classes: usize,
    pub head_weights: HeadWeights,
    pub aggregation: Aggregation,
    /// Resampling used for decoder features and prediction maps.
    pub interpolation: Interpolation,
    pub gt_resolution: usize,
    pub use_cascade_decoder: bool,
    pub feedback: FeedbackCombine,
}

impl Default for MeritConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl MeritConfig {
    /// Desk-scale cascaded model: 128/window 4 and 96/window 3 backbones.
    pub fn desk() -> Self {
        Self {
            mode: Mode::Cascaded,
            backbone_a: BackboneConfig::desk_a(),
            backbone_b: BackboneConfig::desk_b(),
            num_classes: 3,
            head_weights: HeadWeights::default(),
            aggregation: Aggregation::Additive,
            interpolation: Interpolation::Bilinear,
            gt_resolution: 128,
            use_cascade_decoder: true,
            feedback: FeedbackCombine::Multiplicative,
        }
    }

    /// Reduced model for quick runs and ablations: 64/window 2 and
    /// 32/window 1 backbones at 64-pixel ground truth.
    pub fn compact() -> Self {
        let a = BackboneConfig {
            input_resolution: 64,
            window: 2,
            stem_channels: 8,
            stage_channels: [16, 16, 24, 32],
            stage_depths: [1, 1, 1, 1],
            ffn_expansion: 2,
            heads: 2,
        };
        let b = BackboneConfig {
            input_resolution: 32,
            window: 1,
            ..a.clone()
        };
        Self {
            backbone_a: a,
            backbone_b: b,
            gt_resolution: 64,
            ..Self::desk()
        }
    }

    /// Full-scale layout: 256/window 8 and 224/window 7 backbones.
    pub fn full() -> Self {
        Self {
            backbone_a: BackboneConfig::full_a(),
            backbone_b: BackboneConfig::full_b(),
            num_classes: 9,
            gt_resolution: 256,
            ..Self::desk()
        }
    }

    /// Structural checks only: every backbone valid on its own, compatible
    /// widths, sane class count. Used directly by degenerate test configs.
    pub fn validate_structure(&self) -> Result<()> {
        self.backbone_a.validate()?;
        if self.mode != Mode::Single {
            self.backbone_b.validate()?;
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("need at least 2 classes"));
        }
        if self.gt_resolution == 0 {
            return Err(Error::invalid("gt resolution must be positive"));
        }
        self.head_weights.validate()?;
        if self.mode == Mode::Cascaded && self.backbone_a.stage_channels != self.backbone_b.stage_channels {
            return Err(Error::invalid("cascaded mode needs identical stage widths in both backbones"));
        }
        Ok(())
    }

    /// Structural checks plus the multi-scale premise: A is the larger branch
    /// and the two branches differ in resolution or window.
    pub fn validate(&self) -> Result<()> {
        self.validate_structure()?;
        if self.mode == Mode::Single {
            return Ok(());
        }
        let (a, b) = (&self.backbone_a, &self.backbone_b);
        if a.input_resolution < b.input_resolution {
            return Err(Error::invalid(format!(
                "backbone A resolution {} is below backbone B resolution {}",
                a.input_resolution, b.input_resolution
            )));
        }
        if a.window == b.window && a.input_resolution == b.input_resolution {
            return Err(Error::invalid("backbones must differ in window or resolution"));
        }
        Ok(())
    }
}
