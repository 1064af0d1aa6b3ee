use crate::blocks::attention::{AttentionUnit, Partition};
use crate::blocks::config::BackboneConfig;
use crate::blocks::mbconv::MbConv;
use crate::error::{Error, Result};
use crate::impl_module;
use crate::layers::{ChannelNorm, Conv2d, ConvSpec};
use crate::rng::RngStream;
use crate::tensor::{Element, Tape, Var};

/// Two stride-2 3×3 convolutions taking an image to a quarter of its size.
#[derive(Clone, Debug)]
pub struct Stem<T: Element> {
    pub conv1: Conv2d<T>,
    pub norm: ChannelNorm<T>,
    pub conv2: Conv2d<T>,
}
impl_module!(Stem { conv1, norm, conv2 });

impl<T: Element> Stem<T> {
    pub fn new(name: &str, channels: usize, rng: &mut RngStream) -> Self {
        Self {
            conv1: Conv2d::new(&format!("{name}.conv1"), ConvSpec::new(3, channels, 3).stride(2), rng),
            norm: ChannelNorm::new(&format!("{name}.norm"), channels),
            conv2: Conv2d::new(&format!("{name}.conv2"), ConvSpec::new(channels, channels, 3).stride(2), rng),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, image: &Var<'t, T>) -> Result<Var<'t, T>> {
        let s = image.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::shape("stem", format!("expected [N,3,H,W], got {s:?}")));
        }
        if s[2] % 4 != 0 || s[3] % 4 != 0 {
            return Err(Error::invalid(format!("stem input {}x{} not divisible by 4", s[2], s[3])));
        }
        let h = self.conv1.forward(tape, image)?;
        let h = self.norm.forward(tape, &h)?.gelu()?;
        self.conv2.forward(tape, &h)
    }
}

/// MBConv → block attention unit → grid attention unit.
#[derive(Clone, Debug)]
pub struct MaxVitBlock<T: Element> {
    pub mbconv: MbConv<T>,
    pub block_attn: AttentionUnit<T>,
    pub grid_attn: AttentionUnit<T>,
}
impl_module!(MaxVitBlock { mbconv, block_attn, grid_attn });

impl<T: Element> MaxVitBlock<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        window: usize,
        heads: usize,
        ffn_expansion: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        Ok(Self {
            mbconv: MbConv::new(&format!("{name}.mbconv"), in_ch, out_ch, stride, rng)?,
            block_attn: AttentionUnit::new(
                &format!("{name}.block_attn"),
                out_ch,
                heads,
                ffn_expansion,
                window,
                Partition::Block,
                rng,
            )?,
            grid_attn: AttentionUnit::new(
                &format!("{name}.grid_attn"),
                out_ch,
                heads,
                ffn_expansion,
                window,
                Partition::Grid,
                rng,
            )?,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.mbconv.forward(tape, x)?;
        let h = self.block_attn.forward(tape, &h)?;
        self.grid_attn.forward(tape, &h)
    }

    /// Zero every residual-branch output projection; a stride-1 block with
    /// matching widths then computes the identity.
    pub fn zero_residuals(&mut self) {
        self.mbconv.project.zero();
        self.block_attn.zero_residuals();
        self.grid_attn.zero_residuals();
    }
}

/// The four stage outputs at H/8, H/16, H/32 and H/32.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid<'t, T: Element> {
    pub levels: [Var<'t, T>; 4],
}

impl<'t, T: Element> FeaturePyramid<'t, T> {
    pub fn spatial_sizes(&self) -> [usize; 4] {
        self.levels.map(|f| f.shape()[2])
    }
}

/// Stem followed by four stages of MaxViT blocks.
#[derive(Clone, Debug)]
pub struct Backbone<T: Element> {
    pub config: BackboneConfig,
    pub stem: Stem<T>,
    pub stages: Vec<Vec<MaxVitBlock<T>>>,
}
impl_module!(Backbone { stem, stages });

impl<T: Element> Backbone<T> {
    pub fn new(name: &str, config: &BackboneConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let stem = Stem::new(&format!("{name}.stem"), config.stem_channels, rng);
        let mut stages = Vec::with_capacity(4);
        let mut in_ch = config.stem_channels;
        for s in 0..4 {
            let out_ch = config.stage_channels[s];
            let mut blocks = Vec::with_capacity(config.stage_depths[s]);
            for b in 0..config.stage_depths[s] {
                let stride = if b == 0 && s < 3 { 2 } else { 1 };
                blocks.push(MaxVitBlock::new(
                    &format!("{name}.stage{}.block{b}", s + 1),
                    if b == 0 { in_ch } else { out_ch },
                    out_ch,
                    stride,
                    config.window,
                    config.heads,
                    config.ffn_expansion,
                    rng,
                )?);
            }
            stages.push(blocks);
            in_ch = out_ch;
        }
        Ok(Self {
            config: config.clone(),
            stem,
            stages,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, image: &Var<'t, T>) -> Result<FeaturePyramid<'t, T>> {
        let s = image.shape();
        let r = self.config.input_resolution;
        if s.len() != 4 || s[2] != r || s[3] != r {
            return Err(Error::invalid(format!("backbone expects {r}x{r} input, got {s:?}")));
        }
        let mut x = self.stem.forward(tape, image)?;
        let mut levels = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in stage {
                x = block.forward(tape, &x)?;
            }
            levels.push(x);
        }
        Ok(FeaturePyramid {
            levels: [levels[0], levels[1], levels[2], levels[3]],
        })
    }
}
