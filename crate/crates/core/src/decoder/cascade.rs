use super::aggregate::Aggregation;
use super::gates::{AttentionGate, Cam, ConvNormAct};
use crate::blocks::FeaturePyramid;
use crate::error::{Error, Result};
use crate::impl_module;
use crate::layers::{resize_to, Conv2d, ConvSpec, Module, Param};
use crate::rng::RngStream;
use crate::tensor::{Element, Interpolation, Tape, Var};

/// Skip features of backbone stages 1–3.
#[derive(Clone, Copy, Debug)]
pub struct SkipSet<'t, T: Element> {
    pub skips: [Var<'t, T>; 3],
}

impl<'t, T: Element> SkipSet<'t, T> {
    pub fn from_pyramid(p: &FeaturePyramid<'t, T>) -> Self {
        Self {
            skips: [p.levels[0], p.levels[1], p.levels[2]],
        }
    }
}

/// Result of one decode: head maps p1 (finest) … p4 at native stage
/// resolution, plus the finest decoder feature.
#[derive(Clone, Copy, Debug)]
pub struct DecodeOutput<'t, T: Element> {
    pub maps: [Var<'t, T>; 4],
    pub last_feature: Var<'t, T>,
}

/// Resize (when sizes differ) followed by conv → norm → relu.
#[derive(Clone, Debug)]
pub struct UpConv<T: Element> {
    pub block: ConvNormAct<T>,
    pub interpolation: Interpolation,
}
impl_module!(UpConv { block });

impl<T: Element> UpConv<T> {
    pub fn new(name: &str, in_ch: usize, out_ch: usize, interpolation: Interpolation, rng: &mut RngStream) -> Self {
        Self {
            block: ConvNormAct::new(name, in_ch, out_ch, rng),
            interpolation,
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: &Var<'t, T>, h: usize, w: usize) -> Result<Var<'t, T>> {
        let x = resize_to(x, h, w, self.interpolation)?;
        self.block.forward(tape, &x)
    }
}

/// One finer decoder stage: upsample, gate the skip, join, CAM, head.
#[derive(Clone, Debug)]
pub struct DecoderStage<T: Element> {
    pub up: UpConv<T>,
    pub ag: AttentionGate<T>,
    pub join: Option<Conv2d<T>>,
    pub cam: Cam<T>,
    pub head: Conv2d<T>,
}
impl_module!(DecoderStage { up, ag, join, cam, head });

fn check_feature(what: &str, x: &Var<'_, impl Element>, channels: usize) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 || s[1] != channels {
        return Err(Error::invalid(format!("{what}: expected {channels} channels, got {s:?}")));
    }
    Ok(())
}

/// Adds bilinearly resized extra skips to the decoder's own skips.
fn cascade_skips<'t, T: Element>(
    own: [Var<'t, T>; 3],
    extra: Option<&SkipSet<'t, T>>,
) -> Result<[Var<'t, T>; 3]> {
    let Some(extra) = extra else { return Ok(own) };
    let mut out = own;
    for (o, e) in out.iter_mut().zip(&extra.skips) {
        let s = o.shape();
        if e.shape().len() != 4 || e.shape()[1] != s[1] {
            return Err(Error::invalid(format!(
                "extra skip {:?} does not match skip {s:?}",
                e.shape()
            )));
        }
        *o = o.add(&resize_to(e, s[2], s[3], Interpolation::Bilinear)?)?;
    }
    Ok(out)
}

/// Attention-gated cascaded decoder with four CAM blocks and four heads.
#[derive(Clone, Debug)]
pub struct CascadeDecoder<T: Element> {
    pub channels: [usize; 4],
    pub bottleneck: Cam<T>,
    pub head4: Conv2d<T>,
    /// Stages 1, 2, 3 (finest first).
    pub stages: Vec<DecoderStage<T>>,
}
impl_module!(CascadeDecoder { bottleneck, head4, stages });

impl<T: Element> CascadeDecoder<T> {
    pub fn new(
        name: &str,
        channels: [usize; 4],
        num_classes: usize,
        join: Aggregation,
        interpolation: Interpolation,
        rng: &mut RngStream,
    ) -> Self {
        let bottleneck = Cam::new(&format!("{name}.stage4.cam"), channels[3], rng);
        let head4 = Conv2d::new(&format!("{name}.stage4.head"), ConvSpec::new(channels[3], num_classes, 1), rng);
        let stages = (0..3)
            .map(|i| {
                let (c, coarse) = (channels[i], channels[i + 1]);
                let p = format!("{name}.stage{}", i + 1);
                DecoderStage {
                    up: UpConv::new(&format!("{p}.up"), coarse, c, interpolation, rng),
                    ag: AttentionGate::new(&format!("{p}.ag"), c, c, interpolation, rng),
                    join: (join == Aggregation::Concatenation)
                        .then(|| Conv2d::new(&format!("{p}.join"), ConvSpec::new(2 * c, c, 1), rng)),
                    cam: Cam::new(&format!("{p}.cam"), c, rng),
                    head: Conv2d::new(&format!("{p}.head"), ConvSpec::new(c, num_classes, 1), rng),
                }
            })
            .collect();
        Self {
            channels,
            bottleneck,
            head4,
            stages,
        }
    }

    pub fn decode<'t>(
        &self,
        tape: &'t Tape<T>,
        pyramid: &FeaturePyramid<'t, T>,
        extra: Option<&SkipSet<'t, T>>,
    ) -> Result<DecodeOutput<'t, T>> {
        for (i, f) in pyramid.levels.iter().enumerate() {
            check_feature(&format!("decoder stage {}", i + 1), f, self.channels[i])?;
        }
        let skips = cascade_skips([pyramid.levels[0], pyramid.levels[1], pyramid.levels[2]], extra)?;
        let mut x = self.bottleneck.forward(tape, &pyramid.levels[3])?;
        let mut maps = [x; 4];
        maps[3] = self.head4.forward(tape, &x)?;
        for i in (0..3).rev() {
            let st = &self.stages[i];
            let s = skips[i].shape();
            let up = st.up.forward(tape, &x, s[2], s[3])?;
            let gated = st.ag.forward(tape, &up, &skips[i])?;
            let joined = match &st.join {
                None => up.add(&gated)?,
                Some(conv) => conv.forward(tape, &Var::concat(&[up, gated], 1)?)?,
            };
            x = st.cam.forward(tape, &joined)?;
            maps[i] = st.head.forward(tape, &x)?;
        }
        Ok(DecodeOutput { maps, last_feature: x })
    }

    pub fn ag_calls(&self) -> usize {
        self.stages.iter().map(|s| s.ag.calls.get()).sum()
    }

    pub fn cam_calls(&self) -> usize {
        self.bottleneck.calls.get() + self.stages.iter().map(|s| s.cam.calls.get()).sum::<usize>()
    }
}

/// Decoder used when the cascaded decoder is switched off: a 1×1 head on
/// each (cascaded) pyramid level.
#[derive(Clone, Debug)]
pub struct PlainDecoder<T: Element> {
    pub channels: [usize; 4],
    pub heads: Vec<Conv2d<T>>,
}
impl_module!(PlainDecoder { heads });

impl<T: Element> PlainDecoder<T> {
    pub fn new(name: &str, channels: [usize; 4], num_classes: usize, rng: &mut RngStream) -> Self {
        let heads = (0..4)
            .map(|i| {
                Conv2d::new(
                    &format!("{name}.stage{}.head", i + 1),
                    ConvSpec::new(channels[i], num_classes, 1),
                    rng,
                )
            })
            .collect();
        Self { channels, heads }
    }

    pub fn decode<'t>(
        &self,
        tape: &'t Tape<T>,
        pyramid: &FeaturePyramid<'t, T>,
        extra: Option<&SkipSet<'t, T>>,
    ) -> Result<DecodeOutput<'t, T>> {
        for (i, f) in pyramid.levels.iter().enumerate() {
            check_feature(&format!("decoder stage {}", i + 1), f, self.channels[i])?;
        }
        let skips = cascade_skips([pyramid.levels[0], pyramid.levels[1], pyramid.levels[2]], extra)?;
        let feats = [skips[0], skips[1], skips[2], pyramid.levels[3]];
        let mut maps = feats;
        for (m, (h, f)) in maps.iter_mut().zip(self.heads.iter().zip(&feats)) {
            *m = h.forward(tape, f)?;
        }
        Ok(DecodeOutput {
            maps,
            last_feature: feats[0],
        })
    }
}

/// Either decoder variant.
#[derive(Clone, Debug)]
pub enum Decoder<T: Element> {
    Cascade(CascadeDecoder<T>),
    Plain(PlainDecoder<T>),
}

impl<T: Element> Decoder<T> {
    pub fn decode<'t>(
        &self,
        tape: &'t Tape<T>,
        pyramid: &FeaturePyramid<'t, T>,
        extra: Option<&SkipSet<'t, T>>,
    ) -> Result<DecodeOutput<'t, T>> {
        match self {
            Decoder::Cascade(d) => d.decode(tape, pyramid, extra),
            Decoder::Plain(d) => d.decode(tape, pyramid, extra),
        }
    }

    /// Channels of the feature returned as `last_feature`.
    pub fn last_channels(&self) -> usize {
        match self {
            Decoder::Cascade(d) => d.channels[0],
            Decoder::Plain(d) => d.channels[0],
        }
    }
}

impl<T: Element> Module<T> for Decoder<T> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        match self {
            Decoder::Cascade(d) => d.visit_params(f),
            Decoder::Plain(d) => d.visit_params(f),
        }
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        match self {
            Decoder::Cascade(d) => d.visit_params_mut(f),
            Decoder::Plain(d) => d.visit_params_mut(f),
        }
    }
}
