use crate::blocks::config::{MBCONV_EXPANSION, SE_REDUCTION};
use crate::error::{Error, Result};
use crate::impl_module;
use crate::layers::{avg_pool2, global_avg_pool, ChannelNorm, Conv2d, ConvSpec};
use crate::rng::RngStream;
use crate::tensor::{Element, Tape, Var};

/// Squeeze-excitation: global pool → 1×1 reduce → gelu → 1×1 expand → sigmoid gate.
#[derive(Clone, Debug)]
pub struct SqueezeExcite<T: Element> {
    pub reduce: Conv2d<T>,
    pub expand: Conv2d<T>,
}
impl_module!(SqueezeExcite { reduce, expand });

impl<T: Element> SqueezeExcite<T> {
    pub fn new(name: &str, channels: usize, rng: &mut RngStream) -> Self {
        let hidden = (channels / SE_REDUCTION).max(1);
        Self {
            reduce: Conv2d::new(&format!("{name}.reduce"), ConvSpec::new(channels, hidden, 1), rng),
            expand: Conv2d::new(&format!("{name}.expand"), ConvSpec::new(hidden, channels, 1), rng),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let s = global_avg_pool(x)?;
        let s = self.reduce.forward(tape, &s)?.gelu()?;
        let s = self.expand.forward(tape, &s)?.sigmoid()?;
        x.mul(&s)
    }
}

/// Inverted-bottleneck mobile convolution with pre-normalization:
/// norm → 1×1 expand → gelu → 3×3 depthwise (stride) → gelu → SE → 1×1 project,
/// added to a shortcut that is pooled and/or projected when the shape changes.
#[derive(Clone, Debug)]
pub struct MbConv<T: Element> {
    pub norm: ChannelNorm<T>,
    pub expand: Conv2d<T>,
    pub dw: Conv2d<T>,
    pub se: SqueezeExcite<T>,
    pub project: Conv2d<T>,
    pub shortcut: Option<Conv2d<T>>,
    pub stride: usize,
}
impl_module!(MbConv { norm, expand, dw, se, project, shortcut });

impl<T: Element> MbConv<T> {
    pub fn new(name: &str, in_ch: usize, out_ch: usize, stride: usize, rng: &mut RngStream) -> Result<Self> {
        if stride != 1 && stride != 2 {
            return Err(Error::invalid(format!("mbconv stride must be 1 or 2, got {stride}")));
        }
        let mid = out_ch * MBCONV_EXPANSION;
        let shortcut = (in_ch != out_ch || stride != 1)
            .then(|| Conv2d::new(&format!("{name}.shortcut"), ConvSpec::new(in_ch, out_ch, 1), rng));
        Ok(Self {
            norm: ChannelNorm::new(&format!("{name}.norm"), in_ch),
            expand: Conv2d::new(&format!("{name}.expand"), ConvSpec::new(in_ch, mid, 1), rng),
            dw: Conv2d::new(
                &format!("{name}.dw"),
                ConvSpec::new(mid, mid, 3).stride(stride).groups(mid),
                rng,
            ),
            se: SqueezeExcite::new(&format!("{name}.se"), mid, rng),
            project: Conv2d::new(&format!("{name}.project"), ConvSpec::new(mid, out_ch, 1), rng),
            shortcut,
            stride,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.norm.forward(tape, x)?;
        let h = self.expand.forward(tape, &h)?.gelu()?;
        let h = self.dw.forward(tape, &h)?.gelu()?;
        let h = self.se.forward(tape, &h)?;
        let h = self.project.forward(tape, &h)?;
        let mut sc = if self.stride == 2 { avg_pool2(x)? } else { *x };
        if let Some(p) = &self.shortcut {
            sc = p.forward(tape, &sc)?;
        }
        sc.add(&h)
    }
}
