use crate::error::{Error, Result};
use crate::impl_module;
use crate::layers::{global_avg_pool, global_max_pool, resize_to, CallCounter, ChannelNorm, Conv2d, ConvSpec};
use crate::rng::RngStream;
use crate::tensor::{Element, Interpolation, Tape, Var};

/// Channel reduction of the CAM channel-attention bottleneck.
pub const CAM_REDUCTION: usize = 4;

fn check_channels(op: &str, x: &Var<'_, impl Element>, expected: usize) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 || s[1] != expected {
        return Err(Error::invalid(format!("{op}: expected {expected} channels, got shape {s:?}")));
    }
    Ok(())
}

/// 3×3 convolution → channel norm → relu.
#[derive(Clone, Debug)]
pub struct ConvNormAct<T: Element> {
    pub conv: Conv2d<T>,
    pub norm: ChannelNorm<T>,
}
impl_module!(ConvNormAct { conv, norm });

impl<T: Element> ConvNormAct<T> {
    pub fn new(name: &str, in_ch: usize, out_ch: usize, rng: &mut RngStream) -> Self {
        Self {
            conv: Conv2d::new(&format!("{name}.conv"), ConvSpec::new(in_ch, out_ch, 3), rng),
            norm: ChannelNorm::new(&format!("{name}.norm"), out_ch),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.conv.forward(tape, x)?;
        self.norm.forward(tape, &h)?.relu()
    }
}

/// Additive attention gate: `x ⊙ sigmoid(ψ(relu(W_g·g + W_x·x)))`, with the
/// gating signal resized to the skip's spatial size.
#[derive(Clone, Debug)]
pub struct AttentionGate<T: Element> {
    pub wg: Conv2d<T>,
    pub wx: Conv2d<T>,
    pub psi: Conv2d<T>,
    pub interpolation: Interpolation,
    pub calls: CallCounter,
}
impl_module!(AttentionGate { wg, wx, psi });

impl<T: Element> AttentionGate<T> {
    pub fn new(name: &str, g_ch: usize, x_ch: usize, interpolation: Interpolation, rng: &mut RngStream) -> Self {
        let inter = (x_ch / 2).max(1);
        Self {
            wg: Conv2d::new(&format!("{name}.wg"), ConvSpec::new(g_ch, inter, 1), rng),
            wx: Conv2d::new(&format!("{name}.wx"), ConvSpec::new(x_ch, inter, 1), rng),
            psi: Conv2d::new(&format!("{name}.psi"), ConvSpec::new(inter, 1, 1), rng),
            interpolation,
            calls: CallCounter::default(),
        }
    }

    /// Gate coefficients `[N,1,H,W]` in (0,1).
    pub fn coefficients<'t>(&self, tape: &'t Tape<T>, g: &Var<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        check_channels("attention gate (g)", g, self.wg.weight.value.shape()[1])?;
        check_channels("attention gate (x)", x, self.wx.weight.value.shape()[1])?;
        let xs = x.shape();
        let g = resize_to(g, xs[2], xs[3], self.interpolation)?;
        let a = self.wg.forward(tape, &g)?.add(&self.wx.forward(tape, x)?)?.relu()?;
        self.psi.forward(tape, &a)?.sigmoid()
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, g: &Var<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.calls.bump();
        x.mul(&self.coefficients(tape, g, x)?)
    }

    pub fn zero(&mut self) {
        self.wg.zero();
        self.wx.zero();
        self.psi.zero();
    }
}

/// Convolutional attention module: channel attention, spatial attention and
/// two 3×3 refinement layers.
#[derive(Clone, Debug)]
pub struct Cam<T: Element> {
    pub fc1: Conv2d<T>,
    pub fc2: Conv2d<T>,
    pub spatial: Conv2d<T>,
    pub refine1: ConvNormAct<T>,
    pub refine2: ConvNormAct<T>,
    pub calls: CallCounter,
}
impl_module!(Cam { fc1, fc2, spatial, refine1, refine2 });

impl<T: Element> Cam<T> {
    pub fn new(name: &str, channels: usize, rng: &mut RngStream) -> Self {
        let hidden = (channels / CAM_REDUCTION).max(1);
        Self {
            fc1: Conv2d::new(&format!("{name}.fc1"), ConvSpec::new(channels, hidden, 1).no_bias(), rng),
            fc2: Conv2d::new(&format!("{name}.fc2"), ConvSpec::new(hidden, channels, 1).no_bias(), rng),
            spatial: Conv2d::new(&format!("{name}.spatial"), ConvSpec::new(2, 1, 7), rng),
            refine1: ConvNormAct::new(&format!("{name}.refine1"), channels, channels, rng),
            refine2: ConvNormAct::new(&format!("{name}.refine2"), channels, channels, rng),
            calls: CallCounter::default(),
        }
    }

    fn mlp<'t>(&self, tape: &'t Tape<T>, d: &Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.fc1.forward(tape, d)?.relu()?;
        self.fc2.forward(tape, &h)
    }

    /// Per-channel weights `[N,C,1,1]` from pooled descriptors.
    pub fn channel_weights<'t>(&self, tape: &'t Tape<T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        check_channels("cam", x, self.fc1.weight.value.shape()[1])?;
        let avg = self.mlp(tape, &global_avg_pool(x)?)?;
        let max = self.mlp(tape, &global_max_pool(x)?)?;
        avg.add(&max)?.sigmoid()
    }

    /// Per-pixel weights `[N,1,H,W]` from channel-wise mean and max maps.
    pub fn spatial_weights<'t>(&self, tape: &'t Tape<T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let d = Var::concat(&[x.mean_axis(1)?, x.max_axis(1)?], 1)?;
        self.spatial.forward(tape, &d)?.sigmoid()
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.calls.bump();
        let x = x.mul(&self.channel_weights(tape, x)?)?;
        let x = x.mul(&self.spatial_weights(tape, &x)?)?;
        let x = self.refine1.forward(tape, &x)?;
        self.refine2.forward(tape, &x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = RngStream::new(seed, 3);
        Tensor::from_fn(shape, |_| rng.normal())
    }

    #[test]
    fn zero_gate_halves_skip() {
        let mut ag = AttentionGate::<f64>::new("ag", 6, 4, Interpolation::Bilinear, &mut RngStream::new(0, 0));
        ag.zero();
        let tape = Tape::new();
        let g = tape.constant(randn(&[1, 6, 2, 2], 1));
        let x = randn(&[1, 4, 4, 4], 2);
        let y = ag.forward(&tape, &g, &tape.constant(x.clone())).unwrap();
        for (a, b) in y.value().data().iter().zip(x.data()) {
            assert_eq!(*a, 0.5 * b);
        }
        assert_eq!(ag.calls.get(), 1);
    }

    #[test]
    fn gate_rejects_wrong_channels() {
        let ag = AttentionGate::<f64>::new("ag", 6, 4, Interpolation::Bilinear, &mut RngStream::new(0, 0));
        let tape = Tape::new();
        let g = tape.constant(randn(&[1, 5, 2, 2], 1));
        let x = tape.constant(randn(&[1, 4, 4, 4], 2));
        assert!(ag.forward(&tape, &g, &x).unwrap_err().is_invalid_argument());
    }

    #[test]
    fn cam_coefficients_in_open_unit_interval() {
        let cam = Cam::<f64>::new("cam", 4, &mut RngStream::new(0, 0));
        let tape = Tape::new();
        let x = tape.constant(randn(&[2, 4, 8, 8], 5));
        for w in [cam.channel_weights(&tape, &x).unwrap(), cam.spatial_weights(&tape, &x).unwrap()] {
            assert!(w.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
        assert_eq!(cam.forward(&tape, &x).unwrap().shape(), vec![2, 4, 8, 8]);
    }

    #[test]
    fn constant_map_pools_agree() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[1, 3, 5, 5], |i| (i / 25) as f64 - 1.3));
        let a = global_avg_pool(&x).unwrap();
        let m = global_max_pool(&x).unwrap();
        for (p, q) in a.value().data().iter().zip(m.value().data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}
