//! Named parameters and the small layers every block is built from.

use crate::error::Result;
use crate::rng::RngStream;
use crate::tensor::{Element, Tape, Tensor, Var};

/// A learnable tensor with a stable dotted path name.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Element> {
    name: String,
    pub value: Tensor<T>,
}

impl<T: Element> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self {
            name: name.into(),
            value: value.with_requires_grad(true),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Record this parameter on `tape` (deduplicated by name).
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Var<'t, T> {
        tape.param(&self.name, &self.value)
    }
}

/// Anything that owns parameters.
pub trait Module<T: Element> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |p| names.push(p.name().to_string()));
        names
    }

    /// Apply `f` to the parameter called `name`; returns whether it exists.
    fn update_param(&mut self, name: &str, mut f: impl FnMut(&mut Param<T>)) -> bool
    where
        Self: Sized,
    {
        let mut hit = false;
        self.visit_params_mut(&mut |p| {
            if p.name() == name {
                f(p);
                hit = true;
            }
        });
        hit
    }

    fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.value.numel());
        n
    }
}

impl<T: Element, M: Module<T>> Module<T> for Vec<M> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.iter().for_each(|m| m.visit_params(f));
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.iter_mut().for_each(|m| m.visit_params_mut(f));
    }
}

impl<T: Element, M: Module<T>> Module<T> for Option<M> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        if let Some(m) = self {
            m.visit_params(f);
        }
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        if let Some(m) = self {
            m.visit_params_mut(f);
        }
    }
}

impl<T: Element> Module<T> for Param<T> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(self);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(self);
    }
}

/// Implements [`Module`] by visiting the listed fields in order.
#[macro_export]
macro_rules! impl_module {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl<T: $crate::tensor::Element> $crate::layers::Module<T> for $ty<T> {
            fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a $crate::layers::Param<T>)) {
                $( $crate::layers::Module::visit_params(&self.$field, f); )*
            }
            fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut $crate::layers::Param<T>)) {
                $( $crate::layers::Module::visit_params_mut(&mut self.$field, f); )*
            }
        }
    };
}

/// Uniform `±1/√fan_in` draws, generated in `f64` so `f32` and `f64`
/// instances built from the same stream hold the same values.
pub fn uniform_init<T: Element>(shape: &[usize], fan_in: usize, rng: &mut RngStream) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.uniform_range(-bound, bound)))
}

/// 2-D convolution layer with optional bias.
#[derive(Clone, Debug)]
pub struct Conv2d<T: Element> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}
impl_module!(Conv2d { weight, bias });

/// Hyper-parameters of a [`Conv2d`].
#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel,
            stride: 1,
            padding: kernel / 2,
            groups: 1,
            bias: true,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }
}

impl<T: Element> Conv2d<T> {
    pub fn new(name: &str, spec: ConvSpec, rng: &mut RngStream) -> Self {
        let cg = spec.in_ch / spec.groups;
        let fan_in = cg * spec.kernel * spec.kernel;
        let weight = Param::new(
            format!("{name}.weight"),
            uniform_init(&[spec.out_ch, cg, spec.kernel, spec.kernel], fan_in, rng),
        );
        let bias = spec
            .bias
            .then(|| Param::new(format!("{name}.bias"), Tensor::zeros(&[spec.out_ch])));
        Self {
            weight,
            bias,
            stride: spec.stride,
            padding: spec.padding,
            groups: spec.groups,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let w = self.weight.bind(tape);
        let b = self.bias.as_ref().map(|b| b.bind(tape));
        x.conv2d(&w, b.as_ref(), self.stride, self.padding, self.groups)
    }

    /// Set weight and bias to zero.
    pub fn zero(&mut self) {
        self.weight.value.data_mut().fill(T::zero());
        if let Some(b) = &mut self.bias {
            b.value.data_mut().fill(T::zero());
        }
    }
}

/// Fully connected layer on the last axis: `y = x·W + b`, `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear<T: Element> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}
impl_module!(Linear { weight, bias });

impl<T: Element> Linear<T> {
    pub fn new(name: &str, d_in: usize, d_out: usize, rng: &mut RngStream) -> Self {
        Self {
            weight: Param::new(format!("{name}.weight"), uniform_init(&[d_in, d_out], d_in, rng)),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[d_out])),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let s = x.shape();
        let (d_in, d_out) = (self.weight.value.shape()[0], self.weight.value.shape()[1]);
        let rows = s.iter().product::<usize>() / d_in;
        let y = x
            .reshape(&[rows, d_in])?
            .matmul(&self.weight.bind(tape))?
            .add(&self.bias.bind(tape))?;
        let mut os = s.clone();
        *os.last_mut().expect("rank >= 1") = d_out;
        y.reshape(&os)
    }

    pub fn zero(&mut self) {
        self.weight.value.data_mut().fill(T::zero());
        self.bias.value.data_mut().fill(T::zero());
    }
}

/// Layer normalization across the channel axis of `[N,C,H,W]` maps with a
/// per-channel affine.
#[derive(Clone, Debug)]
pub struct ChannelNorm<T: Element> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
}
impl_module!(ChannelNorm { gamma, beta });

pub const NORM_EPS: f64 = 1e-5;

impl<T: Element> ChannelNorm<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), Tensor::full(&[1, channels, 1, 1], T::one())),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[1, channels, 1, 1])),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(1, NORM_EPS)?
            .mul(&self.gamma.bind(tape))?
            .add(&self.beta.bind(tape))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_param_names_and_shapes() {
        let mut rng = RngStream::new(1, 0);
        let c: Conv2d<f32> = Conv2d::new("enc.conv", ConvSpec::new(4, 8, 3).groups(2), &mut rng);
        assert_eq!(c.param_names(), vec!["enc.conv.weight", "enc.conv.bias"]);
        assert_eq!(c.weight.value.shape(), &[8, 2, 3, 3]);
        assert_eq!(c.num_parameters(), 8 * 2 * 9 + 8);
    }

    #[test]
    fn f32_and_f64_init_agree() {
        let a: Linear<f32> = Linear::new("l", 3, 5, &mut RngStream::new(9, 1));
        let b: Linear<f64> = Linear::new("l", 3, 5, &mut RngStream::new(9, 1));
        for (x, y) in a.weight.value.data().iter().zip(b.weight.value.data()) {
            assert_eq!(*x, *y as f32);
        }
    }

    #[test]
    fn linear_applies_to_last_axis() {
        let tape = Tape::<f64>::new();
        let mut l: Linear<f64> = Linear::new("l", 2, 3, &mut RngStream::new(0, 0));
        l.weight.value = Tensor::from_fn(&[2, 3], |i| i as f64);
        l.bias.value = Tensor::full(&[3], 1.0);
        let x = tape.constant(Tensor::from_fn(&[2, 1, 2], |i| i as f64));
        let y = l.forward(&tape, &x).unwrap();
        assert_eq!(y.shape(), vec![2, 1, 3]);
        // [0,1]·W = [3,4,5]; [2,3]·W = [9,14,19]
        assert_eq!(y.value().data(), &[4.0, 5.0, 6.0, 10.0, 15.0, 20.0]);
    }
}

/// Mean over the spatial axes of `[N,C,H,W]`, kept as `[N,C,1,1]`.
pub fn global_avg_pool<'t, T: Element>(x: &Var<'t, T>) -> Result<Var<'t, T>> {
    let s = x.shape();
    x.reshape(&[s[0], s[1], s[2] * s[3]])?
        .mean_axis(2)?
        .reshape(&[s[0], s[1], 1, 1])
}

/// Max over the spatial axes of `[N,C,H,W]`, kept as `[N,C,1,1]`.
pub fn global_max_pool<'t, T: Element>(x: &Var<'t, T>) -> Result<Var<'t, T>> {
    let s = x.shape();
    x.reshape(&[s[0], s[1], s[2] * s[3]])?
        .max_axis(2)?
        .reshape(&[s[0], s[1], 1, 1])
}

/// Non-overlapping 2×2 average pooling.
pub fn avg_pool2<'t, T: Element>(x: &Var<'t, T>) -> Result<Var<'t, T>> {
    let s = x.shape();
    if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
        return Err(crate::Error::shape("avg_pool2", format!("needs even spatial extents, got {s:?}")));
    }
    x.reshape(&[s[0], s[1], s[2] / 2, 2, s[3] / 2, 2])?
        .mean_axis(5)?
        .mean_axis(3)?
        .reshape(&[s[0], s[1], s[2] / 2, s[3] / 2])
}

/// Resize the spatial axes to `h × w`, passing the input through untouched
/// when it already has that size.
pub fn resize_to<'t, T: Element>(
    x: &Var<'t, T>,
    h: usize,
    w: usize,
    mode: crate::tensor::Interpolation,
) -> Result<Var<'t, T>> {
    let s = x.shape();
    if s.len() == 4 && s[2] == h && s[3] == w {
        Ok(*x)
    } else {
        x.resize2d(h, w, mode)
    }
}

/// Thread-safe invocation counter used to instrument blocks.
#[derive(Debug, Default)]
pub struct CallCounter(std::sync::atomic::AtomicUsize);

impl CallCounter {
    pub fn bump(&self) {
        self.0.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
    }

    pub fn get(&self) -> usize {
        self.0.load(std::sync::atomic::Ordering::Relaxed)
    }
}

impl Clone for CallCounter {
    fn clone(&self) -> Self {
        Self(self.get().into())
    }
}
