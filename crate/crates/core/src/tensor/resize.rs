//! Separable spatial resampling of `[N,C,H,W]` maps.

use super::tape::Var;
use super::{Element, Tensor};
use crate::error::{Error, Result};
use std::fmt;
use std::str::FromStr;

/// Resampling kernel. Every mode is a fixed linear map, so the backward pass
/// is the transpose of the same weight table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Interpolation {
    /// Nearest source pixel under half-pixel centers ("nearest-exact").
    Nearest,
    /// Half-pixel-center bilinear with edge clamping.
    #[default]
    Bilinear,
    /// Half-pixel-center cubic convolution (a = -0.75), clamped taps.
    Bicubic,
    /// Adaptive averaging over the covered source interval.
    Area,
}

impl Interpolation {
    pub const ALL: [Interpolation; 4] = [
        Interpolation::Nearest,
        Interpolation::Bilinear,
        Interpolation::Bicubic,
        Interpolation::Area,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Interpolation::Nearest => "nearest",
            Interpolation::Bilinear => "bilinear",
            Interpolation::Bicubic => "bicubic",
            Interpolation::Area => "area",
        }
    }
}

impl fmt::Display for Interpolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Interpolation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" | "nearest-exact" => Ok(Interpolation::Nearest),
            "bilinear" => Ok(Interpolation::Bilinear),
            "bicubic" => Ok(Interpolation::Bicubic),
            "area" => Ok(Interpolation::Area),
            other => Err(Error::invalid(format!("unsupported interpolation mode '{other}'"))),
        }
    }
}

fn cubic(t: f64) -> [f64; 4] {
    const A: f64 = -0.75;
    let near = |x: f64| ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0;
    let far = |x: f64| ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A;
    [far(t + 1.0), near(t), near(1.0 - t), far(2.0 - t)]
}

/// For each output index along one axis, the `(source index, weight)` taps.
pub fn resize_weights(len_in: usize, len_out: usize, mode: Interpolation) -> Vec<Vec<(usize, f64)>> {
    let scale = len_in as f64 / len_out as f64;
    let last = len_in as isize - 1;
    let clamp = |i: isize| i.clamp(0, last) as usize;
    (0..len_out)
        .map(|i| match mode {
            Interpolation::Nearest => {
                let s = (((i as f64 + 0.5) * scale).floor() as usize).min(len_in - 1);
                vec![(s, 1.0)]
            }
            Interpolation::Bilinear => {
                let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = src.floor() as isize;
                let lam = src - i0 as f64;
                let (a, b) = (clamp(i0), clamp(i0 + 1));
                if lam == 0.0 || a == b {
                    vec![(a, 1.0)]
                } else {
                    vec![(a, 1.0 - lam), (b, lam)]
                }
            }
            Interpolation::Bicubic => {
                let src = (i as f64 + 0.5) * scale - 0.5;
                let i0 = src.floor() as isize;
                let w = cubic(src - i0 as f64);
                (0..4).map(|k| (clamp(i0 - 1 + k as isize), w[k])).collect()
            }
            Interpolation::Area => {
                let start = (i * len_in) / len_out;
                let end = ((i + 1) * len_in).div_ceil(len_out);
                let w = 1.0 / (end - start) as f64;
                (start..end).map(|s| (s, w)).collect()
            }
        })
        .collect()
}

type Taps<T> = Vec<Vec<(usize, T)>>;

fn taps<T: Element>(len_in: usize, len_out: usize, mode: Interpolation) -> Taps<T> {
    resize_weights(len_in, len_out, mode)
        .into_iter()
        .map(|row| row.into_iter().map(|(s, w)| (s, T::lit(w))).collect())
        .collect()
}

/// Resample rows of length `w_in` into rows of length `w_out`.
fn apply_rows<T: Element>(src: &[T], w_in: usize, tw: &Taps<T>, dst: &mut [T]) {
    let w_out = tw.len();
    for (srow, drow) in src.chunks(w_in).zip(dst.chunks_mut(w_out)) {
        for (d, row) in drow.iter_mut().zip(tw) {
            let mut acc = T::zero();
            for &(s, w) in row {
                acc += w * srow[s];
            }
            *d = acc;
        }
    }
}

fn apply_rows_t<T: Element>(gsrc: &mut [T], w_in: usize, tw: &Taps<T>, gdst: &[T]) {
    let w_out = tw.len();
    for (srow, drow) in gsrc.chunks_mut(w_in).zip(gdst.chunks(w_out)) {
        for (&g, row) in drow.iter().zip(tw) {
            for &(s, w) in row {
                srow[s] += w * g;
            }
        }
    }
}

/// Resample the H axis of one `[H, W]` plane.
fn apply_cols<T: Element>(src: &[T], w: usize, th: &Taps<T>, dst: &mut [T]) {
    for (oy, row) in th.iter().enumerate() {
        let drow = &mut dst[oy * w..(oy + 1) * w];
        drow.fill(T::zero());
        for &(s, wt) in row {
            let srow = &src[s * w..(s + 1) * w];
            drow.iter_mut().zip(srow).for_each(|(d, &v)| *d += wt * v);
        }
    }
}

fn apply_cols_t<T: Element>(gsrc: &mut [T], w: usize, th: &Taps<T>, gdst: &[T]) {
    for (oy, row) in th.iter().enumerate() {
        let drow = &gdst[oy * w..(oy + 1) * w];
        for &(s, wt) in row {
            let srow = &mut gsrc[s * w..(s + 1) * w];
            srow.iter_mut().zip(drow).for_each(|(d, &g)| *d += wt * g);
        }
    }
}

impl<'t, T: Element> Var<'t, T> {
    /// Resample the spatial axes of an `[N,C,H,W]` map to `out_h × out_w`.
    pub fn resize2d(&self, out_h: usize, out_w: usize, mode: Interpolation) -> Result<Var<'t, T>> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::shape("resize2d", format!("expected [N,C,H,W], got {s:?}")));
        }
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("resize2d output extents must be >= 1"));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let tw: Taps<T> = taps(w, out_w, mode);
        let th: Taps<T> = taps(h, out_h, mode);
        let value = {
            let x = self.value();
            let mut tmp = vec![T::zero(); planes * h * out_w];
            apply_rows(x.data(), w, &tw, &mut tmp);
            let mut out = vec![T::zero(); planes * out_h * out_w];
            for p in 0..planes {
                apply_cols(
                    &tmp[p * h * out_w..(p + 1) * h * out_w],
                    out_w,
                    &th,
                    &mut out[p * out_h * out_w..(p + 1) * out_h * out_w],
                );
            }
            Tensor::new(&[s[0], s[1], out_h, out_w], out)?
        };
        Ok(self.tape().push_op(value, &[self.id()], move |ctx| {
            let g = ctx.grad;
            let mut gtmp = vec![T::zero(); planes * h * out_w];
            for p in 0..planes {
                apply_cols_t(
                    &mut gtmp[p * h * out_w..(p + 1) * h * out_w],
                    out_w,
                    &th,
                    &g[p * out_h * out_w..(p + 1) * out_h * out_w],
                );
            }
            let mut gx = vec![T::zero(); planes * h * w];
            apply_rows_t(&mut gx, w, &tw, &gtmp);
            vec![Some(gx)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn weights_partition_unity() {
        for mode in Interpolation::ALL {
            for (a, b) in [(4, 9), (9, 4), (5, 5), (1, 3), (3, 1), (7, 16)] {
                for row in resize_weights(a, b, mode) {
                    let s: f64 = row.iter().map(|x| x.1).sum();
                    assert!((s - 1.0).abs() < 1e-12, "{mode} {a}->{b}: {s}");
                }
            }
        }
    }

    #[test]
    fn unknown_mode_rejected() {
        assert!("lanczos".parse::<Interpolation>().unwrap_err().is_invalid_argument());
        assert_eq!("nearest-exact".parse::<Interpolation>().unwrap(), Interpolation::Nearest);
    }

    #[test]
    fn zero_output_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.var(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(x.resize2d(0, 2, Interpolation::Bilinear).is_err());
    }

    #[test]
    fn area_halving_is_average_pool() {
        let tape = Tape::<f64>::new();
        let x = tape.var(Tensor::from_fn(&[1, 1, 2, 2], |i| i as f64));
        let y = x.resize2d(1, 1, Interpolation::Area).unwrap();
        assert_eq!(y.value().data(), &[1.5]);
    }
}
