//! Pointwise nonlinearities, softmax and normalization.

use super::tape::Var;
use super::{split_axis, Element, Tensor};
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<'t, T: Element> Var<'t, T> {
    fn unary(&self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Result<Var<'t, T>> {
        let value = {
            let x = self.value();
            Tensor::new(x.shape(), x.data().iter().map(|&v| f(v)).collect())?
        };
        Ok(self.tape().push_op(value, &[self.id()], move |ctx| {
            let (x, y) = (ctx.inputs[0].data(), ctx.out.data());
            vec![Some(
                ctx.grad
                    .iter()
                    .zip(x.iter().zip(y))
                    .map(|(&g, (&xv, &yv))| g * df(xv, yv))
                    .collect(),
            )]
        }))
    }

    pub fn sigmoid(&self) -> Result<Var<'t, T>> {
        self.unary(sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn relu(&self) -> Result<Var<'t, T>> {
        self.unary(
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Result<Var<'t, T>> {
        self.unary(
            |x| {
                let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
                half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
            },
            |x, _| {
                let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
                let u = c * (x + a * x * x * x);
                let th = u.tanh();
                let du = c * (T::one() + T::lit(3.0) * a * x * x);
                half * (T::one() + th) + half * x * (T::one() - th * th) * du
            },
        )
    }

    fn axis_parts(&self, axis: usize, op: &'static str) -> Result<(Vec<usize>, usize, usize, usize)> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::shape(op, format!("axis {axis} out of range for {shape:?}")));
        }
        let (o, n, i) = split_axis(&shape, axis);
        Ok((shape, o, n, i))
    }

    /// Softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t, T>> {
        let (shape, outer, n, inner) = self.axis_parts(axis, "softmax")?;
        let value = {
            let x = self.value();
            let mut out = vec![T::zero(); x.numel()];
            for_lanes(outer, n, inner, |idx| {
                let m = idx.clone().map(|j| x.data()[j]).fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for j in idx.clone() {
                    let e = (x.data()[j] - m).exp();
                    out[j] = e;
                    s += e;
                }
                for j in idx {
                    out[j] /= s;
                }
            });
            Tensor::new(&shape, out)?
        };
        Ok(self.tape().push_op(value, &[self.id()], move |ctx| {
            let (y, g) = (ctx.out.data(), ctx.grad);
            let mut gx = vec![T::zero(); y.len()];
            for_lanes(outer, n, inner, |idx| {
                let dot: T = idx.clone().map(|j| g[j] * y[j]).sum();
                for j in idx {
                    gx[j] = y[j] * (g[j] - dot);
                }
            });
            vec![Some(gx)]
        }))
    }

    /// Numerically stable `ln(softmax(x))` along `axis`.
    pub fn log_softmax(&self, axis: usize) -> Result<Var<'t, T>> {
        let (shape, outer, n, inner) = self.axis_parts(axis, "log_softmax")?;
        let value = {
            let x = self.value();
            let mut out = vec![T::zero(); x.numel()];
            for_lanes(outer, n, inner, |idx| {
                let m = idx.clone().map(|j| x.data()[j]).fold(T::neg_infinity(), T::max);
                let s: T = idx.clone().map(|j| (x.data()[j] - m).exp()).sum();
                let lse = m + s.ln();
                for j in idx {
                    out[j] = x.data()[j] - lse;
                }
            });
            Tensor::new(&shape, out)?
        };
        Ok(self.tape().push_op(value, &[self.id()], move |ctx| {
            let (y, g) = (ctx.out.data(), ctx.grad);
            let mut gx = vec![T::zero(); y.len()];
            for_lanes(outer, n, inner, |idx| {
                let gs: T = idx.clone().map(|j| g[j]).sum();
                for j in idx {
                    gx[j] = g[j] - y[j].exp() * gs;
                }
            });
            vec![Some(gx)]
        }))
    }

    /// Zero-mean unit-variance normalization along `axis` (no affine terms).
    pub fn layer_norm(&self, axis: usize, eps: f64) -> Result<Var<'t, T>> {
        let (shape, outer, n, inner) = self.axis_parts(axis, "layer_norm")?;
        let eps = T::lit(eps);
        let nf = T::lit(n as f64);
        let (value, inv_std) = {
            let x = self.value();
            let xd = x.data();
            let mut out = vec![T::zero(); x.numel()];
            let mut inv = vec![T::zero(); outer * inner];
            let mut lane = 0;
            for_lanes(outer, n, inner, |idx| {
                let mean = idx.clone().map(|j| xd[j]).sum::<T>() / nf;
                let var = idx.clone().map(|j| (xd[j] - mean) * (xd[j] - mean)).sum::<T>() / nf;
                let is = T::one() / (var + eps).sqrt();
                for j in idx {
                    out[j] = (xd[j] - mean) * is;
                }
                inv[lane] = is;
                lane += 1;
            });
            (Tensor::new(&shape, out)?, inv)
        };
        Ok(self.tape().push_op(value, &[self.id()], move |ctx| {
            let (y, g) = (ctx.out.data(), ctx.grad);
            let mut gx = vec![T::zero(); y.len()];
            let mut lane = 0;
            for_lanes(outer, n, inner, |idx| {
                let mg = idx.clone().map(|j| g[j]).sum::<T>() / nf;
                let mgy = idx.clone().map(|j| g[j] * y[j]).sum::<T>() / nf;
                let is = inv_std[lane];
                for j in idx {
                    gx[j] = is * (g[j] - mg - y[j] * mgy);
                }
                lane += 1;
            });
            vec![Some(gx)]
        }))
    }
}

#[inline(always)]
pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Iterate the flat indices of every lane along the reduced axis.
#[inline]
fn for_lanes(
    outer: usize,
    n: usize,
    inner: usize,
    mut f: impl FnMut(std::iter::StepBy<std::ops::Range<usize>>),
) {
    for o in 0..outer {
        for i in 0..inner {
            let start = o * n * inner + i;
            f((start..start + n * inner).step_by(inner));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::<f64>::new();
        let x = tape.var(Tensor::from_fn(&[2, 3, 4], |i| (i as f64 * 0.37).sin() * 5.0));
        for axis in 0..3 {
            let y = x.softmax(axis).unwrap();
            let s = y.sum_axis(axis).unwrap();
            for &v in s.value().data() {
                assert!((v - 1.0).abs() < 1e-12);
            }
            assert!(y.value().data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let tape = Tape::<f64>::new();
        let x = tape.var(Tensor::from_fn(&[3, 5], |i| i as f64 * 0.9 - 4.0));
        let a = x.log_softmax(1).unwrap();
        let b = x.softmax(1).unwrap();
        for (p, q) in a.value().data().iter().zip(b.value().data()) {
            assert!((p - q.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_statistics() {
        let tape = Tape::<f64>::new();
        let x = tape.var(Tensor::from_fn(&[2, 4, 3], |i| (i * i) as f64 * 0.1));
        let y = x.layer_norm(1, 0.0).unwrap();
        let m = y.mean_axis(1).unwrap();
        assert!(m.value().data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert_eq!(sigmoid(0.0f32), 0.5);
    }
}
