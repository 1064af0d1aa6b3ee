//! Elementwise arithmetic with broadcasting, reductions and layout ops.

use super::tape::Var;
use super::{numel, split_axis, strides, Element, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

/// Numpy-style broadcast: shapes are right-aligned, extents must match or be 1.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let r = a.len().max(b.len());
    let pa = pad_shape(a, r);
    let pb = pad_shape(b, r);
    pa.iter()
        .zip(&pb)
        .map(|(&x, &y)| match (x, y) {
            (x, y) if x == y => Ok(x),
            (1, y) => Ok(y),
            (x, 1) => Ok(x),
            _ => Err(Error::shape("broadcast", format!("{a:?} vs {b:?}"))),
        })
        .collect()
}

fn pad_shape(s: &[usize], rank: usize) -> Vec<usize> {
    let mut v = vec![1; rank - s.len()];
    v.extend_from_slice(s);
    v
}

/// Strides of `shape` viewed at the broadcast `out` shape (0 on expanded axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let p = pad_shape(shape, out.len());
    let st = strides(&p);
    p.iter()
        .zip(out)
        .zip(st)
        .map(|((&d, &o), s)| if d == 1 && o != 1 { 0 } else { s })
        .collect()
}

/// Visit `(out_offset, a_offset, b_offset)` for every output element in
/// row-major order.
#[inline]
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let r = out.len();
    if r == 0 {
        f(0, 0, 0);
        return;
    }
    let last = out[r - 1];
    let (la, lb) = (sa[r - 1], sb[r - 1]);
    let outer: usize = out[..r - 1].iter().product();
    let mut idx = vec![0usize; r - 1];
    let (mut ia, mut ib, mut o) = (0usize, 0usize, 0usize);
    for _ in 0..outer {
        let (mut a, mut b) = (ia, ib);
        for _ in 0..last {
            f(o, a, b);
            o += 1;
            a += la;
            b += lb;
        }
        for ax in (0..r - 1).rev() {
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            ia -= sa[ax] * out[ax];
            ib -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

#[inline(always)]
fn apply<T: Element>(op: BinOp, x: T, y: T) -> T {
    match op {
        BinOp::Add => x + y,
        BinOp::Sub => x - y,
        BinOp::Mul => x * y,
        BinOp::Div => x / y,
    }
}

impl<'t, T: Element> Var<'t, T> {
    fn binary(&self, other: &Var<'t, T>, op: BinOp) -> Result<Var<'t, T>> {
        self.same_tape(other)?;
        let tape = self.tape();
        let (value, same) = {
            let a = self.value();
            let b = other.value();
            if a.shape() == b.shape() {
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| apply(op, x, y)).collect();
                (Tensor::new(a.shape(), data)?, true)
            } else {
                let out = broadcast_shape(a.shape(), b.shape())?;
                let sa = broadcast_strides(a.shape(), &out);
                let sb = broadcast_strides(b.shape(), &out);
                let mut data = vec![T::zero(); numel(&out)];
                let (ad, bd) = (a.data(), b.data());
                for_each_broadcast(&out, &sa, &sb, |o, i, j| data[o] = apply(op, ad[i], bd[j]));
                (Tensor::new(&out, data)?, false)
            }
        };
        Ok(tape.push_op(value, &[self.id(), other.id()], move |ctx| {
            let (a, b, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
            let mut ga = ctx.needs[0].then(|| vec![T::zero(); a.numel()]);
            let mut gb = ctx.needs[1].then(|| vec![T::zero(); b.numel()]);
            let (ad, bd) = (a.data(), b.data());
            let mut visit = |o: usize, i: usize, j: usize| {
                let (da, db) = match op {
                    BinOp::Add => (g[o], g[o]),
                    BinOp::Sub => (g[o], -g[o]),
                    BinOp::Mul => (g[o] * bd[j], g[o] * ad[i]),
                    BinOp::Div => (g[o] / bd[j], -g[o] * ad[i] / (bd[j] * bd[j])),
                };
                if let Some(ga) = ga.as_mut() {
                    ga[i] += da;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[j] += db;
                }
            };
            if same {
                for o in 0..g.len() {
                    visit(o, o, o);
                }
            } else {
                let out = ctx.out.shape();
                let sa = broadcast_strides(a.shape(), out);
                let sb = broadcast_strides(b.shape(), out);
                for_each_broadcast(out, &sa, &sb, visit);
            }
            vec![ga, gb]
        }))
    }

    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinOp::Add)
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinOp::Sub)
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinOp::Mul)
    }

    pub fn div(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinOp::Div)
    }

    /// `a·x + b` elementwise with constants `a`, `b`.
    pub fn affine(&self, a: f64, b: f64) -> Result<Var<'t, T>> {
        let (ca, cb) = (T::lit(a), T::lit(b));
        let value = {
            let x = self.value();
            Tensor::new(x.shape(), x.data().iter().map(|&v| ca * v + cb).collect())?
        };
        Ok(self.tape().push_op(value, &[self.id()], move |ctx| {
            vec![Some(ctx.grad.iter().map(|&g| g * ca).collect())]
        }))
    }

    pub fn scale(&self, a: f64) -> Result<Var<'t, T>> {
        self.affine(a, 0.0)
    }

    pub fn add_scalar(&self, b: f64) -> Result<Var<'t, T>> {
        self.affine(1.0, b)
    }

    pub fn neg(&self) -> Result<Var<'t, T>> {
        self.affine(-1.0, 0.0)
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self) -> Result<Var<'t, T>> {
        let (value, n) = {
            let x = self.value();
            let s: T = x.data().iter().copied().sum();
            (Tensor::scalar(s), x.numel())
        };
        Ok(self
            .tape()
            .push_op(value, &[self.id()], move |ctx| vec![Some(vec![ctx.grad[0]; n])]))
    }

    pub fn mean(&self) -> Result<Var<'t, T>> {
        let n = self.value().numel();
        self.sum()?.scale(1.0 / n as f64)
    }

    fn check_axis(&self, axis: usize, op: &'static str) -> Result<Vec<usize>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::shape(op, format!("axis {axis} out of range for {shape:?}")));
        }
        Ok(shape)
    }

    /// Sum along one axis, keeping it with extent 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t, T>> {
        let shape = self.check_axis(axis, "sum_axis")?;
        let (outer, n, inner) = split_axis(&shape, axis);
        let value = {
            let x = self.value();
            let xd = x.data();
            let mut out = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for k in 0..n {
                    let src = &xd[(o * n + k) * inner..(o * n + k + 1) * inner];
                    let dst = &mut out[o * inner..(o + 1) * inner];
                    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                }
            }
            let mut os = shape.clone();
            os[axis] = 1;
            Tensor::new(&os, out)?
        };
        Ok(self.tape().push_op(value, &[self.id()], move |ctx| {
            let g = ctx.grad;
            let mut gx = vec![T::zero(); outer * n * inner];
            for o in 0..outer {
                for k in 0..n {
                    gx[(o * n + k) * inner..(o * n + k + 1) * inner]
                        .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(gx)]
        }))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t, T>> {
        let n = self.check_axis(axis, "mean_axis")?[axis];
        self.sum_axis(axis)?.scale(1.0 / n as f64)
    }

    /// Maximum along one axis, keeping it with extent 1. Ties route the
    /// gradient to the first maximal element.
    pub fn max_axis(&self, axis: usize) -> Result<Var<'t, T>> {
        let shape = self.check_axis(axis, "max_axis")?;
        let (outer, n, inner) = split_axis(&shape, axis);
        let (value, arg) = {
            let x = self.value();
            let xd = x.data();
            let mut out = vec![T::zero(); outer * inner];
            let mut arg = vec![0usize; outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let mut best = xd[o * n * inner + i];
                    let mut bi = 0;
                    for k in 1..n {
                        let v = xd[(o * n + k) * inner + i];
                        if v > best {
                            best = v;
                            bi = k;
                        }
                    }
                    out[o * inner + i] = best;
                    arg[o * inner + i] = (o * n + bi) * inner + i;
                }
            }
            let mut os = shape.clone();
            os[axis] = 1;
            (Tensor::new(&os, out)?, arg)
        };
        let total = numel(&shape);
        Ok(self.tape().push_op(value, &[self.id()], move |ctx| {
            let mut gx = vec![T::zero(); total];
            for (o, &src) in arg.iter().enumerate() {
                gx[src] += ctx.grad[o];
            }
            vec![Some(gx)]
        }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let value = {
            let x = self.value();
            if numel(shape) != x.numel() {
                return Err(Error::shape(
                    "reshape",
                    format!("{:?} -> {shape:?}", x.shape()),
                ));
            }
            Tensor::new(shape, x.data().to_vec())?
        };
        Ok(self
            .tape()
            .push_op(value, &[self.id()], |ctx| vec![Some(ctx.grad.to_vec())]))
    }

    /// Reorder axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let r = shape.len();
        let mut seen = vec![false; r];
        if axes.len() != r || axes.iter().any(|&a| a >= r || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", format!("axes {axes:?} for rank {r}")));
        }
        let in_strides = strides(&shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let zero = vec![0; r];
        let value = {
            let x = self.value();
            let xd = x.data();
            let mut out = Vec::with_capacity(x.numel());
            for_each_broadcast(&out_shape, &src_strides, &zero, |_, i, _| out.push(xd[i]));
            Tensor::new(&out_shape, out)?
        };
        let n = numel(&shape);
        Ok(self.tape().push_op(value, &[self.id()], move |ctx| {
            let mut gx = vec![T::zero(); n];
            for_each_broadcast(&out_shape, &src_strides, &zero, |o, i, _| gx[i] = ctx.grad[o]);
            vec![Some(gx)]
        }))
    }

    /// Swap two axes.
    pub fn transpose(&self, a: usize, b: usize) -> Result<Var<'t, T>> {
        let r = self.shape().len();
        if a >= r || b >= r {
            return Err(Error::shape("transpose", format!("axes ({a},{b}) for rank {r}")));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(a, b);
        self.permute(&axes)
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = first.check_axis(axis, "concat")?;
        let mut sizes = Vec::with_capacity(parts.len());
        for p in parts {
            first.same_tape(p)?;
            let s = p.shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", format!("{base:?} vs {s:?} on axis {axis}")));
            }
            sizes.push(s[axis]);
        }
        let total: usize = sizes.iter().sum();
        let (outer, _, inner) = split_axis(&base, axis);
        let value = {
            let mut out = Vec::with_capacity(outer * total * inner);
            let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
            for o in 0..outer {
                for (v, &n) in vals.iter().zip(&sizes) {
                    out.extend_from_slice(&v.data()[o * n * inner..(o + 1) * n * inner]);
                }
            }
            let mut os = base.clone();
            os[axis] = total;
            Tensor::new(&os, out)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id()).collect();
        Ok(first.tape().push_op(value, &ids, move |ctx| {
            let mut gs: Vec<Vec<T>> = sizes.iter().map(|&n| Vec::with_capacity(outer * n * inner)).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gp, &n) in gs.iter_mut().zip(&sizes) {
                    gp.extend_from_slice(&ctx.grad[off..off + n * inner]);
                    off += n * inner;
                }
            }
            gs.into_iter().map(Some).collect()
        }))
    }
}
