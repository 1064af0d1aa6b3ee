//! Matrix products and 2-D convolution.

use super::tape::Var;
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Row-major `c = a·b` (or `c += a·b`), with optional stored transposes.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_trans: bool,
    b: &[T],
    b_trans: bool,
    c: &mut [T],
    accumulate: bool,
) {
    T::gemm_raw(m, k, n, a, a_trans, b, b_trans, c, accumulate)
}

/// Geometry of one conv2d call.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    groups: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn cg(&self) -> usize {
        self.c / self.groups
    }
    fn og(&self) -> usize {
        self.o / self.groups
    }
    fn k(&self) -> usize {
        self.cg() * self.kh * self.kw
    }
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
    fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.cg() == 1 && self.og() == 1
    }
}

/// Unfold channels `[c0, c0+cg)` of one image into `[cg·kh·kw, ho·wo]`.
fn im2col<T: Element>(x: &[T], g: &ConvGeom, c0: usize, col: &mut [T]) {
    let (h, w, ho, wo) = (g.h, g.w, g.ho, g.wo);
    let plane = ho * wo;
    for c in 0..g.cg() {
        let src = &x[(c0 + c) * h * w..(c0 + c + 1) * h * w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            srow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into image channels.
fn col2im<T: Element>(col: &[T], g: &ConvGeom, c0: usize, x: &mut [T]) {
    let (h, w, ho, wo) = (g.h, g.w, g.ho, g.wo);
    let plane = ho * wo;
    for c in 0..g.cg() {
        let dst = &mut x[(c0 + c) * h * w..(c0 + c + 1) * h * w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward<T: Element>(x: &[T], wt: &[T], g: &ConvGeom) -> Vec<T> {
    let plane = g.ho * g.wo;
    let mut out = vec![T::zero(); g.n * g.o * plane];
    if g.is_depthwise() {
        for n in 0..g.n {
            for c in 0..g.c {
                let src = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                let dst = &mut out[(n * g.o + c) * plane..(n * g.o + c + 1) * plane];
                let k = &wt[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
                depthwise_plane(src, k, dst, g);
            }
        }
        return out;
    }
    let (cg, og, kk) = (g.cg(), g.og(), g.k());
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * plane] };
    for n in 0..g.n {
        let xn = &x[n * g.c * g.h * g.w..(n + 1) * g.c * g.h * g.w];
        for gi in 0..g.groups {
            let cols: &[T] = if g.is_pointwise() {
                &xn[gi * cg * plane..(gi + 1) * cg * plane]
            } else {
                im2col(xn, g, gi * cg, &mut col);
                &col
            };
            let wg = &wt[gi * og * kk..(gi + 1) * og * kk];
            let dst = &mut out[(n * g.o + gi * og) * plane..(n * g.o + (gi + 1) * og) * plane];
            gemm(og, kk, plane, wg, false, cols, false, dst, false);
        }
    }
    out
}

fn depthwise_plane<T: Element>(src: &[T], k: &[T], dst: &mut [T], g: &ConvGeom) {
    for oy in 0..g.ho {
        for ky in 0..g.kh {
            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
            if iy < 0 || iy >= g.h as isize {
                continue;
            }
            let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
            let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
            for kx in 0..g.kw {
                let kv = k[ky * g.kw + kx];
                for (ox, d) in drow.iter_mut().enumerate() {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix >= 0 && ix < g.w as isize {
                        *d += kv * srow[ix as usize];
                    }
                }
            }
        }
    }
}

fn depthwise_backward<T: Element>(
    src: &[T],
    k: &[T],
    gout: &[T],
    gsrc: Option<&mut [T]>,
    gk: Option<&mut [T]>,
    g: &ConvGeom,
) {
    let mut gsrc = gsrc;
    let mut gk = gk;
    for oy in 0..g.ho {
        for ky in 0..g.kh {
            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
            if iy < 0 || iy >= g.h as isize {
                continue;
            }
            let iy = iy as usize;
            let grow = &gout[oy * g.wo..(oy + 1) * g.wo];
            for kx in 0..g.kw {
                let kv = k[ky * g.kw + kx];
                let mut acc = T::zero();
                for (ox, &gv) in grow.iter().enumerate() {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix >= 0 && ix < g.w as isize {
                        let ix = iy * g.w + ix as usize;
                        acc += gv * src[ix];
                        if let Some(gs) = gsrc.as_deref_mut() {
                            gs[ix] += gv * kv;
                        }
                    }
                }
                if let Some(gk) = gk.as_deref_mut() {
                    gk[ky * g.kw + kx] += acc;
                }
            }
        }
    }
}

impl<'t, T: Element> Var<'t, T> {
    /// Batched matrix product: `[M,K]·[K,N]` or `[B,M,K]·[B,K,N]`.
    pub fn matmul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(other)?;
        let (sa, sb) = (self.shape(), other.shape());
        let bad = || Error::shape("matmul", format!("{sa:?} x {sb:?}"));
        let (batch, m, k, n) = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[0] => (1, sa[0], sa[1], sb[1]),
            (3, 3) if sa[0] == sb[0] && sa[2] == sb[1] => (sa[0], sa[1], sa[2], sb[2]),
            _ => return Err(bad()),
        };
        let value = {
            let (a, b) = (self.value(), other.value());
            let mut out = vec![T::zero(); batch * m * n];
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &a.data()[i * m * k..],
                    false,
                    &b.data()[i * k * n..],
                    false,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
            let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
            Tensor::new(&shape, out)?
        };
        Ok(self.tape().push_op(value, &[self.id(), other.id()], move |ctx| {
            let (a, b, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad);
            let ga = ctx.needs[0].then(|| {
                let mut ga = vec![T::zero(); batch * m * k];
                for i in 0..batch {
                    gemm(m, n, k, &g[i * m * n..], false, &b[i * k * n..], true, &mut ga[i * m * k..(i + 1) * m * k], false);
                }
                ga
            });
            let gb = ctx.needs[1].then(|| {
                let mut gb = vec![T::zero(); batch * k * n];
                for i in 0..batch {
                    gemm(k, m, n, &a[i * m * k..], true, &g[i * m * n..], false, &mut gb[i * k * n..(i + 1) * k * n], false);
                }
                gb
            });
            vec![ga, gb]
        }))
    }

    /// 2-D cross-correlation over `[N,C,H,W]` with kernel `[O,C/groups,kh,kw]`.
    pub fn conv2d(
        &self,
        kernel: &Var<'t, T>,
        bias: Option<&Var<'t, T>>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var<'t, T>> {
        self.same_tape(kernel)?;
        let (xs, ks) = (self.shape(), kernel.shape());
        if xs.len() != 4 || ks.len() != 4 {
            return Err(Error::shape("conv2d", format!("input {xs:?}, kernel {ks:?}")));
        }
        if stride == 0 || groups == 0 {
            return Err(Error::invalid("conv2d stride and groups must be positive"));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kc, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if c % groups != 0 || o % groups != 0 || kc != c / groups {
            return Err(Error::shape(
                "conv2d",
                format!("input {xs:?}, kernel {ks:?}, groups {groups}"),
            ));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape("conv2d", format!("kernel {kh}x{kw} exceeds padded input {h}x{w}")));
        }
        if let Some(b) = bias {
            self.same_tape(b)?;
            if b.shape() != [o] {
                return Err(Error::shape("conv2d", format!("bias {:?} for {o} outputs", b.shape())));
            }
        }
        let g = ConvGeom {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride,
            pad: padding,
            groups,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (w + 2 * padding - kw) / stride + 1,
        };
        let plane = g.ho * g.wo;
        let value = {
            let (x, k) = (self.value(), kernel.value());
            let mut out = conv_forward(x.data(), k.data(), &g);
            if let Some(b) = bias {
                let b = b.value();
                for (i, chunk) in out.chunks_mut(plane).enumerate() {
                    let bv = b.data()[i % o];
                    chunk.iter_mut().for_each(|v| *v += bv);
                }
            }
            Tensor::new(&[n, o, g.ho, g.wo], out)?
        };
        let mut parents = vec![self.id(), kernel.id()];
        if let Some(b) = bias {
            parents.push(b.id());
        }
        let has_bias = bias.is_some();
        Ok(self.tape().push_op(value, &parents, move |ctx| {
            let (x, k, gout) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad);
            let mut gx = ctx.needs[0].then(|| vec![T::zero(); x.len()]);
            let mut gk = ctx.needs[1].then(|| vec![T::zero(); k.len()]);
            if g.is_depthwise() {
                let hw = g.h * g.w;
                let kk = g.kh * g.kw;
                for ni in 0..g.n {
                    for ci in 0..g.c {
                        let base = ni * g.c + ci;
                        depthwise_backward(
                            &x[base * hw..(base + 1) * hw],
                            &k[ci * kk..(ci + 1) * kk],
                            &gout[base * plane..(base + 1) * plane],
                            gx.as_mut().map(|v| &mut v[base * hw..(base + 1) * hw]),
                            gk.as_mut().map(|v| &mut v[ci * kk..(ci + 1) * kk]),
                            &g,
                        );
                    }
                }
            } else {
                let (cg, og, kk) = (g.cg(), g.og(), g.k());
                let img = g.c * g.h * g.w;
                let mut col = vec![T::zero(); kk * plane];
                let mut gcol = vec![T::zero(); kk * plane];
                for ni in 0..g.n {
                    let xn = &x[ni * img..(ni + 1) * img];
                    for gi in 0..g.groups {
                        let go = &gout[(ni * g.o + gi * og) * plane..(ni * g.o + (gi + 1) * og) * plane];
                        if let Some(gk) = gk.as_mut() {
                            let cols: &[T] = if g.is_pointwise() {
                                &xn[gi * cg * plane..(gi + 1) * cg * plane]
                            } else {
                                im2col(xn, &g, gi * cg, &mut col);
                                &col
                            };
                            gemm(og, plane, kk, go, false, cols, true, &mut gk[gi * og * kk..(gi + 1) * og * kk], true);
                        }
                        if let Some(gx) = gx.as_mut() {
                            let wg = &k[gi * og * kk..(gi + 1) * og * kk];
                            if g.is_pointwise() {
                                let dst = &mut gx[ni * img + gi * cg * plane..ni * img + (gi + 1) * cg * plane];
                                gemm(kk, og, plane, wg, true, go, false, dst, true);
                            } else {
                                gemm(kk, og, plane, wg, true, go, false, &mut gcol, false);
                                col2im(&gcol, &g, gi * cg, &mut gx[ni * img..(ni + 1) * img]);
                            }
                        }
                    }
                }
            }
            let mut grads = vec![gx, gk];
            if has_bias {
                let gb = ctx.needs[2].then(|| {
                    let mut gb = vec![T::zero(); g.o];
                    for (i, chunk) in gout.chunks(plane).enumerate() {
                        let s: T = chunk.iter().copied().sum();
                        gb[i % g.o] += s;
                    }
                    gb
                });
                grads.push(gb);
            }
            grads
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn identity_kernel() {
        let tape = Tape::<f64>::new();
        let x = tape.var(Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64));
        let k = tape.var(Tensor::full(&[1, 1, 1, 1], 1.0));
        let y = x.conv2d(&k, None, 1, 0, 1).unwrap();
        assert_eq!(y.value().data(), x.value().data());
    }

    #[test]
    fn ones_kernel_center_and_corner() {
        let tape = Tape::<f64>::new();
        let x = tape.var(Tensor::full(&[1, 1, 5, 5], 1.0));
        let k = tape.var(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = x.conv2d(&k, None, 1, 1, 1).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 5, 5]);
        assert_eq!(y.value().at(&[0, 0, 2, 2]), 9.0);
        assert_eq!(y.value().at(&[0, 0, 0, 0]), 4.0);
    }

    #[test]
    fn output_size_formula() {
        let tape = Tape::<f64>::new();
        let x = tape.var(Tensor::zeros(&[2, 4, 9, 7]));
        let k = tape.var(Tensor::zeros(&[6, 2, 3, 3]));
        let y = x.conv2d(&k, None, 2, 1, 2).unwrap();
        assert_eq!(y.shape(), vec![2, 6, 5, 4]);
    }

    #[test]
    fn shape_errors() {
        let tape = Tape::<f64>::new();
        let x = tape.var(Tensor::zeros(&[1, 3, 4, 4]));
        let k = tape.var(Tensor::zeros(&[2, 2, 3, 3]));
        assert!(x.conv2d(&k, None, 1, 1, 1).unwrap_err().is_invalid_argument());
        let k = tape.var(Tensor::zeros(&[2, 3, 7, 7]));
        assert!(x.conv2d(&k, None, 1, 1, 1).is_err());
        let a = tape.var(Tensor::zeros(&[2, 3]));
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn depthwise_matches_grouped_general_path() {
        // groups=C with a channel multiplier of 2 takes the im2col route;
        // compare its even output channels to a pure depthwise conv.
        let tape = Tape::<f64>::new();
        let x = tape.var(Tensor::from_fn(&[1, 3, 5, 5], |i| ((i * 7) % 11) as f64 - 5.0));
        let kd = Tensor::from_fn(&[3, 1, 3, 3], |i| ((i * 5) % 7) as f64 * 0.1);
        let kg = Tensor::from_fn(&[6, 1, 3, 3], |i| kd.data()[(i / 18) * 9 + i % 9] * if (i / 9) % 2 == 0 { 1.0 } else { 0.0 });
        let yd = x.conv2d(&tape.var(kd), None, 2, 1, 3).unwrap();
        let yg = x.conv2d(&tape.var(kg), None, 2, 1, 3).unwrap();
        for c in 0..3 {
            for i in 0..3 {
                for j in 0..3 {
                    assert!((yd.value().at(&[0, c, i, j]) - yg.value().at(&[0, 2 * c, i, j])).abs() < 1e-12);
                }
            }
        }
    }
}

/// Row-stochastic attention matrix `softmax(q·kᵀ/√d)` over the last two axes
/// of `[T,d]` or `[B,T,d]` inputs.
pub fn attention_probs<'t, T: Element>(q: &Var<'t, T>, k: &Var<'t, T>) -> Result<Var<'t, T>> {
    let s = q.shape();
    let d = *s.last().ok_or_else(|| Error::invalid("attention on a scalar"))?;
    if d == 0 {
        return Err(Error::invalid("attention head dimension is zero"));
    }
    if k.shape() != s {
        return Err(Error::shape("attention", format!("q {s:?} vs k {:?}", k.shape())));
    }
    let r = s.len();
    let kt = k.transpose(r - 2, r - 1)?;
    q.matmul(&kt)?.scale(1.0 / (d as f64).sqrt())?.softmax(r - 1)
}

/// `softmax(q·kᵀ/√d)·v` on `[T,d]` or `[B,T,d]` operands.
pub fn scaled_dot_product_attention<'t, T: Element>(
    q: &Var<'t, T>,
    k: &Var<'t, T>,
    v: &Var<'t, T>,
) -> Result<Var<'t, T>> {
    if v.shape() != q.shape() {
        return Err(Error::shape("attention", format!("q {:?} vs v {:?}", q.shape(), v.shape())));
    }
    attention_probs(q, k)?.matmul(v)
}
