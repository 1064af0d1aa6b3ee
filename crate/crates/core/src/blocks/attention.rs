use crate::error::{Error, Result};
use crate::impl_module;
use crate::layers::{ChannelNorm, Conv2d, ConvSpec, Linear};
use crate::rng::RngStream;
use crate::tensor::{attention_probs, Element, Tape, Var};

/// How a feature map is split into token groups for self-attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Partition {
    /// Non-overlapping `w×w` spatial windows (local mixing).
    Block,
    /// A `w×w` grid of strided tokens: tokens sharing the same offset modulo
    /// `(H/w, W/w)` attend together (dilated global mixing).
    Grid,
}

impl Partition {
    fn axes(self) -> [usize; 6] {
        match self {
            Partition::Block => [0, 2, 4, 3, 5, 1],
            Partition::Grid => [0, 3, 5, 2, 4, 1],
        }
    }

    fn split(self, n: usize, c: usize, h: usize, w: usize, win: usize) -> [usize; 6] {
        match self {
            Partition::Block => [n, c, h / win, win, w / win, win],
            Partition::Grid => [n, c, win, h / win, win, w / win],
        }
    }
}

fn check_divisible(shape: &[usize], window: usize) -> Result<()> {
    if shape.len() != 4 {
        return Err(Error::shape("partition", format!("expected [N,C,H,W], got {shape:?}")));
    }
    if window == 0 || shape[2] % window != 0 || shape[3] % window != 0 {
        return Err(Error::invalid(format!(
            "spatial size {}x{} is not divisible by window {window}",
            shape[2], shape[3]
        )));
    }
    Ok(())
}

/// `[N,C,H,W]` → `[N·(H/w)·(W/w), w·w, C]` token groups.
pub fn partition<'t, T: Element>(x: &Var<'t, T>, window: usize, kind: Partition) -> Result<Var<'t, T>> {
    let s = x.shape();
    check_divisible(&s, window)?;
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    x.reshape(&kind.split(n, c, h, w, window))?
        .permute(&kind.axes())?
        .reshape(&[n * (h / window) * (w / window), window * window, c])
}

/// Inverse of [`partition`] for a map of shape `[n,c,h,w]`.
pub fn unpartition<'t, T: Element>(
    tokens: &Var<'t, T>,
    shape: [usize; 4],
    window: usize,
    kind: Partition,
) -> Result<Var<'t, T>> {
    check_divisible(&shape, window)?;
    let [n, c, h, w] = shape;
    let axes = kind.axes();
    let split = kind.split(n, c, h, w, window);
    let permuted: Vec<usize> = axes.iter().map(|&a| split[a]).collect();
    let mut inverse = [0; 6];
    for (i, &a) in axes.iter().enumerate() {
        inverse[a] = i;
    }
    tokens.reshape(&permuted)?.permute(&inverse)?.reshape(&shape)
}

/// Multi-head self-attention on `[B,T,C]` token groups with separate
/// query/key/value/output projections and no positional bias.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention<T: Element> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
    pub heads: usize,
}
impl_module!(MultiHeadAttention { q, k, v, o });

impl<T: Element> MultiHeadAttention<T> {
    pub fn new(name: &str, dim: usize, heads: usize, rng: &mut RngStream) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::invalid(format!("{dim} channels not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(&format!("{name}.q"), dim, dim, rng),
            k: Linear::new(&format!("{name}.k"), dim, dim, rng),
            v: Linear::new(&format!("{name}.v"), dim, dim, rng),
            o: Linear::new(&format!("{name}.o"), dim, dim, rng),
            heads,
        })
    }

    fn split_heads<'t>(&self, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let s = x.shape();
        let (b, t, c) = (s[0], s[1], s[2]);
        let d = c / self.heads;
        x.reshape(&[b, t, self.heads, d])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b * self.heads, t, d])
    }

    /// Attention matrices, `[B·heads, T, T]`.
    pub fn probs<'t>(&self, tape: &'t Tape<T>, tokens: &Var<'t, T>) -> Result<Var<'t, T>> {
        let q = self.split_heads(&self.q.forward(tape, tokens)?)?;
        let k = self.split_heads(&self.k.forward(tape, tokens)?)?;
        attention_probs(&q, &k)
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, tokens: &Var<'t, T>) -> Result<Var<'t, T>> {
        let s = tokens.shape();
        if s.len() != 3 {
            return Err(Error::shape("attention", format!("expected [B,T,C], got {s:?}")));
        }
        let (b, t, c) = (s[0], s[1], s[2]);
        let v = self.split_heads(&self.v.forward(tape, tokens)?)?;
        let y = self.probs(tape, tokens)?.matmul(&v)?;
        let y = y
            .reshape(&[b, self.heads, t, c / self.heads])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, t, c])?;
        self.o.forward(tape, &y)
    }
}

/// Partitioned self-attention on a `[N,C,H,W]` map: tokens are grouped by
/// `kind`, attention runs independently inside each group, and the result is
/// scattered back to the original layout.
pub fn window_attention<'t, T: Element>(
    tape: &'t Tape<T>,
    x: &Var<'t, T>,
    window: usize,
    kind: Partition,
    attn: &MultiHeadAttention<T>,
) -> Result<Var<'t, T>> {
    let s = x.shape();
    let tokens = partition(x, window, kind)?;
    let y = attn.forward(tape, &tokens)?;
    unpartition(&y, [s[0], s[1], s[2], s[3]], window, kind)
}

/// Position-wise feed-forward network: 1×1 → gelu → 1×1.
#[derive(Clone, Debug)]
pub struct Ffn<T: Element> {
    pub fc1: Conv2d<T>,
    pub fc2: Conv2d<T>,
}
impl_module!(Ffn { fc1, fc2 });

impl<T: Element> Ffn<T> {
    pub fn new(name: &str, dim: usize, expansion: usize, rng: &mut RngStream) -> Self {
        Self {
            fc1: Conv2d::new(&format!("{name}.fc1"), ConvSpec::new(dim, dim * expansion, 1), rng),
            fc2: Conv2d::new(&format!("{name}.fc2"), ConvSpec::new(dim * expansion, dim, 1), rng),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.fc1.forward(tape, x)?.gelu()?;
        self.fc2.forward(tape, &h)
    }
}

/// Pre-norm attention sub-block followed by a pre-norm FFN, both residual.
#[derive(Clone, Debug)]
pub struct AttentionUnit<T: Element> {
    pub norm1: ChannelNorm<T>,
    pub attn: MultiHeadAttention<T>,
    pub norm2: ChannelNorm<T>,
    pub ffn: Ffn<T>,
    pub window: usize,
    pub kind: Partition,
}
impl_module!(AttentionUnit { norm1, attn, norm2, ffn });

impl<T: Element> AttentionUnit<T> {
    pub fn new(
        name: &str,
        dim: usize,
        heads: usize,
        ffn_expansion: usize,
        window: usize,
        kind: Partition,
        rng: &mut RngStream,
    ) -> Result<Self> {
        Ok(Self {
            norm1: ChannelNorm::new(&format!("{name}.norm1"), dim),
            attn: MultiHeadAttention::new(&format!("{name}.attn"), dim, heads, rng)?,
            norm2: ChannelNorm::new(&format!("{name}.norm2"), dim),
            ffn: Ffn::new(&format!("{name}.ffn"), dim, ffn_expansion, rng),
            window,
            kind,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.norm1.forward(tape, x)?;
        let x = x.add(&window_attention(tape, &h, self.window, self.kind, &self.attn)?)?;
        let h = self.norm2.forward(tape, &x)?;
        x.add(&self.ffn.forward(tape, &h)?)
    }

    /// Zero the output projections of both residual branches.
    pub fn zero_residuals(&mut self) {
        self.attn.o.zero();
        self.ffn.fc2.zero();
    }
}
