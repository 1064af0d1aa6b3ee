//! Soft Dice, cross-entropy, their weighted combination, and combinatorial
//! subset-sum aggregation over multi-stage prediction maps.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor, Var};
use std::fmt;
use std::str::FromStr;

/// Weights of the two loss terms and the Dice smoothing constant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub smoothing: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::with_dice_weight(0.7)
    }
}

impl LossConfig {
    /// `lambda1 = w`, `lambda2 = 1 − w`.
    pub fn with_dice_weight(w: f64) -> Self {
        Self {
            lambda1: w,
            lambda2: 1.0 - w,
            smoothing: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) || (self.lambda1 + self.lambda2 - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "loss weights ({}, {}) must be non-negative and sum to 1",
                self.lambda1, self.lambda2
            )));
        }
        if !(self.smoothing.is_finite() && self.smoothing >= 0.0) {
            return Err(Error::invalid("dice smoothing must be finite and non-negative"));
        }
        Ok(())
    }
}

/// One-hot encoding `[N,C,H,W]` of an `[N,H,W]` label map, validated against
/// the logits shape.
pub fn one_hot<T: Element>(shape: &[usize], target: &[usize]) -> Result<Tensor<T>> {
    if shape.len() != 4 {
        return Err(Error::shape("loss", format!("expected [N,C,H,W] predictions, got {shape:?}")));
    }
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    if target.len() != n * hw {
        return Err(Error::invalid(format!(
            "target has {} labels, predictions cover {} pixels",
            target.len(),
            n * hw
        )));
    }
    let mut data = vec![T::zero(); n * c * hw];
    for (i, &l) in target.iter().enumerate() {
        if l >= c {
            return Err(Error::invalid(format!("label {l} out of range for {c} classes")));
        }
        let (b, p) = (i / hw, i % hw);
        data[(b * c + l) * hw + p] = T::one();
    }
    Tensor::new(shape, data)
}

/// Sum over batch and space, leaving one value per class `[1,C,1]`.
fn per_class_sum<'t, T: Element>(x: &Var<'t, T>) -> Result<Var<'t, T>> {
    let s = x.shape();
    x.reshape(&[s[0], s[1], s[2] * s[3]])?.sum_axis(2)?.sum_axis(0)
}

/// Soft Dice loss on class probabilities:
/// `1 − mean_c (2·Σ p·y + ε)/(Σ p + Σ y + ε)`.
pub fn dice_loss_from_probs<'t, T: Element>(probs: &Var<'t, T>, target: &[usize], cfg: &LossConfig) -> Result<Var<'t, T>> {
    let y = probs.tape().constant(one_hot(&probs.shape(), target)?);
    let inter = per_class_sum(&probs.mul(&y)?)?;
    let denom = per_class_sum(probs)?.add(&per_class_sum(&y)?)?.add_scalar(cfg.smoothing)?;
    let dice = inter.affine(2.0, cfg.smoothing)?.div(&denom)?;
    dice.mean()?.affine(-1.0, 1.0)
}

/// Soft Dice loss on logits (softmax over the class axis first).
pub fn dice_loss<'t, T: Element>(logits: &Var<'t, T>, target: &[usize], cfg: &LossConfig) -> Result<Var<'t, T>> {
    dice_loss_from_probs(&logits.softmax(1)?, target, cfg)
}

/// Mean over pixels of `−log softmax(logits)[target]`.
pub fn ce_loss<'t, T: Element>(logits: &Var<'t, T>, target: &[usize]) -> Result<Var<'t, T>> {
    let shape = logits.shape();
    let y = logits.tape().constant(one_hot(&shape, target)?);
    let pixels = (shape[0] * shape[2] * shape[3]) as f64;
    logits.log_softmax(1)?.mul(&y)?.sum()?.scale(-1.0 / pixels)
}

/// `lambda1 · dice + lambda2 · ce`; a term with weight 0 is skipped and a
/// term with weight 1 is used as is.
pub fn combined_loss<'t, T: Element>(logits: &Var<'t, T>, target: &[usize], cfg: &LossConfig) -> Result<Var<'t, T>> {
    cfg.validate()?;
    let mut terms = Vec::with_capacity(2);
    if cfg.lambda1 != 0.0 {
        let d = dice_loss(logits, target, cfg)?;
        terms.push(if cfg.lambda1 == 1.0 { d } else { d.scale(cfg.lambda1)? });
    }
    if cfg.lambda2 != 0.0 {
        let c = ce_loss(logits, target)?;
        terms.push(if cfg.lambda2 == 1.0 { c } else { c.scale(cfg.lambda2)? });
    }
    match terms[..] {
        [a] => Ok(a),
        [a, b] => a.add(&b),
        _ => unreachable!("validated weights sum to 1"),
    }
}

/// A non-empty subset of map indices, stored as a bitmask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SubsetIndex(u32);

impl SubsetIndex {
    pub fn new(mask: u32) -> Result<Self> {
        if mask == 0 {
            return Err(Error::invalid("subset must be non-empty"));
        }
        Ok(Self(mask))
    }

    pub fn mask(self) -> u32 {
        self.0
    }

    pub fn contains(self, i: usize) -> bool {
        i < 32 && self.0 >> i & 1 == 1
    }

    pub fn members(self) -> impl Iterator<Item = usize> {
        (0..32).filter(move |&i| self.contains(i))
    }
}

impl fmt::Display for SubsetIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m: Vec<String> = self.members().map(|i| i.to_string()).collect();
        write!(f, "{{{}}}", m.join(","))
    }
}

/// Largest supported number of prediction maps.
pub const MAX_MAPS: usize = 16;

/// All `2ⁿ − 1` non-empty subsets of `{0..n−1}` in ascending bitmask order.
pub fn enumerate_subsets(n: usize) -> Result<Vec<SubsetIndex>> {
    if !(1..=MAX_MAPS).contains(&n) {
        return Err(Error::invalid(format!("subset count needs 1 <= n <= {MAX_MAPS}, got {n}")));
    }
    Ok((1..(1u32 << n)).map(SubsetIndex).collect())
}

/// How per-subset losses are folded together.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Accumulation {
    /// Sum over all subsets.
    #[default]
    Sum,
    /// Keep only the last subset's loss (literal assignment reading).
    Overwrite,
}

impl Accumulation {
    pub fn name(self) -> &'static str {
        match self {
            Accumulation::Sum => "sum",
            Accumulation::Overwrite => "overwrite",
        }
    }
}

impl fmt::Display for Accumulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Accumulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" | "accumulate" => Ok(Accumulation::Sum),
            "overwrite" => Ok(Accumulation::Overwrite),
            other => Err(Error::invalid(format!("unknown accumulation '{other}'"))),
        }
    }
}

/// Subset-sum loss aggregation with an arbitrary per-subset loss. For each
/// non-empty subset `s` (ascending bitmask order) the logits `Σ_{i∈s} P_i`
/// are formed and passed to `loss`.
pub fn mutation_loss_with<'t, T: Element>(
    maps: &[Var<'t, T>],
    accumulation: Accumulation,
    mut loss: impl FnMut(&Var<'t, T>) -> Result<Var<'t, T>>,
) -> Result<Var<'t, T>> {
    if maps.is_empty() {
        return Err(Error::invalid("mutation loss needs at least one prediction map"));
    }
    let shape = maps[0].shape();
    if maps.iter().any(|m| m.shape() != shape) {
        return Err(Error::invalid("prediction maps must share one shape"));
    }
    let mut total: Option<Var<'t, T>> = None;
    for s in enumerate_subsets(maps.len())? {
        let mut members = s.members();
        let first = members.next().expect("non-empty subset");
        let mut y = maps[first];
        for i in members {
            y = y.add(&maps[i])?;
        }
        let l = loss(&y)?;
        total = Some(match (accumulation, total) {
            (Accumulation::Sum, Some(t)) => t.add(&l)?,
            _ => l,
        });
    }
    Ok(total.expect("at least one subset"))
}

/// Sum of [`combined_loss`] over every non-empty subset-sum of `maps`.
pub fn mutation_loss<'t, T: Element>(maps: &[Var<'t, T>], target: &[usize], cfg: &LossConfig) -> Result<Var<'t, T>> {
    mutation_loss_with(maps, Accumulation::Sum, |y| combined_loss(y, target, cfg))
}
