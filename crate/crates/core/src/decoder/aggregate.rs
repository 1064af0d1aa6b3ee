use crate::error::{Error, Result};
use crate::impl_module;
use crate::layers::{resize_to, Conv2d, ConvSpec};
use crate::rng::RngStream;
use crate::tensor::{Element, Interpolation, Tape, Var};
use std::fmt;
use std::str::FromStr;

/// How two feature or prediction streams are joined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Aggregation {
    #[default]
    Additive,
    /// Channel concatenation followed by a learned 1×1 convolution.
    Concatenation,
}

impl Aggregation {
    pub fn name(self) -> &'static str {
        match self {
            Aggregation::Additive => "additive",
            Aggregation::Concatenation => "concatenation",
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "additive" | "add" => Ok(Aggregation::Additive),
            "concatenation" | "concat" => Ok(Aggregation::Concatenation),
            other => Err(Error::invalid(format!("unknown aggregation '{other}'"))),
        }
    }
}

/// Weights of the four prediction heads, applied p1 (finest) … p4.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub psi: f64,
}

impl Default for HeadWeights {
    fn default() -> Self {
        Self::uniform(1.0)
    }
}

impl HeadWeights {
    pub fn uniform(w: f64) -> Self {
        Self {
            alpha: w,
            beta: w,
            gamma: w,
            psi: w,
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.alpha, self.beta, self.gamma, self.psi]
    }

    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().all(|w| w.is_finite()) {
            Ok(())
        } else {
            Err(Error::invalid("head weights must be finite"))
        }
    }
}

/// Ordered class-logit maps sharing one shape.
#[derive(Clone, Debug)]
pub struct PredictionSet<'t, T: Element> {
    maps: Vec<Var<'t, T>>,
}

impl<'t, T: Element> PredictionSet<'t, T> {
    pub fn new(maps: Vec<Var<'t, T>>) -> Result<Self> {
        let first = maps.first().ok_or_else(|| Error::invalid("prediction set is empty"))?.shape();
        if let Some(m) = maps.iter().find(|m| m.shape() != first) {
            return Err(Error::invalid(format!(
                "prediction maps differ in shape: {first:?} vs {:?}",
                m.shape()
            )));
        }
        Ok(Self { maps })
    }

    pub fn maps(&self) -> &[Var<'t, T>] {
        &self.maps
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

/// `α·p1 + β·p2 + γ·p3 + ψ·p4` before the class softmax.
pub fn weighted_sum<'t, T: Element>(maps: &[Var<'t, T>], w: &HeadWeights) -> Result<Var<'t, T>> {
    if maps.len() != 4 {
        return Err(Error::invalid(format!("expected 4 prediction maps, got {}", maps.len())));
    }
    w.validate()?;
    let mut acc: Option<Var<'t, T>> = None;
    for (m, &wi) in maps.iter().zip(&w.as_array()) {
        let term = if wi == 1.0 { *m } else { m.scale(wi)? };
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(&term)?,
        });
    }
    Ok(acc.expect("four maps"))
}

/// Class probabilities: softmax over the class axis of [`weighted_sum`].
pub fn combine_predictions<'t, T: Element>(maps: &[Var<'t, T>], w: &HeadWeights) -> Result<Var<'t, T>> {
    weighted_sum(maps, w)?.softmax(1)
}

/// Merges the per-stage head maps of two decoders at ground-truth resolution.
#[derive(Clone, Debug)]
pub struct Aggregator<T: Element> {
    pub mode: Aggregation,
    pub interpolation: Interpolation,
    /// One `2K → K` 1×1 combiner per stage (concatenation mode only).
    pub combiners: Vec<Conv2d<T>>,
}
impl_module!(Aggregator { combiners });

impl<T: Element> Aggregator<T> {
    pub fn new(
        name: &str,
        mode: Aggregation,
        num_classes: usize,
        interpolation: Interpolation,
        rng: &mut RngStream,
    ) -> Self {
        let combiners = match mode {
            Aggregation::Additive => Vec::new(),
            Aggregation::Concatenation => (0..4)
                .map(|i| {
                    Conv2d::new(
                        &format!("{name}.combiner{}", i + 1),
                        ConvSpec::new(2 * num_classes, num_classes, 1),
                        rng,
                    )
                })
                .collect(),
        };
        Self {
            mode,
            interpolation,
            combiners,
        }
    }

    /// Set every combiner to `[I | I]` with zero bias, making concatenation
    /// compute the additive join.
    pub fn set_identity_combiners(&mut self) {
        for c in &mut self.combiners {
            let k = c.out_channels();
            c.zero();
            let w = c.weight.value.data_mut();
            for o in 0..k {
                w[o * 2 * k + o] = T::one();
                w[o * 2 * k + k + o] = T::one();
            }
        }
    }

    /// Resize both sets to `out_res` and join them per stage. With `b` absent
    /// the resized maps of `a` are returned.
    pub fn aggregate<'t>(
        &self,
        tape: &'t Tape<T>,
        a: &[Var<'t, T>],
        b: Option<&[Var<'t, T>]>,
        out_res: usize,
    ) -> Result<PredictionSet<'t, T>> {
        if let Some(b) = b {
            if b.len() != a.len() {
                return Err(Error::invalid(format!(
                    "prediction sets differ in length: {} vs {}",
                    a.len(),
                    b.len()
                )));
            }
        }
        if self.mode == Aggregation::Concatenation && b.is_some() && self.combiners.len() < a.len() {
            return Err(Error::invalid("not enough combiners for the prediction set"));
        }
        let mut maps = Vec::with_capacity(a.len());
        for (i, pa) in a.iter().enumerate() {
            let ra = resize_to(pa, out_res, out_res, self.interpolation)?;
            let Some(b) = b else {
                maps.push(ra);
                continue;
            };
            let rb = resize_to(&b[i], out_res, out_res, self.interpolation)?;
            maps.push(match self.mode {
                Aggregation::Additive => ra.add(&rb)?,
                Aggregation::Concatenation => self.combiners[i].forward(tape, &Var::concat(&[ra, rb], 1)?)?,
            });
        }
        PredictionSet::new(maps)
    }
}
