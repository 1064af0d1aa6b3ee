//! Central finite-difference checks of recorded gradients.
//!
//! The numerical side only ever calls the forward pass, so it is independent
//! of every backward rule it validates. A non-scalar output is contracted with
//! a fixed random weight vector before differentiation.

pub mod suite;

use crate::error::{Error, Result};
use crate::layers::{Module, Param};
use crate::rng::RngStream;
use crate::tensor::{Tape, Tensor, Var};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference half step.
    pub step: f64,
    /// Coordinates sampled per input tensor.
    pub input_coords: usize,
    /// Parameter coordinates sampled per trial (across all parameters).
    pub param_coords: usize,
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-6,
            input_coords: 6,
            param_coords: 12,
            tolerance: 1e-4,
        }
    }
}

impl GradCheckConfig {
    pub fn with_tolerance(mut self, tol: f64) -> Self {
        self.tolerance = tol;
        self
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub trials: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<28} trials={:<3} max_rel_err={:.3e} tol={:.0e} {}",
            self.name,
            self.trials,
            self.max_rel_error,
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, 1e-7)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-7)
}

/// Parameterless stand-in for checking plain functions of the inputs.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoParams;

impl Module<f64> for NoParams {
    fn visit_params<'a>(&'a self, _: &mut dyn FnMut(&'a Param<f64>)) {}
    fn visit_params_mut(&mut self, _: &mut dyn FnMut(&mut Param<f64>)) {}
}

fn distinct_indices(n: usize, k: usize, rng: &mut RngStream) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    let mut picked = Vec::with_capacity(k);
    while picked.len() < k {
        let i = rng.below(n);
        if !picked.contains(&i) {
            picked.push(i);
        }
    }
    picked
}

/// True when the one-sided differences around a coordinate disagree by more
/// than smooth curvature allows: the step crosses a relu/max kink and the
/// central difference is meaningless there.
fn straddles_kink(fp: f64, f0: f64, fm: f64, h: f64) -> bool {
    let (fwd, bwd) = ((fp - f0) / h, (f0 - fm) / h);
    (fwd - bwd).abs() > KINK_THRESHOLD * fwd.abs().max(bwd.abs()).max(1.0)
}

/// Relative one-sided-difference disagreement treated as a kink.
const KINK_THRESHOLD: f64 = 1e-2;

/// One finite-difference trial over sampled input and parameter coordinates.
/// Returns the relative error between analytic and numerical gradients;
/// coordinates whose step crosses a kink are skipped.
pub fn check_module<M, F>(
    module: &mut M,
    inputs: &[Tensor<f64>],
    forward: F,
    cfg: &GradCheckConfig,
    rng: &mut RngStream,
) -> Result<f64>
where
    M: Module<f64>,
    F: for<'t> Fn(&M, &'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_, f64>> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let out = forward(module, &tape, &vars)?;
    let out_shape = out.shape();
    let weights = Tensor::from_fn(&out_shape, |_| rng.normal());
    let s = out.mul(&tape.constant(weights.clone()))?.sum()?;
    let g_inputs = tape.grad_of(s, &vars)?;
    let g_params: BTreeMap<String, Vec<f64>> = tape.param_grads(s)?;
    drop(tape);

    let eval = |module: &M, inputs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::no_grad();
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = forward(module, &tape, &vars)?;
        let v = out.value();
        if v.shape() != out_shape.as_slice() {
            return Err(Error::invalid("forward output shape changed under perturbation"));
        }
        Ok(v.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
    };

    let h = cfg.step;
    let f0 = eval(module, inputs)?;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, g) in g_inputs.iter().enumerate() {
        for j in distinct_indices(g.numel(), cfg.input_coords, rng) {
            let x0 = work[i].data()[j];
            work[i].data_mut()[j] = x0 + h;
            let fp = eval(module, &work)?;
            work[i].data_mut()[j] = x0 - h;
            let fm = eval(module, &work)?;
            work[i].data_mut()[j] = x0;
            if !straddles_kink(fp, f0, fm, h) {
                analytic.push(g.data()[j]);
                numeric.push((fp - fm) / (2.0 * h));
            }
        }
    }

    let mut slots: Vec<(String, usize)> = Vec::new();
    module.visit_params(&mut |p| {
        for j in 0..p.value.numel() {
            slots.push((p.name().to_string(), j));
        }
    });
    for k in distinct_indices(slots.len(), cfg.param_coords, rng) {
        let (name, j) = slots[k].clone();
        let perturb = |module: &mut M, delta: f64| {
            module.visit_params_mut(&mut |p| {
                if p.name() == name {
                    p.value.data_mut()[j] += delta;
                }
            })
        };
        let mut x0 = 0.0;
        module.visit_params(&mut |p| {
            if p.name() == name {
                x0 = p.value.data()[j];
            }
        });
        perturb(module, h);
        let fp = eval(module, inputs)?;
        perturb(module, -2.0 * h);
        let fm = eval(module, inputs)?;
        module.visit_params_mut(&mut |p| {
            if p.name() == name {
                p.value.data_mut()[j] = x0;
            }
        });
        if !straddles_kink(fp, f0, fm, h) {
            analytic.push(g_params.get(&name).map_or(0.0, |g| g[j]));
            numeric.push((fp - fm) / (2.0 * h));
        }
    }
    Ok(relative_error(&analytic, &numeric))
}

/// Gradient check of a parameter-free function of `inputs`.
pub fn check_fn<F>(inputs: &[Tensor<f64>], f: F, cfg: &GradCheckConfig, rng: &mut RngStream) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    check_module(&mut NoParams, inputs, |_, tape, vars| f(tape, vars), cfg, rng)
}

/// Run `trials` independent trials and keep the worst error.
pub fn run_trials(
    name: &str,
    trials: usize,
    cfg: &GradCheckConfig,
    seed: u64,
    mut trial: impl FnMut(&mut RngStream, &GradCheckConfig) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut rng = RngStream::new(seed, 0x6772_6164);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let e = trial(&mut rng, cfg)?;
        worst = worst.max(if e.is_nan() { f64::INFINITY } else { e });
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        trials,
        max_rel_error: worst,
        tolerance: cfg.tolerance,
    })
}

/// Random tensor with standard normal entries.
pub fn randn(shape: &[usize], rng: &mut RngStream) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.normal())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_wrong_gradient() {
        // A deliberately broken rule: pretend d(x²)/dx = x by detaching one factor.
        let cfg = GradCheckConfig::default();
        let mut rng = RngStream::new(3, 3);
        let x = randn(&[5], &mut rng);
        let err = check_fn(
            &[x],
            |tape, v| {
                let frozen = tape.constant(v[0].to_tensor());
                v[0].mul(&frozen)
            },
            &cfg,
            &mut rng,
        )
        .unwrap();
        assert!(err > 0.1, "broken gradient not detected: {err}");
    }

    #[test]
    fn kinks_inside_the_step_are_skipped() {
        let cfg = GradCheckConfig::default();
        let mut rng = RngStream::new(3, 5);
        let x = Tensor::from_fn(&[6], |i| if i % 2 == 0 { 3e-7 } else { 1.0 + i as f64 });
        let err = check_fn(&[x], |_, v| v[0].relu(), &cfg, &mut rng).unwrap();
        assert!(err < 1e-8, "{err}");
        assert!(straddles_kink(1e-6, 0.0, 0.0, 1e-6));
        assert!(!straddles_kink(2e-6, 1e-6, 0.0, 1e-6));
    }

    #[test]
    fn quadratic_passes() {
        let cfg = GradCheckConfig::default();
        let mut rng = RngStream::new(3, 4);
        let x = randn(&[7], &mut rng);
        let err = check_fn(&[x], |_, v| v[0].mul(&v[0]), &cfg, &mut rng).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn relative_error_scale_free() {
        assert_eq!(relative_error(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((relative_error(&[100.0], &[101.0]) - 1.0 / 101.0).abs() < 1e-12);
    }
}
