use crate::error::{Error, Result};
use crate::layers::Module;
use crate::tensor::Element;
use std::collections::BTreeMap;

/// Adam with decoupled weight decay, applied to every parameter.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter of `module` that has an entry in
    /// `grads`; parameters without a gradient are only decayed.
    pub fn step<T: Element, M: Module<T>>(&mut self, module: &mut M, grads: &BTreeMap<String, Vec<T>>) -> Result<()> {
        if grads.values().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        let (lr, wd, eps) = (self.learning_rate, self.weight_decay, self.epsilon);
        let moments = &mut self.moments;
        module.visit_params_mut(&mut |p| {
            let name = p.name().to_string();
            let g = grads.get(&name);
            let data = p.value.data_mut();
            let (m, v) = moments
                .entry(name)
                .or_insert_with(|| (vec![0.0; data.len()], vec![0.0; data.len()]));
            for i in 0..data.len() {
                let mut w = data[i].as_f64();
                w -= lr * wd * w;
                if let Some(g) = g {
                    let gi = g[i].as_f64();
                    m[i] = b1 * m[i] + (1.0 - b1) * gi;
                    v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                    w -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                }
                data[i] = T::lit(w);
            }
        });
        Ok(())
    }
}
