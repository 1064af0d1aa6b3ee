use crate::error::{Error, Result};
use crate::harness::augment::augment;
use crate::harness::config::RunConfig;
use crate::harness::io::{metrics_rows, METRICS_HEADER};
use crate::harness::optim::AdamW;
use crate::harness::synth::{Sample, SynthSpec};
use crate::losses::{combined_loss, mutation_loss_with};
use crate::metrics::{evaluate_case, LabelMask, MetricsReport};
use crate::model::{save_checkpoint, ForwardOutput, Merit};
use crate::rng::RngStream;
use crate::tensor::{Tape, Tensor, Var};
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

/// Index offset separating held-out samples from the training pool.
pub const HELD_OUT_OFFSET: u64 = 1 << 32;

/// Samples `start .. start + count` of the dataset defined by `spec`.
pub fn sample_pool(spec: &SynthSpec, start: u64, count: usize) -> Result<Vec<Sample>> {
    (0..count as u64).map(|i| spec.sample(start + i)).collect()
}

/// Stack samples into an image batch `[B,3,S,S]` and flat labels `[B·S·S]`.
pub fn stack_batch(samples: &[&Sample]) -> Result<(Tensor<f32>, Vec<usize>)> {
    let first = samples.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let shape = first.image.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * first.image.numel());
    let mut labels = Vec::with_capacity(samples.len() * first.mask.labels().len());
    for s in samples {
        if s.image.shape() != shape.as_slice() {
            return Err(Error::invalid("batch samples differ in size"));
        }
        data.extend_from_slice(s.image.data());
        labels.extend(s.mask.labels().iter().map(|&l| l as usize));
    }
    let image = Tensor::new(&[samples.len(), shape[0], shape[1], shape[2]], data)?;
    Ok((image, labels))
}

/// Loss used for training: subset-sum aggregation over the stage maps when
/// `use_mutation`, else the combined loss on the weighted head sum.
pub fn training_loss<'t>(out: &ForwardOutput<'t, f32>, target: &[usize], cfg: &RunConfig) -> Result<Var<'t, f32>> {
    let t = &cfg.train;
    if t.use_mutation {
        mutation_loss_with(out.predictions.maps(), t.accumulation, |y| combined_loss(y, target, &t.loss))
    } else {
        combined_loss(&out.logits, target, &t.loss)
    }
}

/// Class probabilities `[C·S·S]` and argmax mask for each image.
pub fn predict(model: &Merit<f32>, samples: &[&Sample]) -> Result<Vec<(Vec<f32>, LabelMask)>> {
    let (images, _) = stack_batch(samples)?;
    let tape = Tape::no_grad();
    let out = model.forward(&tape, &tape.constant(images))?;
    let probs = out.probs.value();
    let s = probs.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let mut res = Vec::with_capacity(s[0]);
    for b in 0..s[0] {
        let p = &probs.data()[b * c * h * w..(b + 1) * c * h * w];
        let labels = (0..h * w)
            .map(|i| {
                let mut best = 0;
                for k in 1..c {
                    if p[k * h * w + i] > p[best * h * w + i] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect();
        res.push((p.to_vec(), LabelMask::new(w, h, labels)?));
    }
    Ok(res)
}

/// Mean per-class metrics of argmax predictions over `samples`.
pub fn evaluate(model: &Merit<f32>, samples: &[Sample], batch: usize) -> Result<MetricsReport> {
    let mut reports = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        for (s, (_, pred)) in chunk.iter().zip(predict(model, &refs)?) {
            reports.push(evaluate_case(&s.mask, &pred, model.config.num_classes)?);
        }
    }
    MetricsReport::mean_of(&reports)
}

/// Metrics on the training pool at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub step: usize,
    /// Mean training loss over the last evaluation interval.
    pub loss: f64,
    pub report: MetricsReport,
}

/// Everything recorded during a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub seed: u64,
    pub config_hash: String,
    /// Loss of every step, before that step's update.
    pub losses: Vec<f64>,
    pub snapshots: Vec<Snapshot>,
    /// Not part of [`RunRecord::fingerprint`].
    pub wall_clock_secs: f64,
    /// Diagnostic when training stopped on a non-finite loss.
    pub aborted: Option<String>,
}

impl RunRecord {
    pub fn final_snapshot(&self) -> Option<&Snapshot> {
        self.snapshots.last()
    }

    /// Snapshot with the highest mean DSC (earliest on ties).
    pub fn best_snapshot(&self) -> Option<&Snapshot> {
        self.snapshots
            .iter()
            .fold(None, |best: Option<&Snapshot>, s| match best {
                Some(b) if b.report.mean_dsc >= s.report.mean_dsc => Some(b),
                _ => Some(s),
            })
    }

    /// Metrics CSV with one row per class (plus `mean`) per snapshot.
    pub fn metrics_csv(&self) -> String {
        let mut out = format!("{METRICS_HEADER}\n");
        for s in &self.snapshots {
            for row in metrics_rows(s.step, &s.report, s.loss, self.seed, &self.config_hash) {
                out.push_str(&row);
                out.push('\n');
            }
        }
        out
    }

    /// Exact textual digest of everything but the wall-clock time.
    pub fn fingerprint(&self) -> String {
        let mut s = format!("seed={} hash={} aborted={:?}\n", self.seed, self.config_hash, self.aborted);
        for l in &self.losses {
            let _ = write!(s, "{:016x}", l.to_bits());
        }
        s.push('\n');
        s.push_str(&self.metrics_csv());
        s
    }
}

/// Owns the model, optimizer, data pool and RNG of one run.
pub struct Trainer {
    pub config: RunConfig,
    pub model: Merit<f32>,
    pub optimizer: AdamW,
    pub pool: Vec<Sample>,
    rng: RngStream,
    step: usize,
}

impl Trainer {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let model = Merit::new(&config.model, config.train.seed)?;
        let pool = sample_pool(&config.synth, 0, config.train.train_samples)?;
        Ok(Self {
            config: config.clone(),
            model,
            optimizer: AdamW::new(config.train.learning_rate, config.train.weight_decay),
            pool,
            rng: RngStream::new(config.train.seed, 0x7472_6169_6e),
            step: 0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Training loss on `samples` without recording gradients.
    pub fn loss_on(&self, samples: &[&Sample]) -> Result<f64> {
        let (images, labels) = stack_batch(samples)?;
        let tape = Tape::no_grad();
        let out = self.model.forward(&tape, &tape.constant(images))?;
        let loss = training_loss(&out, &labels, &self.config)?.value().item() as f64;
        Ok(loss)
    }

    /// One optimizer step on exactly these samples; returns the loss before
    /// the update.
    pub fn step_on(&mut self, samples: &[&Sample]) -> Result<f64> {
        let (images, labels) = stack_batch(samples)?;
        let (loss, grads) = {
            let tape = Tape::new();
            let out = self.model.forward(&tape, &tape.constant(images))?;
            let loss = training_loss(&out, &labels, &self.config)?;
            let value = loss.value().item() as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("loss at step {}", self.step + 1)));
            }
            (value, tape.param_grads(loss)?)
        };
        self.optimizer.step(&mut self.model, &grads)?;
        self.step += 1;
        Ok(loss)
    }

    /// Draw a batch from the pool (with augmentation when enabled) and take
    /// one step.
    pub fn train_step(&mut self) -> Result<f64> {
        let batch: Vec<Sample> = (0..self.config.train.batch_size)
            .map(|_| {
                let s = &self.pool[self.rng.below(self.pool.len())];
                if self.config.train.augment {
                    augment(s, &mut self.rng)
                } else {
                    s.clone()
                }
            })
            .collect();
        let refs: Vec<&Sample> = batch.iter().collect();
        self.step_on(&refs)
    }

    /// Metrics on the (un-augmented) training pool.
    pub fn evaluate_train(&self) -> Result<MetricsReport> {
        evaluate(&self.model, &self.pool, self.config.train.batch_size)
    }

    /// Train for `max_steps`, taking snapshots every `eval_every` steps and
    /// at the end. With `out_dir`, writes periodic checkpoints, the final and
    /// best-DSC checkpoints, `metrics.csv` and `config.txt`.
    pub fn run(&mut self, out_dir: Option<&Path>, mut on_step: impl FnMut(usize, f64)) -> Result<RunRecord> {
        let start = Instant::now();
        let t = self.config.train.clone();
        let mut rec = RunRecord {
            seed: t.seed,
            config_hash: self.config.config_hash(),
            losses: Vec::with_capacity(t.max_steps),
            snapshots: Vec::new(),
            wall_clock_secs: 0.0,
            aborted: None,
        };
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("config.txt"), self.config.to_text())?;
        }
        let mut best = f64::NEG_INFINITY;
        let mut since = 0;
        while self.step < t.max_steps {
            let loss = match self.train_step() {
                Ok(l) => l,
                Err(Error::NonFinite(msg)) => {
                    rec.aborted = Some(msg);
                    break;
                }
                Err(e) => return Err(e),
            };
            rec.losses.push(loss);
            since += 1;
            on_step(self.step, loss);
            let last = self.step == t.max_steps;
            if (t.eval_every > 0 && self.step % t.eval_every == 0) || last {
                let window = &rec.losses[rec.losses.len() - since..];
                let mean_loss = window.iter().sum::<f64>() / window.len() as f64;
                since = 0;
                let report = self.evaluate_train()?;
                if let Some(dir) = out_dir {
                    if report.mean_dsc > best {
                        save_checkpoint(&self.model, &dir.join("best.ckpt"))?;
                    }
                }
                best = best.max(report.mean_dsc);
                rec.snapshots.push(Snapshot {
                    step: self.step,
                    loss: mean_loss,
                    report,
                });
            }
            if let Some(dir) = out_dir {
                if t.checkpoint_every > 0 && self.step % t.checkpoint_every == 0 {
                    save_checkpoint(&self.model, &dir.join(format!("step_{:06}.ckpt", self.step)))?;
                }
            }
        }
        rec.wall_clock_secs = start.elapsed().as_secs_f64();
        if let Some(dir) = out_dir {
            save_checkpoint(&self.model, &dir.join("final.ckpt"))?;
            std::fs::write(dir.join("metrics.csv"), rec.metrics_csv())?;
            let losses: String = rec.losses.iter().enumerate().map(|(i, l)| format!("{},{l}\n", i + 1)).collect();
            std::fs::write(dir.join("losses.csv"), format!("step,loss\n{losses}"))?;
        }
        Ok(rec)
    }
}

/// Build a trainer and run it to completion.
pub fn train(config: &RunConfig, out_dir: Option<&Path>) -> Result<(Merit<f32>, RunRecord)> {
    let mut t = Trainer::new(config)?;
    let rec = t.run(out_dir, |_, _| {})?;
    Ok((t.model, rec))
}

/// Least-squares slope of `values` against their index.
pub fn linear_slope(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    if values.len() < 2 {
        return 0.0;
    }
    let mx = (n - 1.0) / 2.0;
    let my = values.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, &y) in values.iter().enumerate() {
        let dx = i as f64 - mx;
        sxy += dx * (y - my);
        sxx += dx * dx;
    }
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_line() {
        let v: Vec<f64> = (0..10).map(|i| 3.0 - 0.5 * i as f64).collect();
        assert!((linear_slope(&v) + 0.5).abs() < 1e-12);
        assert_eq!(linear_slope(&[1.0]), 0.0);
    }

    #[test]
    fn stacking_checks_sizes() {
        let spec = SynthSpec::default();
        let a = spec.sample(0).unwrap();
        let (img, labels) = stack_batch(&[&a, &a]).unwrap();
        assert_eq!(img.shape(), &[2, 3, 128, 128]);
        assert_eq!(labels.len(), 2 * 128 * 128);
        assert!(stack_batch(&[]).is_err());
    }
}
