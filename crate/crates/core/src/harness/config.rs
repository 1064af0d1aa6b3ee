use crate::blocks::BackboneConfig;
use crate::error::{Error, Result};
use crate::harness::synth::SynthSpec;
use crate::losses::{Accumulation, LossConfig};
use crate::model::MeritConfig;
use sha2::{Digest, Sha256};
use std::fmt::Display;
use std::str::FromStr;

/// Optimization and bookkeeping settings of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub use_mutation: bool,
    pub accumulation: Accumulation,
    pub loss: LossConfig,
    /// Size of the fixed training pool drawn from the synthetic spec.
    pub train_samples: usize,
    /// Size of the held-out pool.
    pub eval_samples: usize,
    /// Steps between metric snapshots on the training pool (0 = final only).
    pub eval_every: usize,
    /// Steps between checkpoints (0 = none).
    pub checkpoint_every: usize,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            batch_size: 4,
            max_steps: 2000,
            seed: 0,
            use_mutation: true,
            accumulation: Accumulation::Sum,
            loss: LossConfig::default(),
            train_samples: 16,
            eval_samples: 16,
            eval_every: 250,
            checkpoint_every: 0,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.weight_decay > 0.0) {
            return Err(Error::invalid("learning rate and weight decay must be positive"));
        }
        if self.batch_size == 0 || self.train_samples == 0 {
            return Err(Error::invalid("batch size and training pool must be non-empty"));
        }
        self.loss.validate()
    }
}

/// Everything a run depends on: model, optimization and data.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: MeritConfig,
    pub train: TrainConfig,
    pub synth: SynthSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: MeritConfig::desk(),
            train: TrainConfig::default(),
            synth: SynthSpec::default(),
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("bad value '{value}' for '{key}': {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        other => Err(Error::Config(format!("bad boolean '{other}' for '{key}'"))),
    }
}

fn parse_list<V: FromStr + Copy, const N: usize>(key: &str, value: &str) -> Result<[V; N]>
where
    V::Err: Display,
{
    let items = value
        .split(',')
        .map(|v| parse::<V>(key, v))
        .collect::<Result<Vec<_>>>()?;
    items
        .try_into()
        .map_err(|_| Error::Config(format!("'{key}' needs {N} comma-separated values")))
}

fn join<V: Display>(items: &[V]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn backbone_pairs(prefix: &str, b: &BackboneConfig, out: &mut Vec<(String, String)>) {
    let mut push = |k: &str, v: String| out.push((format!("{prefix}.{k}"), v));
    push("input_resolution", b.input_resolution.to_string());
    push("window", b.window.to_string());
    push("stem_channels", b.stem_channels.to_string());
    push("stage_channels", join(&b.stage_channels));
    push("stage_depths", join(&b.stage_depths));
    push("ffn_expansion", b.ffn_expansion.to_string());
    push("heads", b.heads.to_string());
}

fn set_backbone(b: &mut BackboneConfig, key: &str, full: &str, value: &str) -> Result<bool> {
    match key {
        "input_resolution" => b.input_resolution = parse(full, value)?,
        "window" => b.window = parse(full, value)?,
        "stem_channels" => b.stem_channels = parse(full, value)?,
        "stage_channels" => b.stage_channels = parse_list(full, value)?,
        "stage_depths" => b.stage_depths = parse_list(full, value)?,
        "ffn_expansion" => b.ffn_expansion = parse(full, value)?,
        "heads" => b.heads = parse(full, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

impl RunConfig {
    /// Compact model on 64-pixel images with proportionally smaller objects.
    pub fn compact() -> Self {
        Self {
            model: MeritConfig::compact(),
            train: TrainConfig::default(),
            synth: SynthSpec {
                image_size: 64,
                radius_small: (4.0, 6.5),
                radius_large: (11.0, 15.0),
                ..SynthSpec::default()
            },
        }
    }

    /// Canonical `(key, value)` listing of every setting.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let (m, t, s) = (&self.model, &self.train, &self.synth);
        let mut out: Vec<(String, String)> = Vec::new();
        let mut push = |k: &str, v: String| out.push((k.to_string(), v));
        push("mode", m.mode.to_string());
        push("num_classes", m.num_classes.to_string());
        push("gt_resolution", m.gt_resolution.to_string());
        push("aggregation", m.aggregation.to_string());
        push("interpolation", m.interpolation.to_string());
        push("use_cascade_decoder", m.use_cascade_decoder.to_string());
        push("feedback", m.feedback.to_string());
        push("head_weights", join(&m.head_weights.as_array()));
        push("learning_rate", t.learning_rate.to_string());
        push("weight_decay", t.weight_decay.to_string());
        push("batch_size", t.batch_size.to_string());
        push("max_steps", t.max_steps.to_string());
        push("seed", t.seed.to_string());
        push("use_mutation", t.use_mutation.to_string());
        push("mutation_accumulation", t.accumulation.to_string());
        push("lambda1", t.loss.lambda1.to_string());
        push("dice_smoothing", t.loss.smoothing.to_string());
        push("train_samples", t.train_samples.to_string());
        push("eval_samples", t.eval_samples.to_string());
        push("eval_every", t.eval_every.to_string());
        push("checkpoint_every", t.checkpoint_every.to_string());
        push("augment", t.augment.to_string());
        push("synth.objects_per_image", join(&[s.objects_per_image.0, s.objects_per_image.1]));
        push("synth.radius_small", join(&[s.radius_small.0, s.radius_small.1]));
        push("synth.radius_large", join(&[s.radius_large.0, s.radius_large.1]));
        push("synth.noise_sigma", s.noise_sigma.to_string());
        push("synth.seed", s.seed.to_string());
        backbone_pairs("a", &m.backbone_a, &mut out);
        backbone_pairs("b", &m.backbone_b, &mut out);
        out
    }

    /// Set one key; unknown keys and unparsable values are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (m, t, s) = (&mut self.model, &mut self.train, &mut self.synth);
        match key {
            "mode" => m.mode = parse(key, value)?,
            "num_classes" => {
                m.num_classes = parse(key, value)?;
                s.num_classes = m.num_classes;
            }
            "gt_resolution" => {
                m.gt_resolution = parse(key, value)?;
                s.image_size = m.gt_resolution;
            }
            "aggregation" => m.aggregation = parse(key, value)?,
            "interpolation" => m.interpolation = parse(key, value)?,
            "use_cascade_decoder" => m.use_cascade_decoder = parse_bool(key, value)?,
            "feedback" => m.feedback = parse(key, value)?,
            "head_weights" => {
                let [alpha, beta, gamma, psi] = parse_list::<f64, 4>(key, value)?;
                m.head_weights = crate::decoder::HeadWeights { alpha, beta, gamma, psi };
            }
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "max_steps" => t.max_steps = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "use_mutation" => t.use_mutation = parse_bool(key, value)?,
            "mutation_accumulation" => t.accumulation = parse(key, value)?,
            "lambda1" => {
                let smoothing = t.loss.smoothing;
                t.loss = LossConfig::with_dice_weight(parse(key, value)?);
                t.loss.smoothing = smoothing;
            }
            "dice_smoothing" => t.loss.smoothing = parse(key, value)?,
            "train_samples" => t.train_samples = parse(key, value)?,
            "eval_samples" => t.eval_samples = parse(key, value)?,
            "eval_every" => t.eval_every = parse(key, value)?,
            "checkpoint_every" => t.checkpoint_every = parse(key, value)?,
            "augment" => t.augment = parse_bool(key, value)?,
            "synth.objects_per_image" => {
                let [lo, hi] = parse_list(key, value)?;
                s.objects_per_image = (lo, hi);
            }
            "synth.radius_small" => {
                let [lo, hi] = parse_list(key, value)?;
                s.radius_small = (lo, hi);
            }
            "synth.radius_large" => {
                let [lo, hi] = parse_list(key, value)?;
                s.radius_large = (lo, hi);
            }
            "synth.noise_sigma" => s.noise_sigma = parse(key, value)?,
            "synth.seed" => s.seed = parse(key, value)?,
            _ => {
                let handled = match key.split_once('.') {
                    Some(("a", rest)) => set_backbone(&mut m.backbone_a, rest, key, value)?,
                    Some(("b", rest)) => set_backbone(&mut m.backbone_b, rest, key, value)?,
                    _ => false,
                };
                if !handled {
                    return Err(Error::Config(format!("unknown key '{key}'")));
                }
            }
        }
        Ok(())
    }

    /// Apply a flat `key = value` text: one setting per line, `#` starts a
    /// comment, blank lines are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", i + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Short hash of every setting except the seed, so runs of one
    /// configuration under different seeds share a hash.
    pub fn config_hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.to_pairs() {
            if k != "seed" {
                h.update(format!("{k}={v}\n").as_bytes());
            }
        }
        h.finalize().iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        if self.synth.image_size != self.model.gt_resolution || self.synth.num_classes != self.model.num_classes {
            return Err(Error::invalid("synthetic image size and classes must match the model"));
        }
        Ok(())
    }
}
