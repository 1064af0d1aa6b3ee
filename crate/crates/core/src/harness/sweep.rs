use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::train::{evaluate, sample_pool, Trainer, HELD_OUT_OFFSET};
use std::fmt;
use std::str::FromStr;

/// A configuration axis that can be swept.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SweepAxis {
    Mode,
    Mutation,
    Decoder,
    Aggregation,
    Interpolation,
    Lambda1,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 6] = [
        SweepAxis::Mode,
        SweepAxis::Mutation,
        SweepAxis::Decoder,
        SweepAxis::Aggregation,
        SweepAxis::Interpolation,
        SweepAxis::Lambda1,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Mode => "mode",
            SweepAxis::Mutation => "mutation",
            SweepAxis::Decoder => "decoder",
            SweepAxis::Aggregation => "aggregation",
            SweepAxis::Interpolation => "interpolation",
            SweepAxis::Lambda1 => "lambda1",
        }
    }

    /// Values swept when none are given.
    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            SweepAxis::Mode => &["single", "parallel", "cascaded"],
            SweepAxis::Mutation => &["on", "off"],
            SweepAxis::Decoder => &["cascade", "plain"],
            SweepAxis::Aggregation => &["additive", "concatenation"],
            SweepAxis::Interpolation => &["nearest", "bilinear", "bicubic", "area"],
            SweepAxis::Lambda1 => &["0.0", "0.3", "0.5", "0.7", "1.0"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    /// Apply one value of this axis to `cfg`.
    pub fn apply(self, cfg: &mut RunConfig, value: &str) -> Result<()> {
        let res = match self {
            SweepAxis::Mode => cfg.set("mode", value),
            SweepAxis::Mutation => cfg.set("use_mutation", value),
            SweepAxis::Decoder => cfg.set(
                "use_cascade_decoder",
                match value {
                    "cascade" => "true",
                    "plain" => "false",
                    other => other,
                },
            ),
            SweepAxis::Aggregation => cfg.set("aggregation", value),
            SweepAxis::Interpolation => cfg.set("interpolation", value),
            SweepAxis::Lambda1 => cfg.set("lambda1", value),
        };
        res.map_err(|e| Error::invalid(format!("bad value '{value}' for sweep axis {}: {e}", self.name())))
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SweepAxis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown sweep axis '{s}'")))
    }
}

/// Outcome of one run of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: String,
    pub seed: u64,
    pub config_hash: String,
    pub final_loss: f64,
    pub train_dsc: f64,
    pub heldout_dsc: f64,
    pub heldout_hd95: Option<f64>,
}

/// All runs of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

impl SweepTable {
    pub fn runs_csv(&self) -> String {
        let mut out = String::from("axis,value,seed,config_hash,final_loss,train_dsc,heldout_dsc,heldout_hd95\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{:.8},{:.4},{:.4},{}\n",
                r.axis,
                r.value,
                r.seed,
                r.config_hash,
                r.final_loss,
                r.train_dsc,
                r.heldout_dsc,
                r.heldout_hd95.map(|h| format!("{h:.4}")).unwrap_or_default()
            ));
        }
        out
    }

    /// Held-out mean DSC of one value, averaged over its seeds.
    pub fn mean_dsc(&self, value: &str) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.value == value).map(|r| r.heldout_dsc).collect();
        (!v.is_empty()).then(|| mean_std(&v).0)
    }

    /// Mean and standard deviation over seeds for every value, in sweep order.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("axis,value,seeds,dsc_mean,dsc_std,hd95_mean,hd95_std\n");
        let mut seen: Vec<&str> = Vec::new();
        for r in &self.rows {
            if seen.contains(&r.value.as_str()) {
                continue;
            }
            seen.push(&r.value);
            let group: Vec<&SweepRow> = self.rows.iter().filter(|x| x.value == r.value).collect();
            let dsc: Vec<f64> = group.iter().map(|x| x.heldout_dsc).collect();
            let hd: Vec<f64> = group.iter().filter_map(|x| x.heldout_hd95).collect();
            let (dm, ds) = mean_std(&dsc);
            let (hm, hs) = mean_std(&hd);
            out.push_str(&format!(
                "{},{},{},{dm:.4},{ds:.4},{hm:.4},{hs:.4}\n",
                r.axis,
                r.value,
                group.len()
            ));
        }
        out
    }
}

/// Train one run per value per seed and score each on the held-out pool.
/// All values are validated before any training starts.
pub fn sweep(
    base: &RunConfig,
    axis: SweepAxis,
    values: &[String],
    seeds: &[u64],
    mut on_run: impl FnMut(&SweepRow),
) -> Result<SweepTable> {
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::invalid("sweep needs at least one value and one seed"));
    }
    let mut configs = Vec::with_capacity(values.len());
    for v in values {
        let mut c = base.clone();
        axis.apply(&mut c, v)?;
        c.validate()?;
        configs.push(c);
    }
    let held_out = sample_pool(&base.synth, HELD_OUT_OFFSET, base.train.eval_samples.max(1))?;
    let mut rows = Vec::new();
    for (v, c) in values.iter().zip(&configs) {
        for &seed in seeds {
            let mut c = c.clone();
            c.train.seed = seed;
            let mut t = Trainer::new(&c)?;
            let rec = t.run(None, |_, _| {})?;
            let test = evaluate(&t.model, &held_out, c.train.batch_size)?;
            let row = SweepRow {
                axis,
                value: v.clone(),
                seed,
                config_hash: rec.config_hash.clone(),
                final_loss: rec.losses.last().copied().unwrap_or(f64::NAN),
                train_dsc: rec.final_snapshot().map_or(f64::NAN, |s| s.report.mean_dsc),
                heldout_dsc: test.mean_dsc,
                heldout_hd95: test.mean_hd95,
            };
            on_run(&row);
            rows.push(row);
        }
    }
    Ok(SweepTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_parsing_and_values() {
        for a in SweepAxis::ALL {
            assert_eq!(a.name().parse::<SweepAxis>().unwrap(), a);
            let base = RunConfig::default();
            for v in a.default_values() {
                let mut c = base.clone();
                a.apply(&mut c, &v).unwrap();
            }
        }
        assert!("depth".parse::<SweepAxis>().unwrap_err().is_invalid_argument());
        let mut c = RunConfig::default();
        assert!(SweepAxis::Lambda1.apply(&mut c, "1.5").is_ok());
        assert!(c.validate().is_err());
        assert!(SweepAxis::Mode.apply(&mut c, "triple").unwrap_err().is_invalid_argument());
    }

    #[test]
    fn mutation_values_change_only_the_loss_path() {
        let base = RunConfig::default();
        let (mut on, mut off) = (base.clone(), base.clone());
        SweepAxis::Mutation.apply(&mut on, "on").unwrap();
        SweepAxis::Mutation.apply(&mut off, "off").unwrap();
        let diff: Vec<_> = on
            .to_pairs()
            .into_iter()
            .zip(off.to_pairs())
            .filter(|(a, b)| a != b)
            .map(|(a, _)| a.0)
            .collect();
        assert_eq!(diff, vec!["use_mutation".to_string()]);
        assert_ne!(on.config_hash(), off.config_hash());
    }

    #[test]
    fn summary_groups_by_value() {
        let row = |value: &str, seed, dsc| SweepRow {
            axis: SweepAxis::Lambda1,
            value: value.into(),
            seed,
            config_hash: "h".into(),
            final_loss: 0.1,
            train_dsc: 0.0,
            heldout_dsc: dsc,
            heldout_hd95: Some(1.0),
        };
        let t = SweepTable {
            rows: vec![row("0.0", 0, 80.0), row("0.0", 1, 90.0), row("1.0", 0, 70.0)],
        };
        let s = t.summary_csv();
        assert_eq!(s.lines().count(), 3);
        assert!(s.contains("lambda1,0.0,2,85.0000,7.0711"));
        assert_eq!(t.mean_dsc("1.0"), Some(70.0));
        assert_eq!(t.runs_csv().lines().count(), 4);
    }
}
