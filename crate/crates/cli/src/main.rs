//! `merit`: generate synthetic data, train, evaluate, check gradients and
//! run ablation sweeps.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use merit_core::gradcheck::suite::{composite_checks, primitive_checks};
use merit_core::harness::{
    evaluate, metrics_rows, predict, read_dataset, sample_pool, sweep, write_prediction, write_sample, RunConfig, Sample,
    SweepAxis, Trainer, HELD_OUT_OFFSET, METRICS_HEADER,
};
use merit_core::metrics::{evaluate_case, MetricsReport};
use merit_core::model::{load_checkpoint, Merit};
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser, Debug)]
#[command(name = "merit", version, about = "Multi-scale hierarchical transformer segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset as PGM images and masks.
    Gen {
        #[command(flatten)]
        run: RunArgs,
        /// Number of samples to write.
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// Index of the first sample.
        #[arg(long, default_value_t = 0)]
        start: u64,
    },
    /// Train a model and write checkpoints and metrics.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Print the loss every this many steps (0 = quiet).
        #[arg(long, default_value_t = 50)]
        log_every: usize,
    },
    /// Evaluate a checkpoint on a dataset directory or held-out samples.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset written by `gen`; defaults to held-out synthetic samples.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Write probability maps and predicted masks here.
        #[arg(long)]
        dump_dir: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Only run checks whose name contains this text.
        #[arg(long)]
        filter: Option<String>,
    },
    /// Train one run per value per seed along one ablation axis.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        axis: String,
        /// Comma-separated values; defaults to the axis' standard values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Print the resolved configuration as `key = value` text.
    Config {
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    /// 128-pixel images, 128/96 backbones.
    Desk,
    /// 64-pixel images, 64/32 backbones.
    Compact,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Starting configuration.
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// Flat `key = value` configuration file applied over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Training seed (the synthetic data seed for `gen`).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self, seed_key: &str) -> Result<RunConfig> {
        let mut cfg = match self.preset {
            Preset::Desk => RunConfig::default(),
            Preset::Compact => RunConfig::compact(),
        };
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            cfg.apply_text(&text).with_context(|| format!("in {}", path.display()))?;
        }
        for kv in &self.overrides {
            let Some((k, v)) = kv.split_once('=') else {
                bail!("--set expects KEY=VALUE, got '{kv}'");
            };
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(seed) = self.seed {
            cfg.set(seed_key, &seed.to_string())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<&Path> {
        self.out_dir.as_deref().context("--out-dir is required")
    }
}

fn print_report(report: &MetricsReport) {
    for (k, (d, h)) in report.per_class_dsc.iter().zip(&report.per_class_hd95).enumerate() {
        let h = h.map_or("undefined".to_string(), |h| format!("{h:.3}"));
        println!("class {}: dsc {d:.3} hd95 {h}", k + 1);
    }
    let h = report.mean_hd95.map_or("undefined".to_string(), |h| format!("{h:.3}"));
    println!("mean: dsc {:.3} hd95 {h}", report.mean_dsc);
}

fn cmd_gen(run: &RunArgs, count: usize, start: u64) -> Result<()> {
    let cfg = run.resolve("synth.seed")?;
    let dir = run.out_dir()?;
    std::fs::create_dir_all(dir)?;
    for i in 0..count {
        let s = cfg.synth.sample(start + i as u64)?;
        write_sample(dir, i, &s)?;
    }
    std::fs::write(dir.join("config.txt"), cfg.to_text())?;
    println!("wrote {count} samples to {}", dir.display());
    Ok(())
}

fn cmd_train(run: &RunArgs, log_every: usize) -> Result<()> {
    let cfg = run.resolve("seed")?;
    let dir = run.out_dir()?;
    println!("config {} seed {}", cfg.config_hash(), cfg.train.seed);
    let mut trainer = Trainer::new(&cfg)?;
    let start = Instant::now();
    let rec = trainer.run(Some(dir), |step, loss| {
        if log_every > 0 && step % log_every == 0 {
            println!("step {step:>6} loss {loss:.5} ({:.0}s)", start.elapsed().as_secs_f64());
        }
    })?;
    if let Some(msg) = &rec.aborted {
        bail!("training aborted: {msg}");
    }
    if let Some(s) = rec.best_snapshot() {
        println!("best snapshot at step {}: mean dsc {:.3}", s.step, s.report.mean_dsc);
    }
    if let Some(s) = rec.final_snapshot() {
        println!("final snapshot at step {}:", s.step);
        print_report(&s.report);
    }
    let held = sample_pool(&cfg.synth, HELD_OUT_OFFSET, cfg.train.eval_samples)?;
    if !held.is_empty() {
        let report = evaluate(&trainer.model, &held, cfg.train.batch_size)?;
        println!("held-out:");
        print_report(&report);
    }
    println!("artifacts in {} ({:.0}s)", dir.display(), rec.wall_clock_secs);
    Ok(())
}

fn cmd_eval(run: &RunArgs, checkpoint: &Path, data_dir: Option<&Path>, dump_dir: Option<&Path>) -> Result<()> {
    let cfg = run.resolve("seed")?;
    let mut model = Merit::<f32>::new(&cfg.model, cfg.train.seed)?;
    load_checkpoint(&mut model, checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let samples: Vec<Sample> = match data_dir {
        Some(d) => read_dataset(d)?,
        None => sample_pool(&cfg.synth, HELD_OUT_OFFSET, cfg.train.eval_samples)?,
    };
    if samples.is_empty() {
        bail!("no samples to evaluate");
    }
    if let Some(d) = dump_dir {
        std::fs::create_dir_all(d)?;
    }
    let mut reports = Vec::with_capacity(samples.len());
    let mut case = 0;
    for chunk in samples.chunks(cfg.train.batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        for (s, (probs, pred)) in chunk.iter().zip(predict(&model, &refs)?) {
            reports.push(evaluate_case(&s.mask, &pred, cfg.model.num_classes)?);
            if let Some(d) = dump_dir {
                write_prediction(d, case, &probs, cfg.model.num_classes, &pred)?;
            }
            case += 1;
        }
    }
    let report = MetricsReport::mean_of(&reports)?;
    print_report(&report);
    if let Some(dir) = &run.out_dir {
        std::fs::create_dir_all(dir)?;
        let mut csv = format!("{METRICS_HEADER}\n");
        for row in metrics_rows(0, &report, f64::NAN, cfg.train.seed, &cfg.config_hash()) {
            csv.push_str(&row);
            csv.push('\n');
        }
        std::fs::write(dir.join("eval_metrics.csv"), csv)?;
    }
    Ok(())
}

fn cmd_gradcheck(trials: usize, seed: u64, filter: Option<&str>) -> Result<()> {
    let mut failed = Vec::new();
    for check in primitive_checks().into_iter().chain(composite_checks()) {
        if filter.is_some_and(|f| !check.name.contains(f)) {
            continue;
        }
        let report = check.run(trials, seed)?;
        println!("{report}");
        if !report.passed() {
            failed.push(check.name);
        }
    }
    if !failed.is_empty() {
        bail!("gradient checks failed: {}", failed.join(", "));
    }
    Ok(())
}

fn cmd_sweep(run: &RunArgs, axis: &str, values: &[String], seeds: &[u64]) -> Result<()> {
    let cfg = run.resolve("seed")?;
    let dir = run.out_dir()?;
    let axis: SweepAxis = axis.parse()?;
    let values = if values.is_empty() { axis.default_values() } else { values.to_vec() };
    let table = sweep(&cfg, axis, &values, seeds, |r| {
        println!(
            "{}={} seed {}: train dsc {:.3} held-out dsc {:.3}",
            r.axis, r.value, r.seed, r.train_dsc, r.heldout_dsc
        );
    })?;
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("runs.csv"), table.runs_csv())?;
    std::fs::write(dir.join("summary.csv"), table.summary_csv())?;
    print!("{}", table.summary_csv());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Gen { run, count, start } => cmd_gen(run, *count, *start),
        Command::Train { run, log_every } => cmd_train(run, *log_every),
        Command::Eval {
            run,
            checkpoint,
            data_dir,
            dump_dir,
        } => cmd_eval(run, checkpoint, data_dir.as_deref(), dump_dir.as_deref()),
        Command::Gradcheck { trials, seed, filter } => cmd_gradcheck(*trials, *seed, filter.as_deref()),
        Command::Sweep { run, axis, values, seeds } => cmd_sweep(run, axis, values, seeds),
        Command::Config { run } => {
            print!("{}", run.resolve("seed")?.to_text());
            Ok(())
        }
    }
}
