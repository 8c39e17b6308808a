//! `dsvi`: run, sweep, decompose and synth subcommands over the harness.
//!
//! Settings resolve in order: defaults, then `--config` file, then `--set`
//! pairs, then named flags.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use dsvi::harness::{self, RunConfig};

#[derive(Parser)]
#[command(name = "dsvi", version, about = "Doubly-stochastic BBVI experiment harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// One optimization run; writes trace.csv and checkpoint.csv.
    Run(Common),
    /// Every step size in the grid for every seed; writes per-cell traces,
    /// summary.csv and best.csv.
    Sweep(Common),
    /// Variance table at a checkpoint; writes decompose.csv.
    Decompose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Writes the task's synthetic dataset as CSV.
    Synth(Common),
}

#[derive(Args, Default)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Any config key, as `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    estimator: Option<String>,
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    step_size: Option<String>,
    /// Comma-separated step sizes.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    iters: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    eval_every: Option<String>,
    #[arg(long)]
    var_every: Option<String>,
    #[arg(long)]
    elbo_samples: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Comma-separated seeds for sweeps.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    svrg_k: Option<String>,
    #[arg(long)]
    beta: Option<String>,
    #[arg(long)]
    out: Option<String>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p).with_context(|| format!("reading config {}", p.display()))?,
            None => RunConfig::default(),
        };
        for pair in &self.set {
            let (k, v) = pair
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got '{pair}'"))?;
            cfg.set(k.trim(), v)?;
        }
        let flags = [
            ("task", &self.task),
            ("data", &self.data),
            ("estimator", &self.estimator),
            ("optimizer", &self.optimizer),
            ("step_size", &self.step_size),
            ("grid", &self.grid),
            ("batch_size", &self.batch_size),
            ("iters", &self.iters),
            ("epochs", &self.epochs),
            ("eval_every", &self.eval_every),
            ("var_every", &self.var_every),
            ("elbo_samples", &self.elbo_samples),
            ("seed", &self.seed),
            ("seeds", &self.seeds),
            ("svrg_k", &self.svrg_k),
            ("beta", &self.beta),
            ("out", &self.out),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, v).with_context(|| format!("--{}", k.replace('_', "-")))?;
            }
        }
        Ok(cfg)
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Run(c) => {
            let out = harness::run(&c.resolve()?)?;
            println!("{}", out.trace_path.display());
            if out.cell.diverged {
                log::warn!("run diverged at iteration {}", out.cell.trace.last().map_or(0, |r| r.iteration));
            }
        }
        Command::Sweep(c) => {
            let out = harness::sweep(&c.resolve()?)?;
            for s in &out.summary {
                println!("step_size={} mean_final_elbo={} diverged_seeds={}", s.step_size, s.mean_final_elbo, s.diverged_seeds);
            }
            println!("{}", out.best_path.display());
        }
        Command::Decompose { common, checkpoint } => {
            let (report, path) = harness::decompose(&common.resolve()?, checkpoint)?;
            print!("{}", report.to_csv());
            eprintln!("{}", path.display());
        }
        Command::Synth(c) => {
            let path = harness::synth(&c.resolve()?)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}
