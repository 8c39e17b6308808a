//! Experiment harness: builds a task from a [`RunConfig`], runs optimization
//! cells, and writes CSV traces, sweep summaries, checkpoints and variance
//! tables.

pub mod checkpoint;
pub mod config;
mod decompose;
mod runner;
mod sweep;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::data::{self, Dataset};
use crate::dropout_glm::{synth_glm, DropoutGlm};
use crate::error::{Error, Result};
use crate::models::{BradleyTerryModel, LinearGaussianModel, LogisticRegressionModel, Model, MulticlassLogisticModel};

pub use checkpoint::Checkpoint;
pub use config::{Method, RunConfig, Task};
pub use decompose::{decompose, decompose_at, DecompositionReport};
pub use runner::{run, run_cell, CellResult, RunOutput};
pub use sweep::{retrospective_best, summarize, sweep, BestPoint, StepSummary, SweepOutput};

/// The BBVI models behind a single type.
#[derive(Debug, Clone)]
pub enum TaskModel {
    Logistic(LogisticRegressionModel),
    Multiclass(MulticlassLogisticModel),
    BradleyTerry(BradleyTerryModel),
    LinearGaussian(LinearGaussianModel),
}

macro_rules! dispatch {
    ($self:ident, $m:ident => $e:expr) => {
        match $self {
            TaskModel::Logistic($m) => $e,
            TaskModel::Multiclass($m) => $e,
            TaskModel::BradleyTerry($m) => $e,
            TaskModel::LinearGaussian($m) => $e,
        }
    };
}

impl Model for TaskModel {
    fn num_data(&self) -> usize {
        dispatch!(self, m => m.num_data())
    }
    fn dim(&self) -> usize {
        dispatch!(self, m => m.dim())
    }
    fn log_lik(&self, n: usize, z: &[f64]) -> f64 {
        dispatch!(self, m => m.log_lik(n, z))
    }
    fn grad_log_lik(&self, n: usize, z: &[f64]) -> Vec<f64> {
        dispatch!(self, m => m.grad_log_lik(n, z))
    }
    fn hvp_log_lik(&self, n: usize, z: &[f64], v: &[f64]) -> Vec<f64> {
        dispatch!(self, m => m.hvp_log_lik(n, z, v))
    }
    fn log_prior(&self, z: &[f64]) -> f64 {
        dispatch!(self, m => m.log_prior(z))
    }
    fn grad_log_prior(&self, z: &[f64]) -> Vec<f64> {
        dispatch!(self, m => m.grad_log_prior(z))
    }
    fn hvp_log_prior(&self, z: &[f64], v: &[f64]) -> Vec<f64> {
        dispatch!(self, m => m.hvp_log_prior(z, v))
    }
}

/// A configured optimization problem.
#[derive(Debug, Clone)]
pub enum Problem {
    Bbvi(TaskModel),
    Glm(DropoutGlm),
}

impl Problem {
    pub fn num_data(&self) -> usize {
        match self {
            Problem::Bbvi(m) => m.num_data(),
            Problem::Glm(g) => g.num_data(),
        }
    }
}

/// Loads the configured CSV, or generates the task's synthetic dataset.
/// Synthetic features are already standard normal and are left as drawn.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    // Index-valued columns must not be rescaled.
    let standardize = cfg.standardize && matches!(cfg.task, Task::Logistic | Task::Multiclass | Task::LinearGaussian);
    if let Some(path) = &cfg.data {
        return data::load_csv(path, &cfg.label, standardize);
    }
    Ok(match cfg.task {
        Task::Logistic => data::synth_logistic(cfg.n, cfg.dim, cfg.data_seed)?,
        Task::Multiclass => data::synth_multiclass(cfg.n, cfg.dim, cfg.classes, cfg.data_seed)?,
        Task::BradleyTerry => data::synth_bradley_terry(cfg.n, cfg.players, cfg.data_seed)?,
        Task::LinearGaussian => data::synth_linear_gaussian(cfg.n, cfg.dim, cfg.noise_var.sqrt(), cfg.data_seed)?,
        Task::GlmDropout => return Err(Error::Config("glm-dropout data is generated in memory only".into())),
    })
}

pub fn build_problem(cfg: &RunConfig) -> Result<Problem> {
    if cfg.task == Task::GlmDropout {
        if cfg.data.is_some() {
            return Err(Error::Config("glm-dropout uses synthetic data only".into()));
        }
        return Ok(Problem::Glm(synth_glm(
            cfg.n,
            cfg.dim,
            cfg.glm_outputs,
            cfg.glm_loss,
            cfg.sigma_drop,
            cfg.data_seed,
        )?));
    }
    let ds = load_dataset(cfg)?;
    Ok(Problem::Bbvi(match cfg.task {
        Task::Logistic => TaskModel::Logistic(ds.to_logistic()?),
        Task::Multiclass => TaskModel::Multiclass(ds.to_multiclass(cfg.classes)?),
        Task::BradleyTerry => TaskModel::BradleyTerry(ds.to_bradley_terry(cfg.players)?),
        Task::LinearGaussian => TaskModel::LinearGaussian(ds.to_linear_gaussian(cfg.noise_var)?),
        Task::GlmDropout => unreachable!(),
    }))
}

/// Writes the configured synthetic dataset. `out` ending in `.csv` names the
/// file; otherwise the file is `<out>/data.csv`.
pub fn synth(cfg: &RunConfig) -> Result<PathBuf> {
    let ds = load_dataset(&RunConfig { data: None, ..cfg.clone() })?;
    let path = if cfg.out.extension().is_some_and(|e| e == "csv") {
        cfg.out.clone()
    } else {
        cfg.out.join("data.csv")
    };
    let mut buf = Vec::new();
    ds.write_csv(&mut buf)?;
    write_atomic(&path, &buf)?;
    Ok(path)
}

/// Writes via a sibling temporary file and a rename, so readers never see a
/// partial file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
