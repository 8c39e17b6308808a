//! Run configuration: a flat `key = value` file with `#` comments, where any
//! key may be overridden from the command line.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::diagnostics::DiagnosticsConfig;
use crate::dropout_glm::{GlmLoss, DEFAULT_OUTPUTS, DEFAULT_SIGMA_DROP};
use crate::error::{Error, Result};
use crate::estimators::EstimatorKind;
use crate::optimizers::{OptimizerKind, SMISO_DEFAULT_ALPHA};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Logistic,
    Multiclass,
    BradleyTerry,
    LinearGaussian,
    GlmDropout,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Logistic => "logistic",
            Task::Multiclass => "multiclass",
            Task::BradleyTerry => "bradley-terry",
            Task::LinearGaussian => "linear-gaussian",
            Task::GlmDropout => "glm-dropout",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "logistic" => Task::Logistic,
            "multiclass" => Task::Multiclass,
            "bradley-terry" | "bt" => Task::BradleyTerry,
            "linear-gaussian" => Task::LinearGaussian,
            "glm-dropout" => Task::GlmDropout,
            other => return Err(Error::Config(format!("unknown task '{other}'"))),
        })
    }
}

/// Estimator or the SMISO step rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    Estimator(EstimatorKind),
    Smiso,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Estimator(k) => k.name(),
            Method::Smiso => "smiso",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "smiso" {
            return Ok(Method::Smiso);
        }
        s.parse::<EstimatorKind>()
            .map(Method::Estimator)
            .map_err(|_| Error::Config(format!("unknown estimator '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub data: Option<PathBuf>,
    pub label: String,
    pub standardize: bool,
    pub n: usize,
    pub dim: usize,
    pub classes: usize,
    pub players: usize,
    pub noise_var: f64,
    pub glm_loss: GlmLoss,
    pub glm_outputs: usize,
    pub sigma_drop: f64,
    pub data_seed: u64,
    pub method: Method,
    /// `None` means the default; SMISO accepts only `None` or `smiso`.
    pub optimizer: Option<String>,
    pub step_size: f64,
    pub grid: Vec<f64>,
    pub batch_size: usize,
    pub iters: Option<u64>,
    pub epochs: f64,
    pub eval_every: u64,
    pub var_every: u64,
    pub elbo_samples: usize,
    pub var_samples: usize,
    pub inner_samples: usize,
    pub mc_samples: usize,
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub svrg_k: Option<usize>,
    pub beta: f64,
    pub smiso_alpha: f64,
    pub per_datum_noise: bool,
    pub init_log_sigma: f64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: Task::Logistic,
            data: None,
            label: "y".into(),
            standardize: true,
            n: 200,
            dim: 10,
            classes: 3,
            players: 10,
            noise_var: 1.0,
            glm_loss: GlmLoss::SoftmaxCrossEntropy,
            glm_outputs: DEFAULT_OUTPUTS,
            sigma_drop: DEFAULT_SIGMA_DROP,
            data_seed: 0,
            method: Method::Estimator(EstimatorKind::Naive),
            optimizer: None,
            step_size: 1e-3,
            grid: Vec::new(),
            batch_size: 10,
            iters: None,
            epochs: 10.0,
            eval_every: 50,
            var_every: 0,
            elbo_samples: 1000,
            var_samples: 1000,
            inner_samples: 64,
            mc_samples: 100,
            seed: 0,
            seeds: Vec::new(),
            svrg_k: None,
            beta: 0.5,
            smiso_alpha: SMISO_DEFAULT_ALPHA,
            per_datum_noise: false,
            init_log_sigma: 0.0,
            out: PathBuf::from("out"),
        }
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse::<T>()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| num(key, s))
        .collect()
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got '{v}'"))),
    }
}

/// Parses `key = value` lines. Blank lines and `#` comments are ignored;
/// later keys override earlier ones.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            column: String::new(),
            message: format!("expected 'key = value', got '{line}'"),
        })?;
        map.insert(normalize_key(k.trim()), v.trim().to_string());
    }
    Ok(map)
}

fn normalize_key(k: &str) -> String {
    k.trim_start_matches("--").replace('-', "_")
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_config_text(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Sets one key. Keys match the field names; dashes are accepted.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = normalize_key(key);
        let v = value.trim();
        match key.as_str() {
            "task" => self.task = v.parse()?,
            "data" => self.data = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "label" => self.label = v.to_string(),
            "standardize" => self.standardize = boolean(&key, v)?,
            "n" => self.n = num(&key, v)?,
            "dim" => self.dim = num(&key, v)?,
            "classes" => self.classes = num(&key, v)?,
            "players" => self.players = num(&key, v)?,
            "noise_var" => self.noise_var = num(&key, v)?,
            "glm_loss" => self.glm_loss = v.parse()?,
            "glm_outputs" => self.glm_outputs = num(&key, v)?,
            "sigma_drop" => self.sigma_drop = num(&key, v)?,
            "data_seed" => self.data_seed = num(&key, v)?,
            "estimator" => self.method = v.parse()?,
            "optimizer" => self.optimizer = Some(v.to_string()),
            "step_size" => self.step_size = num(&key, v)?,
            "grid" => self.grid = list(&key, v)?,
            "batch_size" => self.batch_size = num(&key, v)?,
            "iters" => self.iters = Some(num(&key, v)?),
            "epochs" => self.epochs = num(&key, v)?,
            "eval_every" => self.eval_every = num(&key, v)?,
            "var_every" => self.var_every = num(&key, v)?,
            "elbo_samples" => self.elbo_samples = num(&key, v)?,
            "var_samples" => self.var_samples = num(&key, v)?,
            "inner_samples" => self.inner_samples = num(&key, v)?,
            "mc_samples" => self.mc_samples = num(&key, v)?,
            "seed" => self.seed = num(&key, v)?,
            "seeds" => self.seeds = list(&key, v)?,
            "svrg_k" => self.svrg_k = Some(num(&key, v)?),
            "beta" => self.beta = num(&key, v)?,
            "smiso_alpha" => self.smiso_alpha = num(&key, v)?,
            "per_datum_noise" => self.per_datum_noise = boolean(&key, v)?,
            "init_log_sigma" => self.init_log_sigma = num(&key, v)?,
            "out" => self.out = PathBuf::from(v),
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// The resolved optimizer for SGD/Adam methods; errors on invalid
    /// combinations.
    pub fn optimizer_kind(&self) -> Result<Option<OptimizerKind>> {
        match (&self.method, self.optimizer.as_deref()) {
            (Method::Smiso, None | Some("smiso")) => Ok(None),
            (Method::Smiso, Some(other)) => Err(Error::Config(format!(
                "smiso is its own step rule and cannot be combined with optimizer '{other}'"
            ))),
            (Method::Estimator(_), Some("smiso")) => Err(Error::Config(
                "optimizer 'smiso' requires estimator 'smiso'".into(),
            )),
            (Method::Estimator(_), None) => Ok(Some(OptimizerKind::Sgd)),
            (Method::Estimator(_), Some(o)) => o
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("unknown optimizer '{o}'"))),
        }
    }

    /// Estimator kind with config parameters filled in.
    pub fn estimator_kind(&self, batches_per_epoch: usize) -> Option<EstimatorKind> {
        match self.method {
            Method::Smiso => None,
            Method::Estimator(EstimatorKind::Ensemble { .. }) => Some(EstimatorKind::Ensemble { beta: self.beta }),
            Method::Estimator(EstimatorKind::JointSvrg { .. }) => Some(EstimatorKind::JointSvrg {
                k: self.svrg_k.unwrap_or(batches_per_epoch),
            }),
            Method::Estimator(k) => Some(k),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer_kind()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        if self.elbo_samples == 0 {
            return Err(Error::Config("elbo_samples must be positive".into()));
        }
        if self.var_every > 0 && (self.var_samples < 2 || self.inner_samples < 2 || self.mc_samples < 2) {
            return Err(Error::Config("variance sample counts must be at least 2".into()));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::Config("beta must lie in (0, 1)".into()));
        }
        if self.svrg_k == Some(0) {
            return Err(Error::Config("svrg_k must be positive".into()));
        }
        if self.epochs < 0.0 || !self.epochs.is_finite() {
            return Err(Error::Config("epochs must be non-negative".into()));
        }
        if self.grid.iter().any(|g| !(*g >= 0.0 && g.is_finite())) {
            return Err(Error::Config("grid step sizes must be non-negative".into()));
        }
        if self.task == Task::GlmDropout {
            match self.method {
                Method::Estimator(EstimatorKind::Naive | EstimatorKind::Cv | EstimatorKind::JointSaga) => {}
                _ => {
                    return Err(Error::Config(format!(
                        "task glm-dropout supports naive, cv and joint-saga, not {}",
                        self.method.name()
                    )))
                }
            }
        }
        if let Method::Estimator(k) = self.method {
            if k.is_linear_cost() {
                log::warn!("estimator {} costs O(N) oracle calls per datum", k.name());
            }
        }
        Ok(())
    }

    /// Explicit grid, else the optimizer's default grid.
    pub fn resolved_grid(&self) -> Result<Vec<f64>> {
        if !self.grid.is_empty() {
            return Ok(self.grid.clone());
        }
        Ok(self.optimizer_kind()?.unwrap_or(OptimizerKind::Sgd).default_grid().to_vec())
    }

    pub fn resolved_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.seeds.clone()
        }
    }

    pub fn diagnostics(&self) -> DiagnosticsConfig {
        DiagnosticsConfig {
            joint_samples: self.var_samples,
            inner_samples: self.inner_samples,
            mc_samples: self.mc_samples,
            elbo_samples: self.elbo_samples,
        }
    }

    /// Dimension of the latent variable for this task.
    pub fn latent_dim(&self) -> usize {
        match self.task {
            Task::Logistic | Task::LinearGaussian => self.dim,
            Task::Multiclass => self.dim * self.classes,
            Task::BradleyTerry => self.players,
            Task::GlmDropout => self.dim * self.glm_outputs,
        }
    }
}
