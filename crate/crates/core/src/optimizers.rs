//! Step rules: SGD, Adam, and SMISO.
//!
//! SGD and Adam consume any gradient estimate. SMISO owns its own per-datum
//! table and gradient evaluation, so it is a complete step rule rather than
//! an estimator.

use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, Error, Result};
use crate::estimators::{validate_batch, Noise};
use crate::models::Model;
use crate::objective::Objective;
use crate::types::{GradientVector, VariationalParams};

pub trait Optimizer: Send {
    /// In-place step on a flat parameter vector.
    fn update(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()>;

    fn step_size(&self) -> f64;

    /// New variational parameters after one step along `g`.
    fn step(&mut self, w: &VariationalParams, g: &GradientVector) -> Result<VariationalParams> {
        let mut flat = w.as_slice().to_vec();
        self.update(&mut flat, g.as_slice())?;
        VariationalParams::from_flat(flat)
    }
}

fn check_lens(params: &[f64], grad: &[f64]) -> Result<()> {
    if params.len() != grad.len() {
        return Err(Error::DimensionMismatch {
            expected: params.len(),
            got: grad.len(),
        });
    }
    Ok(())
}

fn check_step_size(lr: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(invalid(format!("step size {lr} must be finite and non-negative")));
    }
    Ok(())
}

/// `w ← w − λ g`. `λ = 0` freezes the parameters.
#[derive(Debug, Clone)]
pub struct Sgd {
    lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Result<Self> {
        check_step_size(lr)?;
        Ok(Self { lr })
    }
}

impl Optimizer for Sgd {
    fn update(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        check_lens(params, grad)?;
        for (x, g) in params.iter_mut().zip(grad) {
            *x -= self.lr * g;
        }
        Ok(())
    }

    fn step_size(&self) -> f64 {
        self.lr
    }
}

/// Bias-corrected Adam.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(lr: f64) -> Result<Self> {
        Self::with_params(lr, Self::BETA1, Self::BETA2, Self::EPS)
    }

    pub fn with_params(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        check_step_size(lr)?;
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
            return Err(invalid("Adam: betas must lie in [0, 1) and eps must be positive"));
        }
        Ok(Self {
            lr,
            beta1,
            beta2,
            eps,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        })
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }
}

impl Optimizer for Adam {
    fn update(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        check_lens(params, grad)?;
        let len = grad.len();
        if self.m.is_empty() {
            self.m = vec![0.0; len];
            self.v = vec![0.0; len];
        } else if self.m.len() != len {
            return Err(Error::DimensionMismatch {
                expected: self.m.len(),
                got: len,
            });
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, (x, &gi)) in params.iter_mut().zip(grad).enumerate() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * gi;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * gi * gi;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            *x -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameters after Adam step"));
        }
        Ok(())
    }

    fn step_size(&self) -> f64 {
        self.lr
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn build(self, lr: f64) -> Result<Box<dyn Optimizer>> {
        Ok(match self {
            OptimizerKind::Sgd => Box::new(Sgd::new(lr)?),
            OptimizerKind::Adam => Box::new(Adam::new(lr)?),
        })
    }

    /// Step-size grid used when none is configured.
    pub fn default_grid(self) -> &'static [f64] {
        match self {
            OptimizerKind::Sgd => &[7.5e-3, 5e-3, 2.5e-3, 1e-3, 5e-4, 1e-4, 5e-5, 2.5e-5, 1e-5],
            OptimizerKind::Adam => &[1e-1, 5e-2, 1e-2, 5e-3, 1e-3],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(invalid(format!("unknown optimizer '{other}'"))),
        }
    }
}

/// Stochastic MISO with exponential averaging of per-datum iterates.
///
/// Invariant: `w̄ = (1/N) Σ_n w_n`, maintained incrementally.
#[derive(Debug, Clone)]
pub struct Smiso {
    entries: Vec<Vec<f64>>,
    w_bar: Vec<f64>,
    alpha: f64,
    gamma: f64,
}

pub const SMISO_DEFAULT_ALPHA: f64 = 0.9;

/// SGD-equivalent step size of a SMISO step: `α |B| γ / N`.
pub fn smiso_effective_step_size(alpha: f64, batch_size: usize, gamma: f64, n_data: usize) -> f64 {
    alpha * batch_size as f64 * gamma / n_data as f64
}

/// Inner step `γ` giving the SGD-equivalent step size `λ`.
pub fn smiso_inner_step(lambda: f64, alpha: f64, batch_size: usize, n_data: usize) -> f64 {
    lambda * n_data as f64 / (alpha * batch_size as f64)
}

impl Smiso {
    /// All `N` entries start at `w0`.
    pub fn new(w0: &VariationalParams, n_data: usize, alpha: f64, gamma: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(invalid(format!("SMISO mixing rate {alpha} outside (0, 1]")));
        }
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(invalid(format!("SMISO step {gamma} must be positive")));
        }
        if n_data == 0 {
            return Err(invalid("SMISO needs at least one datum"));
        }
        Ok(Self {
            entries: vec![w0.as_slice().to_vec(); n_data],
            w_bar: w0.as_slice().to_vec(),
            alpha,
            gamma,
        })
    }

    pub fn w_bar(&self) -> Result<VariationalParams> {
        VariationalParams::from_flat(self.w_bar.clone())
    }

    pub fn entry(&self, n: usize) -> &[f64] {
        &self.entries[n]
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Mean of the entries recomputed from scratch.
    pub fn recompute_mean(&self) -> Vec<f64> {
        let width = self.w_bar.len();
        let mut m = crate::par::pairwise_sum(&self.entries, width);
        let inv = 1.0 / self.entries.len() as f64;
        m.iter_mut().for_each(|v| *v *= inv);
        m
    }

    /// For each `n` in the batch, `w_n ← (1−α) w_n + α (w̄ − γ ∇f(w̄; n, ε))`
    /// with every gradient taken at the pre-step `w̄`; then
    /// `w̄ ← w̄ + (1/N) Σ (w_n' − w_n)`.
    pub fn step<M: Model>(&mut self, obj: &Objective<M>, batch: &[usize], noise: &Noise) -> Result<()> {
        validate_batch(batch, self.entries.len())?;
        if obj.num_data() != self.entries.len() {
            return Err(Error::DimensionMismatch {
                expected: self.entries.len(),
                got: obj.num_data(),
            });
        }
        let w = self.w_bar()?;
        let grads = batch
            .iter()
            .enumerate()
            .map(|(slot, &n)| obj.grad_f(&w, n, noise.for_slot(slot)))
            .collect::<Result<Vec<_>>>()?;
        let inv = 1.0 / self.entries.len() as f64;
        let mut delta = vec![0.0; self.w_bar.len()];
        for (&n, g) in batch.iter().zip(&grads) {
            let entry = &mut self.entries[n];
            for (i, (e, gi)) in entry.iter_mut().zip(g.as_slice()).enumerate() {
                let new = (1.0 - self.alpha) * *e + self.alpha * (w.as_slice()[i] - self.gamma * gi);
                delta[i] += new - *e;
                *e = new;
            }
        }
        if self.entries.len() == 1 {
            // the mean of one entry is that entry, exactly
            self.w_bar.clone_from(&self.entries[0]);
        } else {
            for (b, dl) in self.w_bar.iter_mut().zip(&delta) {
                *b += inv * dl;
            }
        }
        if !self.w_bar.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("SMISO average"));
        }
        Ok(())
    }
}
