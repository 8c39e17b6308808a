//! Gradient estimators for the doubly-stochastic objective.
//!
//! | estimator | controls | oracle calls per datum |
//! |-----------|----------|------------------------|
//! | naive     | nothing | 1 gradient |
//! | cv        | Monte Carlo noise (μ only) | 1 gradient + 1 HVP |
//! | inc       | subsampling noise | N + 2 gradients |
//! | ensemble  | convex mix of cv and inc | N + 2 gradients + 1 HVP |
//! | joint-saga| both (μ only) | 2 gradients + 1 HVP |
//! | joint-svrg| both (μ only) | 2 gradients + 1 HVP, plus N per refresh |
//!
//! Oracle calls are the sum of gradient and HVP evaluations of the model.
//! In `cv` the surrogate's `∇k_n(μ)` appears in both the sample and its
//! expectation and cancels, leaving a single HVP. The SAGA table caches each
//! entry's anchor gradient `∇k_n(μ^n)` alongside the parameters, so the
//! control variate and the running-mean refresh share it. The SVRG variant
//! keeps only a snapshot, so it pays for `∇k_n(μ̃)` on every datum.
//!
//! A minibatch estimate is the mean of per-datum estimates. Duplicate indices
//! within a batch are rejected.

mod joint;
mod table;

pub use joint::{joint_saga_datum, joint_svrg_datum, JointSaga, SvrgState};
pub use table::{init_table, ParamTable, TableBuilder};

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{invalid, Error, Result};
use crate::models::Model;
use crate::objective::Objective;
use crate::par;
use crate::types::{axpy, GradientVector, VariationalParams};

/// Counts model oracle evaluations. Shared by reference across threads.
#[derive(Debug, Default)]
pub struct OracleCounter {
    grad: AtomicU64,
    hvp: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OracleCounts {
    pub grad: u64,
    pub hvp: u64,
}

impl OracleCounts {
    pub fn total(&self) -> u64 {
        self.grad + self.hvp
    }

    pub fn since(&self, earlier: OracleCounts) -> OracleCounts {
        OracleCounts {
            grad: self.grad - earlier.grad,
            hvp: self.hvp - earlier.hvp,
        }
    }
}

impl OracleCounter {
    pub fn add_grad(&self, k: u64) {
        self.grad.fetch_add(k, Ordering::Relaxed);
    }

    pub fn add_hvp(&self, k: u64) {
        self.hvp.fetch_add(k, Ordering::Relaxed);
    }

    pub fn grad_calls(&self) -> u64 {
        self.grad.load(Ordering::Relaxed)
    }

    pub fn hvp_calls(&self) -> u64 {
        self.hvp.load(Ordering::Relaxed)
    }

    pub fn snapshot(&self) -> OracleCounts {
        OracleCounts {
            grad: self.grad_calls(),
            hvp: self.hvp_calls(),
        }
    }
}

/// Base noise for one optimization step.
#[derive(Debug, Clone, PartialEq)]
pub enum Noise {
    /// One `ε` shared by every datum in the batch.
    Shared(Vec<f64>),
    /// One `ε` per batch slot.
    PerDatum(Vec<Vec<f64>>),
}

impl Noise {
    pub fn for_slot(&self, slot: usize) -> &[f64] {
        match self {
            Noise::Shared(e) => e,
            Noise::PerDatum(es) => &es[slot],
        }
    }

    fn check(&self, batch_len: usize) -> Result<()> {
        if let Noise::PerDatum(es) = self {
            if es.len() != batch_len {
                return Err(Error::DimensionMismatch {
                    expected: batch_len,
                    got: es.len(),
                });
            }
        }
        Ok(())
    }
}

pub(crate) fn validate_batch(batch: &[usize], n_data: usize) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut seen = HashSet::with_capacity(batch.len());
    for &n in batch {
        if n >= n_data {
            return Err(Error::IndexOutOfRange { index: n, len: n_data });
        }
        if !seen.insert(n) {
            return Err(Error::DuplicateIndex(n));
        }
    }
    Ok(())
}

/// `∇f(w; n, ε)`.
pub fn naive<M: Model>(obj: &Objective<M>, w: &VariationalParams, n: usize, eps: &[f64]) -> Result<GradientVector> {
    obj.grad_f(w, n, eps)
}

/// Control variate anchored at the current `w`:
/// μ-part `∇f + E_ε∇f̃ − ∇f̃`, which reduces to `∇f.μ + ∇²k_n(μ)(ε ⊙ σ)`.
pub fn cv<M: Model>(obj: &Objective<M>, w: &VariationalParams, n: usize, eps: &[f64]) -> Result<GradientVector> {
    let mut g = obj.grad_f(w, n, eps)?;
    let c = cv_term(obj, w, n, eps)?;
    axpy(g.mu_part_mut(), 1.0, &c);
    Ok(g)
}

/// The zero-mean μ-control of [`cv`]: `E_ε∇f̃(w) − ∇f̃(w; ε) = ∇²k_n(μ)(ε ⊙ σ)`.
fn cv_term<M: Model>(obj: &Objective<M>, w: &VariationalParams, n: usize, eps: &[f64]) -> Result<Vec<f64>> {
    obj.anchored_hvp(w, n, eps)
}

/// `(1/N) Σ_m ∇f(w^m; m, ε)` over the table entries.
fn table_mean_gradient<M: Model>(obj: &Objective<M>, entries: &[VariationalParams], eps: &[f64]) -> Result<GradientVector> {
    let nn = entries.len();
    let grads = par::try_map_range(nn, |m| obj.grad_f(&entries[m], m, eps))?;
    let mut mean = par::pairwise_sum(&grads, 2 * obj.dim());
    let inv = 1.0 / nn as f64;
    mean.iter_mut().for_each(|v| *v *= inv);
    crate::types::unflatten(&mean)
}

/// Zero-mean control of [`inc`] given the precomputed table mean.
fn inc_term<M: Model>(
    obj: &Objective<M>,
    table_mean: &GradientVector,
    entries: &[VariationalParams],
    n: usize,
    eps: &[f64],
) -> Result<GradientVector> {
    let mut c = table_mean.clone();
    c.axpy(-1.0, &obj.grad_f(&entries[n], n, eps)?);
    Ok(c)
}

/// Incremental estimator `∇f(w;n,ε) + E_m∇f(w^m;m,ε) − ∇f(w^n;n,ε)` on both
/// partitions. `N + 2` gradient calls.
pub fn inc<M: Model>(
    obj: &Objective<M>,
    w: &VariationalParams,
    n: usize,
    eps: &[f64],
    entries: &[VariationalParams],
) -> Result<GradientVector> {
    check_entries(obj, entries)?;
    obj.check_index(n)?;
    let mut g = obj.grad_f(w, n, eps)?;
    let mean = table_mean_gradient(obj, entries, eps)?;
    g += &inc_term(obj, &mean, entries, n, eps)?;
    Ok(g)
}

/// `∇f + β c_cv + (1 − β) c_inc` for `β ∈ (0, 1)`.
pub fn ensemble<M: Model>(
    obj: &Objective<M>,
    w: &VariationalParams,
    n: usize,
    eps: &[f64],
    beta: f64,
    entries: &[VariationalParams],
) -> Result<GradientVector> {
    check_beta(beta)?;
    check_entries(obj, entries)?;
    obj.check_index(n)?;
    let mut g = obj.grad_f(w, n, eps)?;
    let c_cv = cv_term(obj, w, n, eps)?;
    let mean = table_mean_gradient(obj, entries, eps)?;
    let c_inc = inc_term(obj, &mean, entries, n, eps)?;
    axpy(g.mu_part_mut(), beta, &c_cv);
    g.axpy(1.0 - beta, &c_inc);
    Ok(g)
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(invalid(format!("ensemble weight {beta} outside (0, 1)")));
    }
    Ok(())
}

fn check_entries<M: Model>(obj: &Objective<M>, entries: &[VariationalParams]) -> Result<()> {
    if entries.len() != obj.num_data() {
        return Err(Error::DimensionMismatch {
            expected: obj.num_data(),
            got: entries.len(),
        });
    }
    Ok(())
}

/// Which estimator a run uses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EstimatorKind {
    Naive,
    Cv,
    Inc,
    Ensemble { beta: f64 },
    JointSaga,
    JointSvrg { k: usize },
}

impl EstimatorKind {
    pub fn name(&self) -> &'static str {
        match self {
            EstimatorKind::Naive => "naive",
            EstimatorKind::Cv => "cv",
            EstimatorKind::Inc => "inc",
            EstimatorKind::Ensemble { .. } => "ensemble",
            EstimatorKind::JointSaga => "joint-saga",
            EstimatorKind::JointSvrg { .. } => "joint-svrg",
        }
    }

    /// Whether the estimator keeps a parameter table initialized by a naive epoch.
    pub fn needs_table(&self) -> bool {
        matches!(
            self,
            EstimatorKind::Inc | EstimatorKind::Ensemble { .. } | EstimatorKind::JointSaga
        )
    }

    /// Per-call cost grows with `N`.
    pub fn is_linear_cost(&self) -> bool {
        matches!(self, EstimatorKind::Inc | EstimatorKind::Ensemble { .. })
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    /// Parses the bare name; `ensemble` and `joint-svrg` get placeholder
    /// parameters that callers overwrite from config.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "naive" => EstimatorKind::Naive,
            "cv" => EstimatorKind::Cv,
            "inc" => EstimatorKind::Inc,
            "ensemble" => EstimatorKind::Ensemble { beta: 0.5 },
            "joint-saga" | "joint" => EstimatorKind::JointSaga,
            "joint-svrg" => EstimatorKind::JointSvrg { k: 0 },
            other => return Err(invalid(format!("unknown estimator '{other}'"))),
        })
    }
}

/// A stateful minibatch estimator.
#[derive(Debug, Clone)]
pub enum Estimator {
    Naive,
    Cv,
    Inc(ParamTable),
    Ensemble { beta: f64, table: ParamTable },
    JointSaga(JointSaga),
    JointSvrg(SvrgState),
}

impl Estimator {
    pub fn kind(&self) -> EstimatorKind {
        match self {
            Estimator::Naive => EstimatorKind::Naive,
            Estimator::Cv => EstimatorKind::Cv,
            Estimator::Inc(_) => EstimatorKind::Inc,
            Estimator::Ensemble { beta, .. } => EstimatorKind::Ensemble { beta: *beta },
            Estimator::JointSaga(_) => EstimatorKind::JointSaga,
            Estimator::JointSvrg(s) => EstimatorKind::JointSvrg { k: s.update_frequency() },
        }
    }

    pub fn table(&self) -> Option<&ParamTable> {
        match self {
            Estimator::Inc(t) | Estimator::Ensemble { table: t, .. } => Some(t),
            Estimator::JointSaga(j) => Some(j.table()),
            _ => None,
        }
    }

    /// Minibatch gradient estimate at `w`. Table-based estimators then record
    /// `w` for every datum in the batch; the SVRG variant advances its
    /// refresh counter.
    pub fn step<M: Model>(
        &mut self,
        obj: &Objective<M>,
        w: &VariationalParams,
        batch: &[usize],
        noise: &Noise,
    ) -> Result<GradientVector> {
        validate_batch(batch, obj.num_data())?;
        noise.check(batch.len())?;
        match self {
            Estimator::Naive => batch_mean(obj.dim(), batch, |slot, n| naive(obj, w, n, noise.for_slot(slot))),
            Estimator::Cv => batch_mean(obj.dim(), batch, |slot, n| cv(obj, w, n, noise.for_slot(slot))),
            Estimator::Inc(table) => {
                let g = inc_batch(obj, w, batch, noise, table.entries(), None)?;
                table.record_params(batch, w);
                Ok(g)
            }
            Estimator::Ensemble { beta, table } => {
                check_beta(*beta)?;
                let g = inc_batch(obj, w, batch, noise, table.entries(), Some(*beta))?;
                table.record_params(batch, w);
                Ok(g)
            }
            Estimator::JointSaga(j) => j.step(obj, w, batch, noise),
            Estimator::JointSvrg(s) => s.step(obj, w, batch, noise),
        }
    }

    /// Single-datum estimate against frozen state, for variance diagnostics.
    pub fn sample_frozen<M: Model>(
        &self,
        obj: &Objective<M>,
        w: &VariationalParams,
        n: usize,
        eps: &[f64],
    ) -> Result<GradientVector> {
        match self {
            Estimator::Naive => naive(obj, w, n, eps),
            Estimator::Cv => cv(obj, w, n, eps),
            Estimator::Inc(t) => inc(obj, w, n, eps, t.entries()),
            Estimator::Ensemble { beta, table } => ensemble(obj, w, n, eps, *beta, table.entries()),
            Estimator::JointSaga(j) => joint_saga_datum(obj, w, n, eps, j.table()),
            Estimator::JointSvrg(s) => joint_svrg_datum(obj, w, n, eps, s),
        }
    }
}

pub(crate) fn batch_mean<F>(d: usize, batch: &[usize], f: F) -> Result<GradientVector>
where
    F: Fn(usize, usize) -> Result<GradientVector>,
{
    let mut acc = GradientVector::zeros(d);
    let inv = 1.0 / batch.len() as f64;
    for (slot, &n) in batch.iter().enumerate() {
        acc.axpy(inv, &f(slot, n)?);
    }
    Ok(acc)
}

/// Batched `inc` (or `ensemble` when `beta` is set). With shared noise the
/// table mean is computed once per batch: `N + 2|B|` gradient calls.
fn inc_batch<M: Model>(
    obj: &Objective<M>,
    w: &VariationalParams,
    batch: &[usize],
    noise: &Noise,
    entries: &[VariationalParams],
    beta: Option<f64>,
) -> Result<GradientVector> {
    check_entries(obj, entries)?;
    let shared_mean = match noise {
        Noise::Shared(e) => Some(table_mean_gradient(obj, entries, e)?),
        Noise::PerDatum(_) => None,
    };
    batch_mean(obj.dim(), batch, |slot, n| {
        let eps = noise.for_slot(slot);
        let mut g = obj.grad_f(w, n, eps)?;
        let mean = match &shared_mean {
            Some(m) => m.clone(),
            None => table_mean_gradient(obj, entries, eps)?,
        };
        let c_inc = inc_term(obj, &mean, entries, n, eps)?;
        match beta {
            None => g += &c_inc,
            Some(b) => {
                axpy(g.mu_part_mut(), b, &cv_term(obj, w, n, eps)?);
                g.axpy(1.0 - b, &c_inc);
            }
        }
        Ok(g)
    })
}
