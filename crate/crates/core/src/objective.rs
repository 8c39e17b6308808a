//! The reparameterized negative-ELBO objective
//!
//! ```text
//! f(w; n, ε) = −k_n(T_w(ε)) − H(w),    T_w(ε) = μ + ε ⊙ σ
//! ```
//!
//! and its exact per-sample gradient. [`Objective`] owns the model together
//! with an [`OracleCounter`]; every gradient or Hessian-vector product that
//! reaches the model goes through it and is counted exactly once.

use crate::error::{Error, Result};
use crate::estimators::OracleCounter;
use crate::models::{self, Model};
use crate::par;
use crate::types::{GradientVector, VariationalParams};

/// `½ log(2πe)`
const HALF_LN_2PI_E: f64 = 1.418_938_533_204_672_7;

/// Entropy of `N(μ, diag(σ²))`: `Σ log σ_i + (d/2) log(2πe)`.
pub fn entropy(w: &VariationalParams) -> f64 {
    w.log_sigma().iter().sum::<f64>() + w.dim() as f64 * HALF_LN_2PI_E
}

#[derive(Debug)]
pub struct Objective<M> {
    model: M,
    counter: OracleCounter,
}

impl<M: Model> Objective<M> {
    pub fn new(model: M) -> Self {
        Self {
            model,
            counter: OracleCounter::default(),
        }
    }

    pub fn model(&self) -> &M {
        &self.model
    }

    pub fn counter(&self) -> &OracleCounter {
        &self.counter
    }

    pub fn num_data(&self) -> usize {
        self.model.num_data()
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    /// A view of the same model with its own zeroed counter, for diagnostics
    /// that must not show up in an optimization run's oracle counts.
    pub fn detached(&self) -> Objective<&M> {
        Objective::new(&self.model)
    }

    pub(crate) fn check_index(&self, n: usize) -> Result<()> {
        if n >= self.num_data() {
            return Err(Error::IndexOutOfRange {
                index: n,
                len: self.num_data(),
            });
        }
        Ok(())
    }

    pub(crate) fn check_shapes(&self, w: &VariationalParams, eps: &[f64]) -> Result<()> {
        let d = self.dim();
        if w.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: w.dim(),
            });
        }
        if eps.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: eps.len(),
            });
        }
        Ok(())
    }

    /// Counted `∇k_n(z)`.
    pub fn grad_k(&self, n: usize, z: &[f64]) -> Result<Vec<f64>> {
        let g = models::grad_k_n(&self.model, n, z)?;
        self.counter.add_grad(1);
        Ok(g)
    }

    /// Counted `∇²k_n(z) · v`.
    pub fn hvp_k(&self, n: usize, z: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let h = models::hvp_k_n(&self.model, n, z, v)?;
        self.counter.add_hvp(1);
        Ok(h)
    }

    pub fn eval_f(&self, w: &VariationalParams, n: usize, eps: &[f64]) -> Result<f64> {
        self.check_shapes(w, eps)?;
        let z = w.transform(eps);
        Ok(-models::k_n(&self.model, n, &z)? - entropy(w))
    }

    /// Exact `∇_w f(w; n, ε)`: μ-part `−∇k_n(z)`, log σ-part
    /// `−∇k_n(z) ⊙ ε ⊙ σ − 1`. One gradient oracle call.
    pub fn grad_f(&self, w: &VariationalParams, n: usize, eps: &[f64]) -> Result<GradientVector> {
        self.check_shapes(w, eps)?;
        let z = w.transform(eps);
        let gk = self.grad_k(n, &z)?;
        Ok(assemble_grad(w, &gk, eps))
    }

    /// `(1/N) Σ_n ∇_w f(w; n, ε)`. `N` gradient oracle calls.
    pub fn grad_f_full_epoch(&self, w: &VariationalParams, eps: &[f64]) -> Result<GradientVector> {
        self.check_shapes(w, eps)?;
        let z = w.transform(eps);
        let nn = self.num_data();
        let grads = par::try_map_range(nn, |n| self.grad_k(n, &z))?;
        let mut mean = par::pairwise_sum(&grads, self.dim());
        let inv = 1.0 / nn as f64;
        mean.iter_mut().for_each(|v| *v *= inv);
        Ok(assemble_grad(w, &mean, eps))
    }

    /// `(1/N) Σ_n f(w; n, ε)`, uncounted.
    pub fn eval_f_full_epoch(&self, w: &VariationalParams, eps: &[f64]) -> Result<f64> {
        self.check_shapes(w, eps)?;
        let z = w.transform(eps);
        let nn = self.num_data();
        let vals = par::try_map_range(nn, |n| models::k_n(&self.model, n, &z))?;
        Ok(-par::pairwise_sum_scalar(&vals) / nn as f64 - entropy(w))
    }
}

/// Builds `∇_w f` from `∇k` at `T_w(ε)`. Linear in `∇k` so it also maps a
/// mean of `∇k` values to the mean of the corresponding gradients.
pub(crate) fn assemble_grad(w: &VariationalParams, grad_k: &[f64], eps: &[f64]) -> GradientVector {
    let d = w.dim();
    let mut g = GradientVector::zeros(d);
    for i in 0..d {
        let gm = -grad_k[i];
        g.mu_part_mut()[i] = gm;
        g.log_sigma_part_mut()[i] = gm * eps[i] * w.log_sigma()[i].exp() - 1.0;
    }
    g
}
