//! Second-order Taylor surrogate of the objective.
//!
//! `k_n` is expanded around `z0 = μ_a` of an anchor parameter `w_a` (held
//! constant under differentiation):
//!
//! ```text
//! f̃(w_a; n, ε) = −[k_n(z0) + δᵀ∇k_n(z0) + ½ δᵀ∇²k_n(z0) δ] − H(w_a),   δ = ε ⊙ σ_a
//! ```
//!
//! Only the μ-partition of its gradient is used. Because `ε` is zero-mean
//! and the Hessian term is linear in `ε`, the expectation of the μ-gradient
//! over `ε` is simply `−∇k_n(z0)`.

use crate::error::Result;
use crate::models::Model;
use crate::objective::Objective;
use crate::types::VariationalParams;

impl<M: Model> Objective<M> {
    /// `−[∇k_n(μ_a) + ∇²k_n(μ_a)(ε ⊙ σ_a)]`: one gradient and one HVP call.
    ///
    /// `_w` is the point the outer estimator is evaluated at; the μ-part of
    /// the surrogate gradient depends only on the anchor.
    pub fn grad_surrogate_mu(
        &self,
        _w: &VariationalParams,
        anchor: &VariationalParams,
        n: usize,
        eps: &[f64],
    ) -> Result<Vec<f64>> {
        self.check_shapes(anchor, eps)?;
        self.check_index(n)?;
        let gk = self.grad_k(n, anchor.mu())?;
        let hv = self.anchored_hvp(anchor, n, eps)?;
        Ok(gk.iter().zip(&hv).map(|(g, h)| -(g + h)).collect())
    }

    /// `E_ε` of [`Objective::grad_surrogate_mu`]: `−∇k_n(μ_a)`. One gradient call.
    pub fn expect_grad_surrogate_mu(
        &self,
        _w: &VariationalParams,
        anchor: &VariationalParams,
        n: usize,
    ) -> Result<Vec<f64>> {
        self.check_index(n)?;
        let gk = self.grad_k(n, anchor.mu())?;
        Ok(gk.into_iter().map(|g| -g).collect())
    }

    /// `∇²k_n(μ_a)(ε ⊙ σ_a)`: the ε-dependent part of the surrogate gradient.
    pub(crate) fn anchored_hvp(&self, anchor: &VariationalParams, n: usize, eps: &[f64]) -> Result<Vec<f64>> {
        let v: Vec<f64> = eps
            .iter()
            .zip(anchor.log_sigma())
            .map(|(e, ls)| e * ls.exp())
            .collect();
        self.hvp_k(n, anchor.mu(), &v)
    }
}
