use crate::error::{invalid, Result};
use crate::types::dot;
use crate::types::VariationalParams;

use super::{Model, LN_2PI};

/// Linear-Gaussian regression `y_n ~ N(x_nᵀ z, τ²)` with `z ~ N(0, I)`.
///
/// Every `k_n` is an exact quadratic in `z`, which makes this model the test
/// oracle for anything built on second-order expansions: Taylor surrogates
/// are exact, and expectations under a Gaussian `q` are closed-form.
#[derive(Debug, Clone)]
pub struct LinearGaussianModel {
    features: Vec<f64>,
    targets: Vec<f64>,
    d: usize,
    noise_var: f64,
}

impl LinearGaussianModel {
    pub fn new(features: Vec<f64>, targets: Vec<f64>, d: usize, noise_var: f64) -> Result<Self> {
        if d == 0 || targets.is_empty() || features.len() != targets.len() * d {
            return Err(invalid("linear-gaussian: inconsistent shapes"));
        }
        if !(noise_var > 0.0 && noise_var.is_finite()) {
            return Err(invalid("linear-gaussian: noise variance must be positive"));
        }
        Ok(Self {
            features,
            targets,
            d,
            noise_var,
        })
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.features[n * self.d..(n + 1) * self.d]
    }

    pub fn target(&self, n: usize) -> f64 {
        self.targets[n]
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    /// Exact `E_ε k_n(μ + ε ⊙ σ)`.
    pub fn expected_k_n(&self, n: usize, w: &VariationalParams) -> f64 {
        let nn = self.targets.len() as f64;
        let x = self.row(n);
        let sigma = w.sigma();
        let resid = self.targets[n] - dot(x, w.mu());
        let spread: f64 = x.iter().zip(&sigma).map(|(xi, s)| xi * xi * s * s).sum();
        let lik = -0.5 * (2.0 * std::f64::consts::PI * self.noise_var).ln()
            - (resid * resid + spread) / (2.0 * self.noise_var);
        let prior = -0.5 * self.d as f64 * LN_2PI
            - 0.5 * (dot(w.mu(), w.mu()) + sigma.iter().map(|s| s * s).sum::<f64>());
        nn * lik + prior
    }

    /// Exact negative ELBO `E_n E_ε f(w; n, ε)`.
    pub fn exact_negative_elbo(&self, w: &VariationalParams) -> f64 {
        let nn = self.targets.len();
        let mean_k = (0..nn).map(|n| self.expected_k_n(n, w)).sum::<f64>() / nn as f64;
        -mean_k - crate::objective::entropy(w)
    }

    /// Exact gradient of the negative ELBO in `(μ, log σ)`.
    pub fn exact_gradient(&self, w: &VariationalParams) -> Vec<f64> {
        let sigma = w.sigma();
        let mut g_mu: Vec<f64> = w.mu().to_vec();
        let mut xsq = vec![0.0; self.d];
        for n in 0..self.targets.len() {
            let x = self.row(n);
            let r = dot(x, w.mu()) - self.targets[n];
            for i in 0..self.d {
                // mean over n of N x r / τ²  is  Σ_n x r / τ²
                g_mu[i] += x[i] * r / self.noise_var;
                xsq[i] += x[i] * x[i];
            }
        }
        let g_ls = (0..self.d).map(|i| {
            let s2 = sigma[i] * sigma[i];
            // mean over n of N x_i² σ_i² / τ² is Σ_n x_i² σ_i² / τ²
            xsq[i] * s2 / self.noise_var + s2 - 1.0
        });
        g_mu.extend(g_ls);
        g_mu
    }

    /// Per-datum exact `E_ε ∇_w f(w; n, ε)`.
    pub fn exact_datum_gradient(&self, n: usize, w: &VariationalParams) -> Vec<f64> {
        let nn = self.targets.len() as f64;
        let x = self.row(n);
        let sigma = w.sigma();
        let r = dot(x, w.mu()) - self.targets[n];
        let mut g: Vec<f64> = (0..self.d)
            .map(|i| nn * x[i] * r / self.noise_var + w.mu()[i])
            .collect();
        g.extend((0..self.d).map(|i| {
            let s2 = sigma[i] * sigma[i];
            nn * x[i] * x[i] * s2 / self.noise_var + s2 - 1.0
        }));
        g
    }

    /// Mean-field optimum: `μ*` is the posterior mean and `σ_i² = 1/Λ_ii`
    /// with `Λ = I + Σ_n x_n x_nᵀ / τ²`.
    pub fn mean_field_optimum(&self) -> VariationalParams {
        let d = self.d;
        let mut prec = vec![0.0; d * d];
        let mut rhs = vec![0.0; d];
        for i in 0..d {
            prec[i * d + i] = 1.0;
        }
        for n in 0..self.targets.len() {
            let x = self.row(n);
            for i in 0..d {
                rhs[i] += x[i] * self.targets[n] / self.noise_var;
                for j in 0..d {
                    prec[i * d + j] += x[i] * x[j] / self.noise_var;
                }
            }
        }
        let mu = solve_spd(&prec, &rhs, d);
        let log_sigma = (0..d).map(|i| -0.5 * prec[i * d + i].ln()).collect();
        VariationalParams::new(mu, log_sigma).expect("finite optimum")
    }
}

/// Cholesky solve for a small symmetric positive-definite system.
fn solve_spd(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * d + k] * l[j * d + k]).sum();
            if i == j {
                l[i * d + i] = (a[i * d + i] - s).sqrt();
            } else {
                l[i * d + j] = (a[i * d + j] - s) / l[j * d + j];
            }
        }
    }
    let mut y = vec![0.0; d];
    for i in 0..d {
        let s: f64 = (0..i).map(|k| l[i * d + k] * y[k]).sum();
        y[i] = (b[i] - s) / l[i * d + i];
    }
    let mut x = vec![0.0; d];
    for i in (0..d).rev() {
        let s: f64 = (i + 1..d).map(|k| l[k * d + i] * x[k]).sum();
        x[i] = (y[i] - s) / l[i * d + i];
    }
    x
}

impl Model for LinearGaussianModel {
    fn num_data(&self) -> usize {
        self.targets.len()
    }

    fn dim(&self) -> usize {
        self.d
    }

    fn log_lik(&self, n: usize, z: &[f64]) -> f64 {
        let r = self.targets[n] - dot(self.row(n), z);
        -0.5 * (2.0 * std::f64::consts::PI * self.noise_var).ln() - r * r / (2.0 * self.noise_var)
    }

    fn grad_log_lik(&self, n: usize, z: &[f64]) -> Vec<f64> {
        let x = self.row(n);
        let r = (self.targets[n] - dot(x, z)) / self.noise_var;
        x.iter().map(|xi| r * xi).collect()
    }

    fn hvp_log_lik(&self, n: usize, _z: &[f64], v: &[f64]) -> Vec<f64> {
        let x = self.row(n);
        let c = -dot(x, v) / self.noise_var;
        x.iter().map(|xi| c * xi).collect()
    }
}
