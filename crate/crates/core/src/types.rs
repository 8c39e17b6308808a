//! Variational parameters, gradients over them, and trace-variance helpers.
//!
//! Both [`VariationalParams`] and [`GradientVector`] store a single flat
//! buffer laid out as `[μ-partition, log σ-partition]`, so flattening is a
//! copy and optimizers can treat either as a plain slice.

use crate::error::{Error, Result};

/// Mean and log-scale of a factorized Gaussian `q_w(z) = N(μ, diag(σ²))`.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalParams {
    flat: Vec<f64>,
}

impl VariationalParams {
    pub fn new(mu: Vec<f64>, log_sigma: Vec<f64>) -> Result<Self> {
        if mu.is_empty() {
            return Err(Error::InvalidArgument("latent dimension must be >= 1".into()));
        }
        if mu.len() != log_sigma.len() {
            return Err(Error::DimensionMismatch {
                expected: mu.len(),
                got: log_sigma.len(),
            });
        }
        let mut flat = mu;
        flat.extend(log_sigma);
        Self::from_flat(flat)
    }

    /// `μ = mu`, `log σ = log_sigma` in every coordinate.
    pub fn constant(d: usize, mu: f64, log_sigma: f64) -> Result<Self> {
        Self::new(vec![mu; d], vec![log_sigma; d])
    }

    pub fn from_flat(flat: Vec<f64>) -> Result<Self> {
        if flat.is_empty() || flat.len() % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "flat parameter length {} is not a positive even number",
                flat.len()
            )));
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("variational parameters"));
        }
        Ok(Self { flat })
    }

    pub fn dim(&self) -> usize {
        self.flat.len() / 2
    }

    pub fn mu(&self) -> &[f64] {
        &self.flat[..self.dim()]
    }

    pub fn log_sigma(&self) -> &[f64] {
        &self.flat[self.dim()..]
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.log_sigma().iter().map(|l| l.exp()).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.flat
    }

    /// Mutable access for step rules. Callers are responsible for keeping
    /// entries finite; [`VariationalParams::is_finite`] checks after the fact.
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    pub fn is_finite(&self) -> bool {
        self.flat.iter().all(|v| v.is_finite())
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.flat
    }

    /// `T_w(ε) = μ + ε ⊙ σ`.
    pub fn transform(&self, eps: &[f64]) -> Vec<f64> {
        self.mu()
            .iter()
            .zip(self.log_sigma())
            .zip(eps)
            .map(|((m, ls), e)| m + e * ls.exp())
            .collect()
    }
}

/// A gradient with respect to `w = (μ, log σ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    flat: Vec<f64>,
}

impl GradientVector {
    pub fn zeros(d: usize) -> Self {
        Self {
            flat: vec![0.0; 2 * d],
        }
    }

    pub fn from_parts(mu_part: &[f64], log_sigma_part: &[f64]) -> Result<Self> {
        if mu_part.len() != log_sigma_part.len() {
            return Err(Error::DimensionMismatch {
                expected: mu_part.len(),
                got: log_sigma_part.len(),
            });
        }
        let mut flat = Vec::with_capacity(2 * mu_part.len());
        flat.extend_from_slice(mu_part);
        flat.extend_from_slice(log_sigma_part);
        Ok(Self { flat })
    }

    pub fn dim(&self) -> usize {
        self.flat.len() / 2
    }

    pub fn mu_part(&self) -> &[f64] {
        &self.flat[..self.dim()]
    }

    pub fn mu_part_mut(&mut self) -> &mut [f64] {
        let d = self.dim();
        &mut self.flat[..d]
    }

    pub fn log_sigma_part(&self) -> &[f64] {
        &self.flat[self.dim()..]
    }

    pub fn log_sigma_part_mut(&mut self) -> &mut [f64] {
        let d = self.dim();
        &mut self.flat[d..]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.flat
    }

    /// `self += a · other`
    pub fn axpy(&mut self, a: f64, other: &GradientVector) {
        axpy(&mut self.flat, a, &other.flat);
    }

    pub fn scale(&mut self, a: f64) {
        self.flat.iter_mut().for_each(|v| *v *= a);
    }

    pub fn squared_norm(&self) -> f64 {
        self.flat.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.flat.iter().all(|v| v.is_finite())
    }
}

impl std::ops::AddAssign<&GradientVector> for GradientVector {
    fn add_assign(&mut self, rhs: &GradientVector) {
        self.axpy(1.0, rhs);
    }
}

/// Concatenation `[mu_part, log_sigma_part]`.
pub fn flatten(g: &GradientVector) -> Vec<f64> {
    g.flat.clone()
}

pub fn unflatten(flat: &[f64]) -> Result<GradientVector> {
    if flat.is_empty() || flat.len() % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "flat gradient length {} is not a positive even number",
            flat.len()
        )));
    }
    Ok(GradientVector {
        flat: flat.to_vec(),
    })
}

pub(crate) fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-coordinate running mean and sum of squared deviations (Welford).
#[derive(Debug, Clone)]
pub struct MomentAccumulator {
    count: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl MomentAccumulator {
    pub fn new(width: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; width],
            m2: vec![0.0; width],
        }
    }

    pub fn push(&mut self, x: &[f64]) {
        self.count += 1;
        let k = self.count as f64;
        for ((m, s), xi) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let delta = xi - *m;
            *m += delta / k;
            *s += delta * (xi - *m);
        }
    }

    /// Chan et al. pairwise combination.
    pub fn merge(&mut self, other: &MomentAccumulator) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let na = self.count as f64;
        let nb = other.count as f64;
        let n = na + nb;
        for i in 0..self.mean.len() {
            let delta = other.mean[i] - self.mean[i];
            self.mean[i] += delta * nb / n;
            self.m2[i] += other.m2[i] + delta * delta * na * nb / n;
        }
        self.count += other.count;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Unbiased per-coordinate variances (divisor `count − 1`).
    pub fn variances(&self) -> Vec<f64> {
        let denom = (self.count.max(2) - 1) as f64;
        self.m2.iter().map(|s| s / denom).collect()
    }

    /// Sum of per-coordinate unbiased variances.
    pub fn trace_variance(&self) -> f64 {
        if self.count < 2 {
            return 0.0;
        }
        self.m2.iter().sum::<f64>() / (self.count - 1) as f64
    }

    /// Sum of per-coordinate population variances (divisor `count`).
    pub fn trace_variance_population(&self) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        self.m2.iter().sum::<f64>() / self.count as f64
    }

    /// Standard errors of the per-coordinate means.
    pub fn standard_errors(&self) -> Vec<f64> {
        let n = self.count as f64;
        self.variances().into_iter().map(|v| (v / n).sqrt()).collect()
    }
}

/// Trace of the sample covariance, `Σ_i Var̂(x_i)`, with divisor `S − 1`.
pub fn trace_variance<V: AsRef<[f64]>>(samples: &[V]) -> f64 {
    let Some(first) = samples.first() else {
        return 0.0;
    };
    let mut acc = MomentAccumulator::new(first.as_ref().len());
    for s in samples {
        acc.push(s.as_ref());
    }
    acc.trace_variance()
}

pub fn trace_variance_of_gradients(samples: &[GradientVector]) -> f64 {
    trace_variance(samples)
}

impl AsRef<[f64]> for GradientVector {
    fn as_ref(&self) -> &[f64] {
        &self.flat
    }
}
