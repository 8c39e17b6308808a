use crate::error::{invalid, Result};
use crate::types::dot;

use super::{sigmoid, softplus, Model};

/// Binary Bayesian logistic regression with a standard Gaussian prior on the
/// weight vector. Latent dimension equals the feature count.
#[derive(Debug, Clone)]
pub struct LogisticRegressionModel {
    features: Vec<f64>,
    labels: Vec<f64>,
    p: usize,
}

impl LogisticRegressionModel {
    /// `features` is row-major `N × p`; labels must be 0 or 1.
    pub fn new(features: Vec<f64>, labels: Vec<f64>, p: usize) -> Result<Self> {
        if p == 0 || labels.is_empty() || features.len() != labels.len() * p {
            return Err(invalid(format!(
                "logistic: {} feature values do not form {} rows of width {p}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|y| **y != 0.0 && **y != 1.0) {
            return Err(invalid(format!("logistic: label {bad} is not 0 or 1")));
        }
        Ok(Self {
            features,
            labels,
            p,
        })
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.features[n * self.p..(n + 1) * self.p]
    }
}

impl Model for LogisticRegressionModel {
    fn num_data(&self) -> usize {
        self.labels.len()
    }

    fn dim(&self) -> usize {
        self.p
    }

    fn log_lik(&self, n: usize, z: &[f64]) -> f64 {
        let a = dot(self.row(n), z);
        self.labels[n] * a - softplus(a)
    }

    fn grad_log_lik(&self, n: usize, z: &[f64]) -> Vec<f64> {
        let x = self.row(n);
        let r = self.labels[n] - sigmoid(dot(x, z));
        x.iter().map(|xi| r * xi).collect()
    }

    fn hvp_log_lik(&self, n: usize, z: &[f64], v: &[f64]) -> Vec<f64> {
        let x = self.row(n);
        let s = sigmoid(dot(x, z));
        let c = -s * (1.0 - s) * dot(x, v);
        x.iter().map(|xi| c * xi).collect()
    }
}

/// Multiclass (softmax) logistic regression. The latent vector is the
/// `K × p` weight matrix flattened row-major, class-by-class.
#[derive(Debug, Clone)]
pub struct MulticlassLogisticModel {
    features: Vec<f64>,
    labels: Vec<usize>,
    p: usize,
    classes: usize,
}

impl MulticlassLogisticModel {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, p: usize, classes: usize) -> Result<Self> {
        if p == 0 || classes < 2 || labels.is_empty() || features.len() != labels.len() * p {
            return Err(invalid("multiclass: inconsistent shapes"));
        }
        if let Some(bad) = labels.iter().find(|y| **y >= classes) {
            return Err(invalid(format!("multiclass: label {bad} outside 0..{classes}")));
        }
        Ok(Self {
            features,
            labels,
            p,
            classes,
        })
    }

    fn row(&self, n: usize) -> &[f64] {
        &self.features[n * self.p..(n + 1) * self.p]
    }

    fn logits(&self, x: &[f64], z: &[f64]) -> Vec<f64> {
        z.chunks_exact(self.p).map(|wk| dot(wk, x)).collect()
    }

    fn softmax(logits: &[f64]) -> Vec<f64> {
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|a| (a - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }
}

impl Model for MulticlassLogisticModel {
    fn num_data(&self) -> usize {
        self.labels.len()
    }

    fn dim(&self) -> usize {
        self.p * self.classes
    }

    fn log_lik(&self, n: usize, z: &[f64]) -> f64 {
        let a = self.logits(self.row(n), z);
        let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + a.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        a[self.labels[n]] - lse
    }

    fn grad_log_lik(&self, n: usize, z: &[f64]) -> Vec<f64> {
        let x = self.row(n);
        let prob = Self::softmax(&self.logits(x, z));
        let mut g = Vec::with_capacity(self.dim());
        for (k, pk) in prob.iter().enumerate() {
            let r = if k == self.labels[n] { 1.0 } else { 0.0 } - pk;
            g.extend(x.iter().map(|xi| r * xi));
        }
        g
    }

    /// Exact softmax Hessian: `−(diag(p) − p pᵀ) ⊗ x xᵀ` applied to `v`.
    fn hvp_log_lik(&self, n: usize, z: &[f64], v: &[f64]) -> Vec<f64> {
        let x = self.row(n);
        let prob = Self::softmax(&self.logits(x, z));
        let xv: Vec<f64> = v.chunks_exact(self.p).map(|vk| dot(vk, x)).collect();
        let pxv = dot(&prob, &xv);
        let mut h = Vec::with_capacity(self.dim());
        for (pk, xvk) in prob.iter().zip(&xv) {
            let c = -pk * (xvk - pxv);
            h.extend(x.iter().map(|xi| c * xi));
        }
        h
    }
}
