//! Generalized linear models under Gaussian feature dropout.
//!
//! ```text
//! f(W; n, ε) = L(y_n, W (ε ⊙ x_n)),    ε ~ N(1, σ_drop² I)
//! ```
//!
//! `W` is `K × D`, stored row-major, and column `i` is written `w_i`. With
//! `a = W x`, `δ = (ε − 1) ⊙ x` and `v = W δ`, the prediction is `a + v`.
//! Since `v` is linear in `ε`, the second-order Taylor surrogate around
//! `ε = 1` is
//!
//! ```text
//! f̃(W; n, ε) = ℓ(a) + gᵀv + ½ vᵀ H v,    g = ∇ℓ(a),  H = ∇²ℓ(a)
//! E_ε f̃      = ℓ(a) + σ²/2 Σ_i x_i² w_iᵀ H w_i
//! ```
//!
//! For squared error `H = I` and the surrogate is exact. For softmax
//! cross-entropy `H = diag(p) − ppᵀ`; differentiating `vᵀHv` through `p`
//! gives `H (v ⊙ v − 2 (pᵀv) v)`.
//!
//! The whole of `W` is controlled by the surrogate; there is no partition.
//! Oracle accounting mirrors the variational case: a loss gradient and a
//! surrogate expectation gradient count as gradient calls, a per-sample
//! surrogate gradient counts as one HVP call.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::estimators::{validate_batch, Noise, OracleCounter};
use crate::par;
use crate::rng::{draw_standard_normal, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlmLoss {
    SquaredError,
    SoftmaxCrossEntropy,
}

impl GlmLoss {
    pub fn name(self) -> &'static str {
        match self {
            GlmLoss::SquaredError => "squared",
            GlmLoss::SoftmaxCrossEntropy => "softmax",
        }
    }
}

impl fmt::Display for GlmLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GlmLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squared" | "squared-error" => Ok(GlmLoss::SquaredError),
            "softmax" | "cross-entropy" => Ok(GlmLoss::SoftmaxCrossEntropy),
            other => Err(invalid(format!("unknown GLM loss '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GlmTargets {
    /// `N × K` real targets for squared error.
    Real(Vec<f64>),
    /// Class indices in `0..K` for cross-entropy.
    Classes(Vec<usize>),
}

pub const DEFAULT_SIGMA_DROP: f64 = 0.5;
pub const DEFAULT_FEATURES: usize = 20;
pub const DEFAULT_OUTPUTS: usize = 5;

#[derive(Debug)]
pub struct DropoutGlm {
    x: Vec<f64>,
    targets: GlmTargets,
    n: usize,
    d: usize,
    k: usize,
    sigma_drop: f64,
    counter: OracleCounter,
}

fn softmax(a: &[f64]) -> Vec<f64> {
    let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = a.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_sum_exp(a: &[f64]) -> f64 {
    let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + a.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `H u` for the loss Hessian at the prediction with softmax `p`
/// (`None` for squared error, where `H = I`).
fn hess_apply(p: Option<&[f64]>, u: &[f64]) -> Vec<f64> {
    match p {
        None => u.to_vec(),
        Some(p) => {
            let pu: f64 = p.iter().zip(u).map(|(a, b)| a * b).sum();
            p.iter().zip(u).map(|(pk, uk)| pk * (uk - pu)).collect()
        }
    }
}

/// Clones carry a fresh, zeroed counter.
impl Clone for DropoutGlm {
    fn clone(&self) -> Self {
        Self {
            x: self.x.clone(),
            targets: self.targets.clone(),
            n: self.n,
            d: self.d,
            k: self.k,
            sigma_drop: self.sigma_drop,
            counter: OracleCounter::default(),
        }
    }
}

impl DropoutGlm {
    pub fn new(x: Vec<f64>, d: usize, k: usize, targets: GlmTargets, sigma_drop: f64) -> Result<Self> {
        if d == 0 || k == 0 || x.is_empty() || x.len() % d != 0 {
            return Err(invalid("dropout GLM: features must be N × D"));
        }
        let n = x.len() / d;
        match &targets {
            GlmTargets::Real(y) if y.len() != n * k => return Err(invalid("dropout GLM: targets must be N × K")),
            GlmTargets::Classes(c) if c.len() != n || c.iter().any(|&v| v >= k) => {
                return Err(invalid("dropout GLM: class labels must be N indices in 0..K"))
            }
            _ => {}
        }
        if !(sigma_drop >= 0.0 && sigma_drop.is_finite()) {
            return Err(invalid("dropout scale must be non-negative"));
        }
        Ok(Self {
            x,
            targets,
            n,
            d,
            k,
            sigma_drop,
            counter: OracleCounter::default(),
        })
    }

    pub fn loss(&self) -> GlmLoss {
        match self.targets {
            GlmTargets::Real(_) => GlmLoss::SquaredError,
            GlmTargets::Classes(_) => GlmLoss::SoftmaxCrossEntropy,
        }
    }

    pub fn num_data(&self) -> usize {
        self.n
    }

    pub fn num_features(&self) -> usize {
        self.d
    }

    pub fn num_outputs(&self) -> usize {
        self.k
    }

    /// Length of the flattened `W`.
    pub fn param_len(&self) -> usize {
        self.k * self.d
    }

    pub fn sigma_drop(&self) -> f64 {
        self.sigma_drop
    }

    pub fn counter(&self) -> &OracleCounter {
        &self.counter
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.x[n * self.d..(n + 1) * self.d]
    }

    fn check(&self, w: &[f64], n: usize, eps: Option<&[f64]>) -> Result<()> {
        if n >= self.n {
            return Err(Error::IndexOutOfRange { index: n, len: self.n });
        }
        if w.len() != self.param_len() {
            return Err(Error::DimensionMismatch {
                expected: self.param_len(),
                got: w.len(),
            });
        }
        if let Some(e) = eps {
            if e.len() != self.d {
                return Err(Error::DimensionMismatch {
                    expected: self.d,
                    got: e.len(),
                });
            }
        }
        Ok(())
    }

    /// `ε = 1 + σ_drop ξ`.
    pub fn draw_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>> {
        Ok(draw_standard_normal(rng, self.d)?
            .into_iter()
            .map(|v| 1.0 + self.sigma_drop * v)
            .collect())
    }

    fn predict(&self, w: &[f64], u: &[f64]) -> Vec<f64> {
        (0..self.k)
            .map(|j| w[j * self.d..(j + 1) * self.d].iter().zip(u).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn loss_at(&self, n: usize, a: &[f64]) -> f64 {
        match &self.targets {
            GlmTargets::Real(y) => 0.5 * a.iter().zip(&y[n * self.k..]).map(|(ai, yi)| (ai - yi).powi(2)).sum::<f64>(),
            GlmTargets::Classes(c) => log_sum_exp(a) - a[c[n]],
        }
    }

    /// `∇ℓ(a)` and, for cross-entropy, the softmax `p`.
    fn loss_grad(&self, n: usize, a: &[f64]) -> (Vec<f64>, Option<Vec<f64>>) {
        match &self.targets {
            GlmTargets::Real(y) => (a.iter().zip(&y[n * self.k..]).map(|(ai, yi)| ai - yi).collect(), None),
            GlmTargets::Classes(c) => {
                let p = softmax(a);
                let mut g = p.clone();
                g[c[n]] -= 1.0;
                (g, Some(p))
            }
        }
    }

    fn column(&self, w: &[f64], i: usize) -> Vec<f64> {
        (0..self.k).map(|j| w[j * self.d + i]).collect()
    }

    /// `Σ_j a_j b_jᵀ` accumulated into a `K × D` gradient.
    fn add_outer(&self, out: &mut [f64], left: &[f64], right: &[f64], scale: f64) {
        for j in 0..self.k {
            let lj = scale * left[j];
            for (o, r) in out[j * self.d..(j + 1) * self.d].iter_mut().zip(right) {
                *o += lj * r;
            }
        }
    }

    pub fn glm_f(&self, w: &[f64], n: usize, eps: &[f64]) -> Result<f64> {
        self.check(w, n, Some(eps))?;
        let u: Vec<f64> = eps.iter().zip(self.row(n)).map(|(e, x)| e * x).collect();
        Ok(self.loss_at(n, &self.predict(w, &u)))
    }

    /// `∇_W f(W; n, ε) = ∇ℓ (ε ⊙ x)ᵀ`. One gradient call.
    pub fn grad_f(&self, w: &[f64], n: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check(w, n, Some(eps))?;
        let u: Vec<f64> = eps.iter().zip(self.row(n)).map(|(e, x)| e * x).collect();
        let (g, _) = self.loss_grad(n, &self.predict(w, &u));
        let mut out = vec![0.0; self.param_len()];
        self.add_outer(&mut out, &g, &u, 1.0);
        self.counter.add_grad(1);
        Ok(out)
    }

    /// `∇_ε f(W; n, ε)`, component `i` is `x_i gᵀ w_i`. Uncounted.
    pub fn grad_eps(&self, w: &[f64], n: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check(w, n, Some(eps))?;
        let x = self.row(n);
        let u: Vec<f64> = eps.iter().zip(x).map(|(e, xi)| e * xi).collect();
        let (g, _) = self.loss_grad(n, &self.predict(w, &u));
        Ok((0..self.d)
            .map(|i| x[i] * self.column(w, i).iter().zip(&g).map(|(a, b)| a * b).sum::<f64>())
            .collect())
    }

    /// `f̃(W; n, ε)`. Uncounted.
    pub fn surrogate(&self, w: &[f64], n: usize, eps: &[f64]) -> Result<f64> {
        self.check(w, n, Some(eps))?;
        let x = self.row(n);
        let a = self.predict(w, x);
        let delta: Vec<f64> = eps.iter().zip(x).map(|(e, xi)| (e - 1.0) * xi).collect();
        let v = self.predict(w, &delta);
        let (g, p) = self.loss_grad(n, &a);
        let hv = hess_apply(p.as_deref(), &v);
        let lin: f64 = g.iter().zip(&v).map(|(a, b)| a * b).sum();
        let quad: f64 = v.iter().zip(&hv).map(|(a, b)| a * b).sum();
        Ok(self.loss_at(n, &a) + lin + 0.5 * quad)
    }

    /// `σ²/2 · tr ∇²_ε f(W; n, 1) = σ²/2 Σ_i x_i² w_iᵀ H w_i`.
    pub fn trace_term(&self, w: &[f64], n: usize) -> Result<f64> {
        self.check(w, n, None)?;
        let x = self.row(n);
        let a = self.predict(w, x);
        let (_, p) = self.loss_grad(n, &a);
        let mut t = 0.0;
        for (i, xi) in x.iter().enumerate() {
            let wi = self.column(w, i);
            let hw = hess_apply(p.as_deref(), &wi);
            t += xi * xi * wi.iter().zip(&hw).map(|(a, b)| a * b).sum::<f64>();
        }
        Ok(0.5 * self.sigma_drop * self.sigma_drop * t)
    }

    /// `E_ε f̃(W; n, ε) = f(W; n, 1) + trace_term`. Uncounted.
    pub fn surrogate_expectation(&self, w: &[f64], n: usize) -> Result<f64> {
        let base = self.loss_at(n, &self.predict(w, self.row(n)));
        Ok(base + self.trace_term(w, n)?)
    }

    /// `∇_W f̃(W; n, ε)` with `W` the anchor. One HVP call.
    pub fn grad_surrogate(&self, w: &[f64], n: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check(w, n, Some(eps))?;
        let x = self.row(n);
        let a = self.predict(w, x);
        let delta: Vec<f64> = eps.iter().zip(x).map(|(e, xi)| (e - 1.0) * xi).collect();
        let v = self.predict(w, &delta);
        let (g, p) = self.loss_grad(n, &a);
        let hv = hess_apply(p.as_deref(), &v);
        let mut out = vec![0.0; self.param_len()];
        // ∇ℓ(a) terms and the Hessian contracted with v
        self.add_outer(&mut out, &g, x, 1.0);
        self.add_outer(&mut out, &g, &delta, 1.0);
        self.add_outer(&mut out, &hv, x, 1.0);
        self.add_outer(&mut out, &hv, &delta, 1.0);
        if let Some(p) = &p {
            let pv: f64 = p.iter().zip(&v).map(|(a, b)| a * b).sum();
            let q: Vec<f64> = v.iter().map(|vk| vk * vk - 2.0 * pv * vk).collect();
            self.add_outer(&mut out, &hess_apply(Some(p), &q), x, 0.5);
        }
        self.counter.add_hvp(1);
        Ok(out)
    }

    /// `∇_W E_ε f̃(W; n, ε)`. One gradient call.
    pub fn expect_grad_surrogate(&self, w: &[f64], n: usize) -> Result<Vec<f64>> {
        self.check(w, n, None)?;
        let x = self.row(n);
        let s2 = self.sigma_drop * self.sigma_drop;
        let a = self.predict(w, x);
        let (g, p) = self.loss_grad(n, &a);
        let mut out = vec![0.0; self.param_len()];
        self.add_outer(&mut out, &g, x, 1.0);
        let mut curvature = vec![0.0; self.k];
        for (i, xi) in x.iter().enumerate() {
            let wi = self.column(w, i);
            let hw = hess_apply(p.as_deref(), &wi);
            for j in 0..self.k {
                out[j * self.d + i] += s2 * xi * xi * hw[j];
            }
            if let Some(p) = &p {
                let pw: f64 = p.iter().zip(&wi).map(|(a, b)| a * b).sum();
                let q: Vec<f64> = wi.iter().map(|wk| wk * wk - 2.0 * pw * wk).collect();
                for (c, h) in curvature.iter_mut().zip(hess_apply(Some(p), &q)) {
                    *c += 0.5 * s2 * xi * xi * h;
                }
            }
        }
        if p.is_some() {
            self.add_outer(&mut out, &curvature, x, 1.0);
        }
        self.counter.add_grad(1);
        Ok(out)
    }

    /// Mean loss `(1/N) Σ_n f(W; n, ε)` at fixed `ε`. Uncounted.
    pub fn mean_loss(&self, w: &[f64], eps: &[f64]) -> Result<f64> {
        let vals = par::try_map_range(self.n, |n| self.glm_f(w, n, eps))?;
        Ok(par::pairwise_sum_scalar(&vals) / self.n as f64)
    }

    /// `E_ε` of the mean loss, estimated with `S` draws from `stream`.
    pub fn expected_loss(&self, w: &[f64], s: usize, stream: &RngStream) -> Result<f64> {
        if s == 0 {
            return Err(invalid("expected loss needs at least one sample"));
        }
        let vals = (0..s)
            .map(|i| self.mean_loss(w, &self.draw_noise(&mut stream.child(i as u64).rng())?))
            .collect::<Result<Vec<_>>>()?;
        Ok(par::pairwise_sum_scalar(&vals) / s as f64)
    }
}

/// Synthetic Gaussian features with targets from a random `W*`.
pub fn synth_glm(n: usize, d: usize, k: usize, loss: GlmLoss, sigma_drop: f64, seed: u64) -> Result<DropoutGlm> {
    let root = RngStream::new(seed, 0).named("synth-glm");
    let x = root.child(0).standard_normal(n * d)?;
    let scale = 1.0 / (d as f64).sqrt();
    let w_true: Vec<f64> = root.child(1).standard_normal(k * d)?.into_iter().map(|v| scale * v).collect();
    let mut rng = root.child(2).rng();
    let predict = |row: &[f64]| -> Vec<f64> {
        (0..k)
            .map(|j| w_true[j * d..(j + 1) * d].iter().zip(row).map(|(a, b)| a * b).sum())
            .collect()
    };
    let targets = match loss {
        GlmLoss::SquaredError => {
            let noise = root.child(3).standard_normal(n * k)?;
            let mut y = Vec::with_capacity(n * k);
            for i in 0..n {
                for (j, a) in predict(&x[i * d..(i + 1) * d]).into_iter().enumerate() {
                    y.push(a + 0.1 * noise[i * k + j]);
                }
            }
            GlmTargets::Real(y)
        }
        GlmLoss::SoftmaxCrossEntropy => GlmTargets::Classes(
            (0..n)
                .map(|i| crate::data::sample_softmax(&predict(&x[i * d..(i + 1) * d]), rng.random::<f64>()))
                .collect(),
        ),
    };
    DropoutGlm::new(x, d, k, targets, sigma_drop)
}

/// Per-datum anchors `W^n`, cached `∇_W E f̃(W^n; n)`, and their mean `G`.
#[derive(Debug, Clone, PartialEq)]
pub struct GlmTable {
    entries: Vec<Vec<f64>>,
    anchors: Vec<Vec<f64>>,
    g: Vec<f64>,
}

impl GlmTable {
    /// One full pass of surrogate expectation gradients.
    pub fn from_entries(glm: &DropoutGlm, entries: Vec<Vec<f64>>) -> Result<Self> {
        if entries.len() != glm.num_data() {
            return Err(Error::DimensionMismatch {
                expected: glm.num_data(),
                got: entries.len(),
            });
        }
        let anchors = par::try_map_range(entries.len(), |n| glm.expect_grad_surrogate(&entries[n], n))?;
        let g = mean_rows(&anchors, glm.param_len());
        Ok(Self { entries, anchors, g })
    }

    pub fn synced(glm: &DropoutGlm, w: &[f64]) -> Result<Self> {
        Self::from_entries(glm, vec![w.to_vec(); glm.num_data()])
    }

    pub fn entries(&self) -> &[Vec<f64>] {
        &self.entries
    }

    pub fn running_mean(&self) -> &[f64] {
        &self.g
    }

    pub fn recompute_running_mean(&self, glm: &DropoutGlm) -> Result<Vec<f64>> {
        let anchors = par::try_map_range(self.entries.len(), |n| glm.expect_grad_surrogate(&self.entries[n], n))?;
        Ok(mean_rows(&anchors, glm.param_len()))
    }

    /// `W^n ← W` for `n` in `batch`, with the incremental refresh of `G`.
    pub fn update(&mut self, glm: &DropoutGlm, batch: &[usize], w: &[f64]) -> Result<()> {
        let fresh = par::try_map_slice(batch, |&n| glm.expect_grad_surrogate(w, n))?;
        let inv = 1.0 / self.entries.len() as f64;
        for (&n, new) in batch.iter().zip(fresh) {
            for ((g, a), b) in self.g.iter_mut().zip(&self.anchors[n]).zip(&new) {
                *g += inv * (b - a);
            }
            self.anchors[n] = new;
            self.entries[n] = w.to_vec();
        }
        Ok(())
    }
}

fn mean_rows(rows: &[Vec<f64>], width: usize) -> Vec<f64> {
    let mut m = par::pairwise_sum(rows, width);
    let inv = 1.0 / rows.len() as f64;
    m.iter_mut().for_each(|v| *v *= inv);
    m
}

/// `∇f + E_ε∇f̃(W) − ∇f̃(W; ε)`, anchored at the current `W`.
pub fn glm_cv(glm: &DropoutGlm, w: &[f64], n: usize, eps: &[f64]) -> Result<Vec<f64>> {
    let mut g = glm.grad_f(w, n, eps)?;
    let e = glm.expect_grad_surrogate(w, n)?;
    let s = glm.grad_surrogate(w, n, eps)?;
    for ((gi, ei), si) in g.iter_mut().zip(&e).zip(&s) {
        *gi += ei - si;
    }
    Ok(g)
}

/// `∇f(W; n, ε) + G − ∇f̃(W^n; n, ε)` against a frozen table.
pub fn glm_joint_datum(glm: &DropoutGlm, w: &[f64], n: usize, eps: &[f64], table: &GlmTable) -> Result<Vec<f64>> {
    let mut g = glm.grad_f(w, n, eps)?;
    let s = glm.grad_surrogate(&table.entries[n], n, eps)?;
    for ((gi, bar), si) in g.iter_mut().zip(&table.g).zip(&s) {
        *gi += bar - si;
    }
    Ok(g)
}

#[derive(Debug, Clone)]
pub enum GlmEstimator {
    Naive,
    Cv,
    Joint(GlmTable),
}

impl GlmEstimator {
    pub fn name(&self) -> &'static str {
        match self {
            GlmEstimator::Naive => "naive",
            GlmEstimator::Cv => "cv",
            GlmEstimator::Joint(_) => "joint-saga",
        }
    }

    pub fn sample_frozen(&self, glm: &DropoutGlm, w: &[f64], n: usize, eps: &[f64]) -> Result<Vec<f64>> {
        match self {
            GlmEstimator::Naive => glm.grad_f(w, n, eps),
            GlmEstimator::Cv => glm_cv(glm, w, n, eps),
            GlmEstimator::Joint(t) => glm_joint_datum(glm, w, n, eps, t),
        }
    }

    /// Batch-mean estimate; the joint table is updated after all terms are
    /// computed with the old table.
    pub fn step(&mut self, glm: &DropoutGlm, w: &[f64], batch: &[usize], noise: &Noise) -> Result<Vec<f64>> {
        validate_batch(batch, glm.num_data())?;
        let inv = 1.0 / batch.len() as f64;
        let mut acc = vec![0.0; glm.param_len()];
        for (slot, &n) in batch.iter().enumerate() {
            let g = self.sample_frozen(glm, w, n, noise.for_slot(slot))?;
            for (a, v) in acc.iter_mut().zip(g) {
                *a += inv * v;
            }
        }
        if let GlmEstimator::Joint(t) = self {
            t.update(glm, batch, w)?;
        }
        Ok(acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::MomentAccumulator;

    fn random_w(glm: &DropoutGlm, seed: u64, scale: f64) -> Vec<f64> {
        RngStream::new(seed, 7)
            .standard_normal(glm.param_len())
            .unwrap()
            .into_iter()
            .map(|v| scale * v)
            .collect()
    }

    fn small(loss: GlmLoss) -> DropoutGlm {
        synth_glm(12, 4, 3, loss, 0.5, 1).unwrap()
    }

    #[test]
    fn trivial_values() {
        let sq = small(GlmLoss::SquaredError);
        let zero = vec![0.0; sq.param_len()];
        let ones = vec![1.0; 4];
        let y: Vec<f64> = match &sq.targets {
            GlmTargets::Real(y) => y[..3].to_vec(),
            _ => unreachable!(),
        };
        let half_norm = 0.5 * y.iter().map(|v| v * v).sum::<f64>();
        assert!((sq.glm_f(&zero, 0, &ones).unwrap() - half_norm).abs() < 1e-14);
        let ce = small(GlmLoss::SoftmaxCrossEntropy);
        assert!((ce.glm_f(&zero, 2, &ones).unwrap() - 3f64.ln()).abs() < 1e-14);
        assert_eq!(sq.trace_term(&zero, 1).unwrap(), 0.0);
        let w = random_w(&ce, 2, 0.5);
        let plain = ce.loss_at(4, &ce.predict(&w, ce.row(4)));
        assert_eq!(ce.glm_f(&w, 4, &ones).unwrap(), plain);
    }

    #[test]
    fn zero_dropout_expectation_is_plain_loss() {
        let base = small(GlmLoss::SoftmaxCrossEntropy);
        let glm = DropoutGlm::new(base.x.clone(), 4, 3, base.targets.clone(), 0.0).unwrap();
        let w = random_w(&glm, 3, 0.7);
        assert_eq!(glm.surrogate_expectation(&w, 5).unwrap(), glm.glm_f(&w, 5, &[1.0; 4]).unwrap());
    }

    fn fd_grad(f: impl Fn(&[f64]) -> f64, w: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..w.len())
            .map(|i| {
                let mut a = w.to_vec();
                let mut b = w.to_vec();
                a[i] += h;
                b[i] -= h;
                (f(&a) - f(&b)) / (2.0 * h)
            })
            .collect()
    }

    fn rel(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
        num / den
    }

    #[test]
    fn gradients_match_finite_differences() {
        for loss in [GlmLoss::SquaredError, GlmLoss::SoftmaxCrossEntropy] {
            let glm = small(loss);
            for t in 0..5u64 {
                let w = random_w(&glm, 10 + t, 0.8);
                let eps = glm.draw_noise(&mut RngStream::new(20, t).rng()).unwrap();
                let n = t as usize;
                let g = glm.grad_f(&w, n, &eps).unwrap();
                assert!(rel(&g, &fd_grad(|v| glm.glm_f(v, n, &eps).unwrap(), &w)) < 1e-6);
                let gs = glm.grad_surrogate(&w, n, &eps).unwrap();
                assert!(rel(&gs, &fd_grad(|v| glm.surrogate(v, n, &eps).unwrap(), &w)) < 1e-6, "{loss}");
                let ge = glm.expect_grad_surrogate(&w, n).unwrap();
                assert!(rel(&ge, &fd_grad(|v| glm.surrogate_expectation(v, n).unwrap(), &w)) < 1e-6, "{loss}");
                let e1 = vec![1.0; 4];
                let gx = glm.grad_eps(&w, n, &eps).unwrap();
                let fx = fd_grad(|e| glm.glm_f(&w, n, e).unwrap(), &eps);
                assert!(rel(&gx, &fx) < 1e-6);
                assert!(glm.grad_eps(&w, n, &e1).unwrap().iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn squared_error_surrogate_is_exact() {
        let glm = small(GlmLoss::SquaredError);
        let w = random_w(&glm, 30, 1.0);
        for t in 0..10u64 {
            let eps = glm.draw_noise(&mut RngStream::new(31, t).rng()).unwrap();
            let f = glm.glm_f(&w, 3, &eps).unwrap();
            assert!((glm.surrogate(&w, 3, &eps).unwrap() - f).abs() <= 1e-10 * f.abs().max(1.0));
        }
    }

    #[test]
    fn surrogate_expectation_matches_monte_carlo() {
        let glm = small(GlmLoss::SoftmaxCrossEntropy);
        let w = random_w(&glm, 40, 0.8);
        let mut acc = MomentAccumulator::new(1);
        let mut rng = RngStream::new(41, 0).rng();
        for _ in 0..200_000 {
            let eps = glm.draw_noise(&mut rng).unwrap();
            acc.push(&[glm.surrogate(&w, 6, &eps).unwrap()]);
        }
        let exact = glm.surrogate_expectation(&w, 6).unwrap();
        assert!((acc.mean()[0] - exact).abs() < 4.0 * acc.standard_errors()[0]);
    }

    #[test]
    fn joint_on_squared_error_is_noise_free() {
        let glm = small(GlmLoss::SquaredError);
        let w = random_w(&glm, 50, 0.5);
        let t = GlmTable::synced(&glm, &w).unwrap();
        let mut acc = MomentAccumulator::new(glm.param_len());
        for i in 0..500u64 {
            let eps = glm.draw_noise(&mut RngStream::new(51, i).rng()).unwrap();
            acc.push(&glm_joint_datum(&glm, &w, (i % 12) as usize, &eps, &t).unwrap());
        }
        assert!(acc.trace_variance() <= 1e-18);
    }

    #[test]
    fn joint_costs_three_per_datum_and_keeps_g() {
        let glm = small(GlmLoss::SoftmaxCrossEntropy);
        let mut est = GlmEstimator::Joint(GlmTable::synced(&glm, &random_w(&glm, 60, 0.3)).unwrap());
        let before = glm.counter().snapshot();
        let eps = glm.draw_noise(&mut RngStream::new(61, 0).rng()).unwrap();
        est.step(&glm, &random_w(&glm, 62, 0.3), &[1, 5], &Noise::Shared(eps)).unwrap();
        assert_eq!(glm.counter().snapshot().since(before).total(), 6);
        if let GlmEstimator::Joint(t) = &est {
            let fresh = t.recompute_running_mean(&glm).unwrap();
            assert!(rel(t.running_mean(), &fresh) < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(DropoutGlm::new(vec![1.0; 7], 2, 2, GlmTargets::Classes(vec![0; 3]), 0.5).is_err());
        assert!(DropoutGlm::new(vec![1.0; 4], 2, 2, GlmTargets::Classes(vec![0, 2]), 0.5).is_err());
        let glm = small(GlmLoss::SquaredError);
        assert!(glm.glm_f(&[0.0; 3], 0, &[1.0; 4]).is_err());
        assert!(glm.glm_f(&vec![0.0; 12], 12, &[1.0; 4]).is_err());
    }
}
