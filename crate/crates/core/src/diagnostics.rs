//! Variance decomposition of the doubly-stochastic gradient, full-data ELBO
//! evaluation, and trace records.
//!
//! Three trace-variances are estimated at a frozen `w`:
//!
//! * `v_joint`: `V_{n,ε}[∇f(w; n, ε)]`,
//! * `v_sub`: `V_n[∇f(w; n)]` with `∇f(w; n) = E_ε ∇f(w; n, ε)`,
//! * `v_mc`: `V_ε[∇f(w; ε)]` with `∇f(w; ε) = E_n ∇f(w; n, ε)`.
//!
//! Sample `i` of every estimator draws from `stream.child(i)`, and all
//! reductions use a fixed order, so results do not depend on thread count.

use rand::Rng;

use crate::error::{invalid, Result};
use crate::estimators::Estimator;
use crate::models::Model;
use crate::objective::Objective;
use crate::par;
use crate::rng::{draw_standard_normal, RngStream};
use crate::types::{GradientVector, MomentAccumulator, VariationalParams};

/// A point estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

impl Estimate {
    /// `|a − b| ≤ k · sqrt(se_a² + se_b²)`.
    pub fn agrees_with(&self, other: &Estimate, k: f64) -> bool {
        (self.value - other.value).abs() <= k * self.se.hypot(other.se)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagnosticsConfig {
    pub joint_samples: usize,
    pub inner_samples: usize,
    pub mc_samples: usize,
    pub elbo_samples: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            joint_samples: 1000,
            inner_samples: 64,
            mc_samples: 100,
            elbo_samples: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceDecomposition {
    pub v_joint: Estimate,
    pub v_sub: Estimate,
    pub v_mc: Estimate,
}

/// Unbiased trace-variance (divisor `S − 1`) with a delta-method standard
/// error from the per-sample squared deviations.
pub fn trace_variance_with_se<V: AsRef<[f64]>>(samples: &[V]) -> Result<Estimate> {
    let s = samples.len();
    if s < 2 {
        return Err(invalid("trace-variance needs at least two samples"));
    }
    let width = samples[0].as_ref().len();
    let mut acc = MomentAccumulator::new(width);
    for x in samples {
        acc.push(x.as_ref());
    }
    let mean = acc.mean();
    let dev: Vec<f64> = samples
        .iter()
        .map(|x| x.as_ref().iter().zip(mean).map(|(a, m)| (a - m).powi(2)).sum())
        .collect();
    let sf = s as f64;
    let total: f64 = dev.iter().sum();
    let value = total / (sf - 1.0);
    let mean_dev = total / sf;
    let var_dev = dev.iter().map(|u| (u - mean_dev).powi(2)).sum::<f64>() / (sf - 1.0);
    let se = (var_dev / sf).sqrt() * sf / (sf - 1.0);
    Ok(Estimate { value, se })
}

/// `(n, ε)` for sample `i`: `n` uniform over the data, `ε` standard normal.
pub fn sample_pair(stream: &RngStream, i: u64, n_data: usize, d: usize) -> Result<(usize, Vec<f64>)> {
    let mut rng = stream.child(i).rng();
    let n = rng.random_range(0..n_data);
    let eps = draw_standard_normal(&mut rng, d)?;
    Ok((n, eps))
}

/// `S` evaluations of `f(n, ε)` over i.i.d. `(n, ε)` pairs, in sample order.
pub fn sample_over_pairs<M, F>(obj: &Objective<M>, s: usize, stream: &RngStream, f: F) -> Result<Vec<GradientVector>>
where
    M: Model,
    F: Fn(usize, &[f64]) -> Result<GradientVector> + Sync + Send,
{
    let (nn, d) = (obj.num_data(), obj.dim());
    par::try_map_range(s, |i| {
        let (n, eps) = sample_pair(stream, i as u64, nn, d)?;
        f(n, &eps)
    })
}

/// `V_{n,ε}[∇f(w; n, ε)]` from `S ≥ 2` i.i.d. pairs.
pub fn estimate_joint_variance<M: Model>(
    obj: &Objective<M>,
    w: &VariationalParams,
    s: usize,
    stream: &RngStream,
) -> Result<Estimate> {
    if s < 2 {
        return Err(invalid("joint variance needs S ≥ 2"));
    }
    let g = sample_over_pairs(obj, s, stream, |n, eps| obj.grad_f(w, n, eps))?;
    trace_variance_with_se(&g)
}

/// Trace-variance of a single-datum estimator with frozen state.
pub fn estimate_estimator_variance<M: Model>(
    obj: &Objective<M>,
    w: &VariationalParams,
    estimator: &Estimator,
    s: usize,
    stream: &RngStream,
) -> Result<Estimate> {
    if s < 2 {
        return Err(invalid("estimator variance needs S ≥ 2"));
    }
    let g = sample_over_pairs(obj, s, stream, |n, eps| estimator.sample_frozen(obj, w, n, eps))?;
    trace_variance_with_se(&g)
}

/// Per-datum inner Monte Carlo summary.
struct Inner {
    mean: Vec<f64>,
    trace_var: f64,
}

fn inner_stats<M: Model>(
    obj: &Objective<M>,
    w: &VariationalParams,
    n: usize,
    draws: std::ops::Range<usize>,
    stream: &RngStream,
) -> Result<Inner> {
    let d = obj.dim();
    let mut acc = MomentAccumulator::new(2 * d);
    let sn = stream.child(n as u64);
    for s in draws {
        let eps = sn.child(s as u64).standard_normal(d)?;
        acc.push(obj.grad_f(w, n, &eps)?.as_slice());
    }
    Ok(Inner {
        mean: acc.mean().to_vec(),
        trace_var: acc.trace_variance(),
    })
}

/// Across-n population trace-variance of the inner means, minus the
/// inner-sampling inflation `(1 − 1/N) · mean_n(tr V̂_ε) / S_inner`,
/// clamped at zero.
fn corrected_sub_variance(inner: &[Inner], s_inner: usize) -> f64 {
    let nn = inner.len();
    let means: Vec<&[f64]> = inner.iter().map(|i| i.mean.as_slice()).collect();
    let spread = crate::types::trace_variance(&means) * (nn as f64 - 1.0) / nn as f64;
    let spread = if nn > 1 { spread } else { 0.0 };
    let bias = (1.0 - 1.0 / nn as f64) * inner.iter().map(|i| i.trace_var).sum::<f64>() / nn as f64 / s_inner as f64;
    (spread - bias).max(0.0)
}

/// `V_n[∇f(w; n)]` by enumerating every datum with `S_inner` draws each.
///
/// The standard error comes from splitting the inner draws into up to 8
/// groups of at least 2 and taking the spread of the per-group corrected
/// estimates. It is zero when `S_inner < 4`.
pub fn estimate_subsampling_variance<M: Model>(
    obj: &Objective<M>,
    w: &VariationalParams,
    s_inner: usize,
    stream: &RngStream,
) -> Result<Estimate> {
    if s_inner < 2 {
        return Err(invalid("subsampling variance needs S_inner ≥ 2"));
    }
    let nn = obj.num_data();
    let full = par::try_map_range(nn, |n| inner_stats(obj, w, n, 0..s_inner, stream))?;
    let value = corrected_sub_variance(&full, s_inner);
    let groups = (s_inner / 2).min(8);
    let se = if groups >= 2 && nn > 1 {
        let per = s_inner / groups;
        let est: Vec<f64> = (0..groups)
            .map(|gi| {
                let inner = par::try_map_range(nn, |n| inner_stats(obj, w, n, gi * per..(gi + 1) * per, stream))?;
                Ok(corrected_sub_variance(&inner, per))
            })
            .collect::<Result<_>>()?;
        let m = est.iter().sum::<f64>() / groups as f64;
        let v = est.iter().map(|e| (e - m).powi(2)).sum::<f64>() / (groups as f64 - 1.0);
        // a group holds 1/groups of the draws, so its variance is ~groups× larger
        (v / groups as f64).sqrt()
    } else {
        0.0
    };
    Ok(Estimate { value, se })
}

/// Mean over `n` of the inner trace-variance `tr V_ε[∇f(w; n, ε)]`.
pub fn estimate_mean_inner_variance<M: Model>(
    obj: &Objective<M>,
    w: &VariationalParams,
    s_inner: usize,
    stream: &RngStream,
) -> Result<Estimate> {
    if s_inner < 2 {
        return Err(invalid("inner variance needs S_inner ≥ 2"));
    }
    let nn = obj.num_data();
    let inner = par::try_map_range(nn, |n| inner_stats(obj, w, n, 0..s_inner, stream))?;
    let vals: Vec<f64> = inner.iter().map(|i| i.trace_var).collect();
    let value = vals.iter().sum::<f64>() / nn as f64;
    // each inner trace-variance has relative SE about sqrt(2/(S−1)) per coordinate
    let se = (vals.iter().map(|v| v * v).sum::<f64>() * 2.0 / (s_inner as f64 - 1.0)).sqrt() / nn as f64;
    Ok(Estimate { value, se })
}

/// `V_ε[∇f(w; ε)]` from `S_ε` full-data gradients (`S_ε · N` oracle calls).
pub fn estimate_mc_variance<M: Model>(
    obj: &Objective<M>,
    w: &VariationalParams,
    s_eps: usize,
    stream: &RngStream,
) -> Result<Estimate> {
    if s_eps < 2 {
        return Err(invalid("Monte Carlo variance needs S_ε ≥ 2"));
    }
    let d = obj.dim();
    let g = (0..s_eps)
        .map(|s| obj.grad_f_full_epoch(w, &stream.child(s as u64).standard_normal(d)?))
        .collect::<Result<Vec<_>>>()?;
    trace_variance_with_se(&g)
}

pub fn decompose<M: Model>(
    obj: &Objective<M>,
    w: &VariationalParams,
    cfg: &DiagnosticsConfig,
    stream: &RngStream,
) -> Result<VarianceDecomposition> {
    Ok(VarianceDecomposition {
        v_joint: estimate_joint_variance(obj, w, cfg.joint_samples, &stream.named("v_joint"))?,
        v_sub: estimate_subsampling_variance(obj, w, cfg.inner_samples, &stream.named("v_sub"))?,
        v_mc: estimate_mc_variance(obj, w, cfg.mc_samples, &stream.named("v_mc"))?,
    })
}

/// ELBO `−(1/S) Σ_s (1/N) Σ_n f(w; n, ε_s)` on the full dataset. Uncounted.
pub fn evaluate_elbo<M: Model>(obj: &Objective<M>, w: &VariationalParams, s: usize, stream: &RngStream) -> Result<Estimate> {
    if s == 0 {
        return Err(invalid("ELBO needs at least one sample"));
    }
    let d = obj.dim();
    let vals = (0..s)
        .map(|i| Ok(-obj.eval_f_full_epoch(w, &stream.child(i as u64).standard_normal(d)?)?))
        .collect::<Result<Vec<f64>>>()?;
    let value = par::pairwise_sum_scalar(&vals) / s as f64;
    let se = if s > 1 {
        let v = vals.iter().map(|x| (x - value).powi(2)).sum::<f64>() / (s as f64 - 1.0);
        (v / s as f64).sqrt()
    } else {
        0.0
    };
    Ok(Estimate { value, se })
}

/// Nodes and weights for `E[g(ξ)]`, `ξ ~ N(0, 1)`, exact for polynomials of
/// degree `< 2m`.
pub fn gauss_hermite(m: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if m == 0 || m > 150 {
        return Err(invalid("Gauss-Hermite order must lie in 1..=150"));
    }
    // Newton iteration on orthonormal physicists' Hermite polynomials.
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let mf = m as f64;
    let mut x = vec![0.0; m];
    let mut w = vec![0.0; m];
    let mut z: f64 = 0.0;
    for i in 0..m.div_ceil(2) {
        z = match i {
            0 => (2.0 * mf + 1.0).sqrt() - 1.85575 * (2.0 * mf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * mf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..m {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * mf).sqrt() * p2;
            let dz = p1 / pp;
            z -= dz;
            if dz.abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[m - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[m - 1 - i] = w[i];
    }
    // physicists' weight e^{−x²} → standard normal
    let sqrt_pi = std::f64::consts::PI.sqrt();
    let nodes = x.iter().map(|v| v * std::f64::consts::SQRT_2).collect();
    let weights = w.iter().map(|v| v / sqrt_pi).collect();
    Ok((nodes, weights))
}

/// Tensor-product Gauss–Hermite grid over `d` dimensions.
pub fn gauss_hermite_grid(d: usize, m: usize) -> Result<Vec<(Vec<f64>, f64)>> {
    let (x, w) = gauss_hermite(m)?;
    let total = m.checked_pow(d as u32).filter(|t| *t <= 10_000_000).ok_or_else(|| invalid("quadrature grid too large"))?;
    Ok((0..total)
        .map(|mut k| {
            let mut node = Vec::with_capacity(d);
            let mut weight = 1.0;
            for _ in 0..d {
                node.push(x[k % m]);
                weight *= w[k % m];
                k /= m;
            }
            (node, weight)
        })
        .collect())
}

/// Variance components computed by quadrature over `ε` and enumeration over
/// `n`. Exact up to quadrature error; for small `d` only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureDecomposition {
    pub v_joint: f64,
    pub v_sub: f64,
    pub v_mc: f64,
    /// `E_n tr V_ε[∇f(w; n, ε)]`.
    pub mean_inner: f64,
}

pub fn quadrature_decomposition<M: Model>(obj: &Objective<M>, w: &VariationalParams, m: usize) -> Result<QuadratureDecomposition> {
    let (nn, d) = (obj.num_data(), obj.dim());
    let grid = gauss_hermite_grid(d, m)?;
    let width = 2 * d;
    // per-n first and second moments, and per-node full-data means
    let mut first = vec![vec![0.0; width]; nn];
    let mut second = vec![vec![0.0; width]; nn];
    let mut node_means = Vec::with_capacity(grid.len());
    for (eps, wt) in &grid {
        let mut node_mean = vec![0.0; width];
        for n in 0..nn {
            let g = obj.grad_f(w, n, eps)?;
            for (j, v) in g.as_slice().iter().enumerate() {
                first[n][j] += wt * v;
                second[n][j] += wt * v * v;
                node_mean[j] += v / nn as f64;
            }
        }
        node_means.push(node_mean);
    }
    let grand: Vec<f64> = (0..width).map(|j| first.iter().map(|f| f[j]).sum::<f64>() / nn as f64).collect();
    let grand_sq: Vec<f64> = (0..width).map(|j| second.iter().map(|s| s[j]).sum::<f64>() / nn as f64).collect();
    let v_joint = (0..width).map(|j| grand_sq[j] - grand[j] * grand[j]).sum();
    let v_sub = (0..width)
        .map(|j| first.iter().map(|f| (f[j] - grand[j]).powi(2)).sum::<f64>() / nn as f64)
        .sum();
    let mean_inner = (0..nn)
        .map(|n| (0..width).map(|j| second[n][j] - first[n][j] * first[n][j]).sum::<f64>())
        .sum::<f64>()
        / nn as f64;
    let v_mc = (0..width)
        .map(|j| {
            grid.iter()
                .zip(&node_means)
                .map(|((_, wt), nm)| wt * (nm[j] - grand[j]).powi(2))
                .sum::<f64>()
        })
        .sum();
    Ok(QuadratureDecomposition {
        v_joint,
        v_sub,
        v_mc,
        mean_inner,
    })
}

/// One row of an optimization trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub iteration: u64,
    pub epoch: f64,
    pub elbo: f64,
    pub v_joint: Option<f64>,
    pub v_sub: Option<f64>,
    pub v_mc: Option<f64>,
    pub grad_calls: u64,
    pub hvp_calls: u64,
    pub step_size: f64,
    pub seed: u64,
}

impl TraceRecord {
    pub const HEADER: [&'static str; 10] = [
        "iteration",
        "epoch",
        "elbo",
        "v_joint",
        "v_sub",
        "v_mc",
        "grad_calls",
        "hvp_calls",
        "step_size",
        "seed",
    ];

    pub fn to_record(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        vec![
            self.iteration.to_string(),
            format!("{}", self.epoch),
            format!("{}", self.elbo),
            opt(self.v_joint),
            opt(self.v_sub),
            opt(self.v_mc),
            self.grad_calls.to_string(),
            self.hvp_calls.to_string(),
            format!("{}", self.step_size),
            self.seed.to_string(),
        ]
    }
}

pub fn write_trace<W: std::io::Write>(out: W, rows: &[TraceRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TraceRecord::HEADER)?;
    for r in rows {
        w.write_record(r.to_record())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace<R: std::io::Read>(input: R) -> Result<Vec<TraceRecord>> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let field = |k: usize| -> Result<&str> {
            rec.get(k).ok_or_else(|| crate::Error::Parse {
                line,
                column: TraceRecord::HEADER[k].into(),
                message: "missing field".into(),
            })
        };
        let num = |k: usize| -> Result<f64> {
            field(k)?.parse::<f64>().map_err(|e| crate::Error::Parse {
                line,
                column: TraceRecord::HEADER[k].into(),
                message: e.to_string(),
            })
        };
        let opt = |k: usize| -> Result<Option<f64>> { if field(k)?.is_empty() { Ok(None) } else { num(k).map(Some) } };
        rows.push(TraceRecord {
            iteration: num(0)? as u64,
            epoch: num(1)?,
            elbo: num(2)?,
            v_joint: opt(3)?,
            v_sub: opt(4)?,
            v_mc: opt(5)?,
            grad_calls: num(6)? as u64,
            hvp_calls: num(7)? as u64,
            step_size: num(8)?,
            seed: num(9)? as u64,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{LinearGaussianModel, LogisticRegressionModel};

    /// A likelihood that ignores `z`, and a prior with zero gradient.
    struct Flat;

    impl Model for Flat {
        fn num_data(&self) -> usize {
            4
        }
        fn dim(&self) -> usize {
            2
        }
        fn log_lik(&self, _: usize, _: &[f64]) -> f64 {
            0.0
        }
        fn grad_log_lik(&self, _: usize, _: &[f64]) -> Vec<f64> {
            vec![0.0; 2]
        }
        fn hvp_log_lik(&self, _: usize, _: &[f64], _: &[f64]) -> Vec<f64> {
            vec![0.0; 2]
        }
        fn log_prior(&self, _: &[f64]) -> f64 {
            0.0
        }
        fn grad_log_prior(&self, _: &[f64]) -> Vec<f64> {
            vec![0.0; 2]
        }
        fn hvp_log_prior(&self, _: &[f64], _: &[f64]) -> Vec<f64> {
            vec![0.0; 2]
        }
    }

    fn lg(n: usize, d: usize, seed: u64) -> Objective<LinearGaussianModel> {
        let s = RngStream::new(seed, 0);
        let x = s.child(0).standard_normal(n * d).unwrap();
        let y = s.child(1).standard_normal(n).unwrap();
        Objective::new(LinearGaussianModel::new(x, y, d, 0.5).unwrap())
    }

    fn w(d: usize, ls: f64) -> VariationalParams {
        VariationalParams::new((0..d).map(|i| 0.3 - 0.2 * i as f64).collect(), vec![ls; d]).unwrap()
    }

    #[test]
    fn degenerate_distributions_have_zero_variance() {
        let o = Objective::new(Flat);
        let wp = w(2, -0.3);
        let s = RngStream::new(1, 0);
        assert_eq!(estimate_joint_variance(&o, &wp, 50, &s).unwrap().value, 0.0);
        assert_eq!(estimate_mc_variance(&o, &wp, 20, &s).unwrap().value, 0.0);
        assert_eq!(estimate_subsampling_variance(&o, &wp, 8, &s).unwrap().value, 0.0);
    }

    #[test]
    fn tiny_sigma_single_datum_collapses() {
        let o = lg(1, 2, 2);
        let wp = w(2, -30.0);
        let s = RngStream::new(3, 0);
        assert!(estimate_joint_variance(&o, &wp, 100, &s).unwrap().value < 1e-20);
        assert!(estimate_mc_variance(&o, &wp, 20, &s).unwrap().value < 1e-20);
        assert_eq!(estimate_subsampling_variance(&o, &wp, 16, &s).unwrap().value, 0.0);
    }

    #[test]
    fn rejects_small_sample_counts() {
        let o = lg(3, 1, 4);
        let wp = w(1, 0.0);
        let s = RngStream::new(5, 0);
        assert!(estimate_joint_variance(&o, &wp, 1, &s).is_err());
        assert!(estimate_subsampling_variance(&o, &wp, 1, &s).is_err());
        assert!(estimate_mc_variance(&o, &wp, 1, &s).is_err());
        assert!(evaluate_elbo(&o, &wp, 0, &s).is_err());
    }

    #[test]
    fn gauss_hermite_integrates_normal_moments() {
        let (x, wt) = gauss_hermite(20).unwrap();
        let moment = |k: i32| x.iter().zip(&wt).map(|(xi, wi)| wi * xi.powi(k)).sum::<f64>();
        assert!((moment(0) - 1.0).abs() < 1e-13);
        assert!(moment(1).abs() < 1e-13);
        assert!((moment(2) - 1.0).abs() < 1e-12);
        assert!((moment(4) - 3.0).abs() < 1e-11);
        assert!((moment(6) - 15.0).abs() < 1e-10);
    }

    #[test]
    fn joint_variance_matches_quadrature_d1() {
        let o = lg(3, 1, 6);
        let wp = w(1, -0.2);
        let q = quadrature_decomposition(&o, &wp, 40).unwrap();
        let e = estimate_joint_variance(&o, &wp, 200_000, &RngStream::new(7, 0)).unwrap();
        assert!((e.value - q.v_joint).abs() <= 0.02 * q.v_joint, "{e:?} vs {q:?}");
    }

    #[test]
    fn subsampling_variance_matches_closed_form() {
        let o = lg(10, 2, 8);
        let wp = w(2, -2.5);
        let exact: Vec<Vec<f64>> = (0..10).map(|n| o.model().exact_datum_gradient(n, &wp)).collect();
        let target = crate::types::trace_variance(&exact) * 9.0 / 10.0;
        let e = estimate_subsampling_variance(&o, &wp, 64, &RngStream::new(9, 0)).unwrap();
        assert!((e.value - target).abs() <= 0.02 * target, "{e:?} vs {target}");
        let e2 = estimate_subsampling_variance(&o, &wp, 128, &RngStream::new(10, 0)).unwrap();
        assert!(e.agrees_with(&e2, 3.0), "{e:?} vs {e2:?}");
    }

    #[test]
    fn total_variance_closure_with_quadrature() {
        let o = lg(3, 2, 11);
        let wp = w(2, -0.4);
        let q = quadrature_decomposition(&o, &wp, 30).unwrap();
        assert!((q.mean_inner + q.v_sub - q.v_joint).abs() <= 1e-9 * q.v_joint);
        let e = estimate_joint_variance(&o, &wp, 100_000, &RngStream::new(12, 0)).unwrap();
        assert!((e.value - q.v_joint).abs() <= 3.0 * e.se, "{e:?} vs {q:?}");
    }

    #[test]
    fn elbo_matches_closed_form() {
        let o = lg(6, 2, 13);
        let wp = w(2, -0.7);
        let e = evaluate_elbo(&o, &wp, 10_000, &RngStream::new(14, 0)).unwrap();
        let exact = -o.model().exact_negative_elbo(&wp);
        assert!((e.value - exact).abs() <= 4.0 * e.se, "{e:?} vs {exact}");
    }

    #[test]
    fn elbo_single_sample_definition() {
        let s = RngStream::new(15, 0);
        let x = s.child(0).standard_normal(5 * 2).unwrap();
        let o = Objective::new(LogisticRegressionModel::new(x, vec![1.0, 0.0, 1.0, 1.0, 0.0], 2).unwrap());
        let wp = w(2, -0.1);
        let e = evaluate_elbo(&o, &wp, 1, &s).unwrap();
        let eps = s.child(0).standard_normal(2).unwrap();
        let direct = -(0..5).map(|n| o.eval_f(&wp, n, &eps).unwrap()).sum::<f64>() / 5.0;
        assert!((e.value - direct).abs() <= 1e-12 * direct.abs());
        assert_eq!(e.se, 0.0);
    }

    #[test]
    fn results_are_reproducible() {
        let o = lg(7, 2, 16);
        let wp = w(2, -0.2);
        let cfg = DiagnosticsConfig {
            joint_samples: 300,
            inner_samples: 16,
            mc_samples: 20,
            elbo_samples: 10,
        };
        let a = decompose(&o, &wp, &cfg, &RngStream::new(17, 0)).unwrap();
        let b = decompose(&o, &wp, &cfg, &RngStream::new(17, 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn trace_round_trip() {
        let rows = vec![
            TraceRecord {
                iteration: 0,
                epoch: 0.0,
                elbo: -12.5,
                v_joint: None,
                v_sub: Some(0.25),
                v_mc: None,
                grad_calls: 0,
                hvp_calls: 0,
                step_size: 1e-3,
                seed: 4,
            },
            TraceRecord {
                iteration: 10,
                epoch: 0.1,
                elbo: -3.0,
                v_joint: Some(1.5),
                v_sub: None,
                v_mc: Some(2.0),
                grad_calls: 100,
                hvp_calls: 50,
                step_size: 1e-3,
                seed: 4,
            },
        ];
        let mut buf = Vec::new();
        write_trace(&mut buf, &rows).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().starts_with(
            "iteration,epoch,elbo,v_joint,v_sub,v_mc,grad_calls,hvp_calls,step_size,seed\n0,0,-12.5,,0.25,"
        ));
        assert_eq!(read_trace(buf.as_slice()).unwrap(), rows);
    }

    #[test]
    fn se_of_trace_variance_is_sane() {
        let samples: Vec<Vec<f64>> = (0..20_000u64).map(|i| RngStream::new(18, i).standard_normal(3).unwrap()).collect();
        let e = trace_variance_with_se(&samples).unwrap();
        // Var of a sum of 3 squared normals is 6, so SE ≈ sqrt(6/S)
        assert!((e.value - 3.0).abs() < 4.0 * e.se);
        assert!((e.se - (6.0f64 / 20_000.0).sqrt()).abs() < 0.1 * e.se);
    }
}
