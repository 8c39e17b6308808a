use crate::error::{invalid, Error, Result};
use crate::models::Model;
use crate::objective::Objective;
use crate::par;
use crate::types::{axpy, GradientVector, VariationalParams};

use super::{batch_mean, Noise, ParamTable};

/// Joint control variate with a SAGA table.
#[derive(Debug, Clone)]
pub struct JointSaga {
    table: ParamTable,
}

impl JointSaga {
    pub fn new(table: ParamTable) -> Result<Self> {
        if !table.has_running_mean() {
            return Err(Error::TableNotInitialized);
        }
        Ok(Self { table })
    }

    pub fn table(&self) -> &ParamTable {
        &self.table
    }

    pub fn into_table(self) -> ParamTable {
        self.table
    }

    /// Estimates with the current table, then writes `w` into the table for
    /// every datum in the batch.
    pub(crate) fn step<M: Model>(
        &mut self,
        obj: &Objective<M>,
        w: &VariationalParams,
        batch: &[usize],
        noise: &Noise,
    ) -> Result<GradientVector> {
        let g = batch_mean(obj.dim(), batch, |slot, n| {
            joint_saga_datum(obj, w, n, noise.for_slot(slot), &self.table)
        })?;
        self.table.update(obj, batch, w)?;
        Ok(g)
    }
}

/// μ-part `∇f(w;n,ε) + G − ∇_μ f̃(w^n; n, ε)`, log σ-part naive.
/// One gradient call plus one HVP; the anchor gradient comes from the table.
pub fn joint_saga_datum<M: Model>(
    obj: &Objective<M>,
    w: &VariationalParams,
    n: usize,
    eps: &[f64],
    table: &ParamTable,
) -> Result<GradientVector> {
    obj.check_index(n)?;
    let g_bar = table.running_mean().ok_or(Error::TableNotInitialized)?;
    let anchor = &table.entries()[n];
    let e_anchor = table.anchor_expectation(n).ok_or(Error::TableNotInitialized)?;
    let mut g = obj.grad_f(w, n, eps)?;
    let hv = obj.anchored_hvp(anchor, n, eps)?;
    // −∇_μ f̃(w^n) = −E_ε∇_μ f̃(w^n) + ∇²k_n(μ^n)(ε ⊙ σ^n)
    let mu = g.mu_part_mut();
    axpy(mu, 1.0, g_bar);
    axpy(mu, -1.0, e_anchor);
    axpy(mu, 1.0, &hv);
    Ok(g)
}

/// Joint control variate with a periodically refreshed snapshot instead of
/// a table. Memory is `O(d)`.
#[derive(Debug, Clone)]
pub struct SvrgState {
    snapshot: VariationalParams,
    snapshot_mean: Vec<f64>,
    k: usize,
    steps_since_refresh: usize,
}

impl SvrgState {
    /// Takes the initial snapshot at `w` (`N` gradient calls).
    pub fn new<M: Model>(obj: &Objective<M>, w: &VariationalParams, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(invalid("SVRG update frequency must be positive"));
        }
        let mut s = Self {
            snapshot: w.clone(),
            snapshot_mean: Vec::new(),
            k,
            steps_since_refresh: 0,
        };
        s.refresh(obj, w)?;
        Ok(s)
    }

    pub fn restore(snapshot: VariationalParams, snapshot_mean: Vec<f64>, k: usize, steps_since_refresh: usize) -> Result<Self> {
        if k == 0 {
            return Err(invalid("SVRG update frequency must be positive"));
        }
        if snapshot_mean.len() != snapshot.dim() {
            return Err(Error::CheckpointMismatch("snapshot mean length".into()));
        }
        Ok(Self {
            snapshot,
            snapshot_mean,
            k,
            steps_since_refresh,
        })
    }

    /// `w̃ ← w`, `ḡ ← (1/N) Σ_n E_ε ∇_μ f̃(w̃; n, ε)`.
    pub fn refresh<M: Model>(&mut self, obj: &Objective<M>, w: &VariationalParams) -> Result<()> {
        let nn = obj.num_data();
        let rows = par::try_map_range(nn, |n| obj.expect_grad_surrogate_mu(w, w, n))?;
        let mut mean = par::pairwise_sum(&rows, obj.dim());
        let inv = 1.0 / nn as f64;
        mean.iter_mut().for_each(|v| *v *= inv);
        self.snapshot = w.clone();
        self.snapshot_mean = mean;
        self.steps_since_refresh = 0;
        Ok(())
    }

    pub fn snapshot(&self) -> &VariationalParams {
        &self.snapshot
    }

    pub fn snapshot_mean(&self) -> &[f64] {
        &self.snapshot_mean
    }

    pub fn update_frequency(&self) -> usize {
        self.k
    }

    pub fn steps_since_refresh(&self) -> usize {
        self.steps_since_refresh
    }

    /// Refreshes first if `K` steps have passed since the last refresh.
    pub(crate) fn step<M: Model>(
        &mut self,
        obj: &Objective<M>,
        w: &VariationalParams,
        batch: &[usize],
        noise: &Noise,
    ) -> Result<GradientVector> {
        if self.steps_since_refresh >= self.k {
            self.refresh(obj, w)?;
        }
        let g = batch_mean(obj.dim(), batch, |slot, n| joint_svrg_datum(obj, w, n, noise.for_slot(slot), self))?;
        self.steps_since_refresh += 1;
        Ok(g)
    }
}

/// μ-part `∇f(w;n,ε) + ḡ − ∇_μ f̃(w̃; n, ε)`, log σ-part naive.
/// Two gradient calls plus one HVP.
pub fn joint_svrg_datum<M: Model>(
    obj: &Objective<M>,
    w: &VariationalParams,
    n: usize,
    eps: &[f64],
    state: &SvrgState,
) -> Result<GradientVector> {
    let mut g = obj.grad_f(w, n, eps)?;
    let s = obj.grad_surrogate_mu(w, &state.snapshot, n, eps)?;
    let mu = g.mu_part_mut();
    axpy(mu, 1.0, &state.snapshot_mean);
    axpy(mu, -1.0, &s);
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::Estimator;
    use crate::models::{LinearGaussianModel, LogisticRegressionModel};
    use crate::rng::RngStream;
    use crate::types::MomentAccumulator;

    fn lg() -> Objective<LinearGaussianModel> {
        let s = RngStream::new(51, 0);
        let x = s.child(0).standard_normal(12 * 3).unwrap();
        let y = s.child(1).standard_normal(12).unwrap();
        Objective::new(LinearGaussianModel::new(x, y, 3, 0.5).unwrap())
    }

    fn logistic() -> Objective<LogisticRegressionModel> {
        let s = RngStream::new(52, 0);
        let x = s.child(0).standard_normal(15 * 3).unwrap();
        let y = (0..15).map(|i| (i % 2) as f64).collect();
        Objective::new(LogisticRegressionModel::new(x, y, 3).unwrap())
    }

    fn params(seed: u64) -> VariationalParams {
        let s = RngStream::new(seed, 3);
        let ls = s.child(1).standard_normal(3).unwrap().iter().map(|v| 0.2 * v - 0.8).collect();
        VariationalParams::new(s.child(0).standard_normal(3).unwrap(), ls).unwrap()
    }

    #[test]
    fn synced_table_on_quadratic_gives_exact_mean() {
        let o = lg();
        let w = params(1);
        let t = ParamTable::synced(&o, &w).unwrap();
        let exact = o.model().exact_gradient(&w);
        let mut acc = MomentAccumulator::new(3);
        for i in 0..200u64 {
            let eps = RngStream::new(2, i).standard_normal(3).unwrap();
            let g = joint_saga_datum(&o, &w, (i % 12) as usize, &eps, &t).unwrap();
            acc.push(g.mu_part());
            for j in 0..3 {
                assert!((g.mu_part()[j] - exact[j]).abs() <= 1e-9 * exact[j].abs().max(1.0));
            }
        }
        assert!(acc.trace_variance() <= 1e-18);
    }

    #[test]
    fn saga_costs_three_per_datum() {
        let o = logistic();
        let w = params(3);
        let mut est = Estimator::JointSaga(JointSaga::new(ParamTable::synced(&o, &params(4)).unwrap()).unwrap());
        let before = o.counter().snapshot();
        est.step(&o, &w, &[2, 9, 11], &Noise::Shared(vec![0.1, 0.3, -0.2])).unwrap();
        let d = o.counter().snapshot().since(before);
        assert_eq!(d.total(), 9);
        assert_eq!(d.hvp, 3);
    }

    #[test]
    fn saga_step_uses_old_table_then_updates() {
        let o = logistic();
        let w = params(5);
        let table = ParamTable::from_entries(&o, (0..15).map(|i| params(100 + i)).collect()).unwrap();
        let eps = vec![0.4, -0.1, 0.9];
        let batch = [0, 7];
        let frozen: Vec<_> = batch
            .iter()
            .map(|&n| joint_saga_datum(&o, &w, n, &eps, &table).unwrap())
            .collect();
        let mut est = Estimator::JointSaga(JointSaga::new(table).unwrap());
        let g = est.step(&o, &w, &batch, &Noise::Shared(eps)).unwrap();
        for j in 0..6 {
            let m = 0.5 * (frozen[0].as_slice()[j] + frozen[1].as_slice()[j]);
            assert!((g.as_slice()[j] - m).abs() <= 1e-12 * m.abs().max(1.0));
        }
        let t = est.table().unwrap();
        assert_eq!(t.entries()[0], w);
        assert_eq!(t.entries()[7], w);
        let fresh = t.recompute_running_mean(&o).unwrap();
        for (a, b) in t.running_mean().unwrap().iter().zip(&fresh) {
            assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
        }
    }

    #[test]
    fn saga_rejects_params_only_table() {
        assert!(JointSaga::new(ParamTable::params_only(vec![params(1); 3])).is_err());
    }

    #[test]
    fn svrg_rejects_zero_k() {
        let o = logistic();
        assert!(SvrgState::new(&o, &params(1), 0).is_err());
    }

    #[test]
    fn svrg_with_k_one_matches_saga_on_synced_anchors() {
        let o = logistic();
        let mut w = params(6);
        let mut saga = Estimator::JointSaga(JointSaga::new(ParamTable::synced(&o, &w).unwrap()).unwrap());
        let mut svrg = Estimator::JointSvrg(SvrgState::new(&o, &w, 1).unwrap());
        for t in 0..5u64 {
            let eps = RngStream::new(7, t).standard_normal(3).unwrap();
            let a = saga.step(&o, &w, &[3], &Noise::Shared(eps.clone())).unwrap();
            let b = svrg.step(&o, &w, &[3], &Noise::Shared(eps)).unwrap();
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
            // resync the SAGA table to the next iterate
            w = params(60 + t);
            saga = Estimator::JointSaga(JointSaga::new(ParamTable::synced(&o, &w).unwrap()).unwrap());
        }
    }

    #[test]
    fn svrg_amortizes_to_four_per_datum() {
        let o = logistic();
        let nn = o.num_data() as u64;
        let w = params(8);
        let before = o.counter().snapshot();
        let mut est = Estimator::JointSvrg(SvrgState::new(&o, &w, nn as usize).unwrap());
        let epochs = 3;
        for t in 0..epochs * nn {
            est.step(&o, &w, &[(t % nn) as usize], &Noise::Shared(vec![0.2, 0.1, -0.3])).unwrap();
        }
        let d = o.counter().snapshot().since(before);
        assert_eq!(d.total(), 4 * epochs * nn);
    }

    #[test]
    fn svrg_refresh_on_quadratic_is_exact() {
        let o = lg();
        let w = params(9);
        let s = SvrgState::new(&o, &w, 5).unwrap();
        let exact = o.model().exact_gradient(&w);
        for i in 0..20u64 {
            let eps = RngStream::new(10, i).standard_normal(3).unwrap();
            let g = joint_svrg_datum(&o, &w, (i % 12) as usize, &eps, &s).unwrap();
            for j in 0..3 {
                assert!((g.mu_part()[j] - exact[j]).abs() <= 1e-9 * exact[j].abs().max(1.0));
            }
        }
    }
}
