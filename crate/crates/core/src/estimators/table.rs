use crate::data::MinibatchSchedule;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::objective::Objective;
use crate::optimizers::Optimizer;
use crate::par;
use crate::types::VariationalParams;

use super::{Estimator, Noise};

/// Per-datum parameter snapshots `w¹ … w^N`, optionally with the surrogate
/// running mean `G = (1/N) Σ_n E_ε ∇_μ f̃(w^n; n, ε)`.
///
/// When the running mean is tracked, `anchors[n]` holds
/// `E_ε ∇_μ f̃(w^n; n, ε) = −∇k_n(μ^n)` so that every entry replacement
/// costs one gradient call.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTable {
    entries: Vec<VariationalParams>,
    surrogate: Option<SurrogateMean>,
}

#[derive(Debug, Clone, PartialEq)]
struct SurrogateMean {
    anchors: Vec<Vec<f64>>,
    g: Vec<f64>,
}

impl ParamTable {
    /// A table without a running mean, as used by `inc`.
    pub fn params_only(entries: Vec<VariationalParams>) -> Self {
        Self {
            entries,
            surrogate: None,
        }
    }

    /// Builds the table and its running mean with one full pass
    /// (`N` gradient calls).
    pub fn from_entries<M: Model>(obj: &Objective<M>, entries: Vec<VariationalParams>) -> Result<Self> {
        check_len(obj, entries.len())?;
        for e in &entries {
            if e.dim() != obj.dim() {
                return Err(Error::DimensionMismatch {
                    expected: obj.dim(),
                    got: e.dim(),
                });
            }
        }
        let anchors = par::try_map_range(entries.len(), |n| obj.expect_grad_surrogate_mu(&entries[n], &entries[n], n))?;
        let g = mean_of(&anchors, obj.dim());
        Ok(Self {
            entries,
            surrogate: Some(SurrogateMean { anchors, g }),
        })
    }

    /// Every entry equal to `w`.
    pub fn synced<M: Model>(obj: &Objective<M>, w: &VariationalParams) -> Result<Self> {
        Self::from_entries(obj, vec![w.clone(); obj.num_data()])
    }

    /// Reassembles a saved table. Shapes are checked; values are trusted.
    pub fn restore(entries: Vec<VariationalParams>, anchors: Vec<Vec<f64>>, g: Vec<f64>) -> Result<Self> {
        let d = g.len();
        if anchors.len() != entries.len() {
            return Err(Error::CheckpointMismatch(format!(
                "{} entries but {} anchors",
                entries.len(),
                anchors.len()
            )));
        }
        if entries.iter().any(|e| e.dim() != d) || anchors.iter().any(|a| a.len() != d) {
            return Err(Error::CheckpointMismatch("inconsistent table dimensions".into()));
        }
        Ok(Self {
            entries,
            surrogate: Some(SurrogateMean { anchors, g }),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[VariationalParams] {
        &self.entries
    }

    /// `G`, or `None` for a parameters-only table.
    pub fn running_mean(&self) -> Option<&[f64]> {
        self.surrogate.as_ref().map(|s| s.g.as_slice())
    }

    /// Cached `−∇k_n(μ^n)`.
    pub fn anchor_expectation(&self, n: usize) -> Option<&[f64]> {
        self.surrogate.as_ref().map(|s| s.anchors[n].as_slice())
    }

    pub fn has_running_mean(&self) -> bool {
        self.surrogate.is_some()
    }

    /// `G` recomputed from the stored entries (`N` gradient calls).
    pub fn recompute_running_mean<M: Model>(&self, obj: &Objective<M>) -> Result<Vec<f64>> {
        check_len(obj, self.entries.len())?;
        let anchors = par::try_map_range(self.entries.len(), |n| {
            obj.expect_grad_surrogate_mu(&self.entries[n], &self.entries[n], n)
        })?;
        Ok(mean_of(&anchors, obj.dim()))
    }

    /// Replaces `w^n ← w` for every `n` in `batch` and refreshes `G`
    /// incrementally: one gradient call per index.
    pub fn update<M: Model>(&mut self, obj: &Objective<M>, batch: &[usize], w: &VariationalParams) -> Result<()> {
        let nn = self.entries.len();
        let s = self.surrogate.as_mut().ok_or(Error::TableNotInitialized)?;
        let fresh = par::try_map_slice(batch, |&n| obj.expect_grad_surrogate_mu(w, w, n))?;
        let inv = 1.0 / nn as f64;
        for (&n, new) in batch.iter().zip(fresh) {
            for ((g, a), b) in s.g.iter_mut().zip(&s.anchors[n]).zip(&new) {
                *g += inv * (b - a);
            }
            s.anchors[n] = new;
            self.entries[n] = w.clone();
        }
        Ok(())
    }

    /// Replaces entries without maintaining `G`; drops any running mean.
    pub(crate) fn record_params(&mut self, batch: &[usize], w: &VariationalParams) {
        self.surrogate = None;
        for &n in batch {
            self.entries[n] = w.clone();
        }
    }

    pub(crate) fn anchors(&self) -> Option<&[Vec<f64>]> {
        self.surrogate.as_ref().map(|s| s.anchors.as_slice())
    }
}

fn check_len<M: Model>(obj: &Objective<M>, len: usize) -> Result<()> {
    if len != obj.num_data() || len == 0 {
        return Err(Error::DimensionMismatch {
            expected: obj.num_data(),
            got: len,
        });
    }
    Ok(())
}

fn mean_of(rows: &[Vec<f64>], d: usize) -> Vec<f64> {
    let mut m = par::pairwise_sum(rows, d);
    let inv = 1.0 / rows.len() as f64;
    m.iter_mut().for_each(|v| *v *= inv);
    m
}

/// Collects table entries while a naive epoch runs.
#[derive(Debug, Clone)]
pub struct TableBuilder {
    entries: Vec<Option<VariationalParams>>,
}

impl TableBuilder {
    pub fn new(n_data: usize) -> Self {
        Self {
            entries: vec![None; n_data],
        }
    }

    /// Records `w` for every index in `batch`; an index may be recorded once.
    pub fn record(&mut self, batch: &[usize], w: &VariationalParams) -> Result<()> {
        let len = self.entries.len();
        for &n in batch {
            let slot = self
                .entries
                .get_mut(n)
                .ok_or(Error::IndexOutOfRange { index: n, len })?;
            if slot.is_some() {
                return Err(Error::DuplicateIndex(n));
            }
            *slot = Some(w.clone());
        }
        Ok(())
    }

    pub fn is_complete(&self) -> bool {
        self.entries.iter().all(Option::is_some)
    }

    fn take(self) -> Result<Vec<VariationalParams>> {
        self.entries
            .into_iter()
            .collect::<Option<Vec<_>>>()
            .ok_or(Error::TableNotInitialized)
    }

    /// Table with running mean (one full pass).
    pub fn finish<M: Model>(self, obj: &Objective<M>) -> Result<ParamTable> {
        ParamTable::from_entries(obj, self.take()?)
    }

    pub fn finish_params_only(self) -> Result<ParamTable> {
        Ok(ParamTable::params_only(self.take()?))
    }
}

/// Runs one epoch of naive optimization from `w0`, recording each datum's
/// pre-step parameters, then computes `G`. Returns the table and the
/// parameters after the epoch.
pub fn init_table<M, O, F>(
    obj: &Objective<M>,
    w0: &VariationalParams,
    optimizer: &mut O,
    schedule: &mut MinibatchSchedule,
    mut noise: F,
) -> Result<(ParamTable, VariationalParams)>
where
    M: Model,
    O: Optimizer + ?Sized,
    F: FnMut(usize) -> Result<Noise>,
{
    let mut builder = TableBuilder::new(obj.num_data());
    let mut w = w0.clone();
    let start = schedule.epochs_completed();
    let mut naive = Estimator::Naive;
    while schedule.epochs_completed() == start {
        let batch = schedule.next_batch();
        builder.record(&batch, &w)?;
        let g = naive.step(obj, &w, &batch, &noise(batch.len())?)?;
        w = optimizer.step(&w, &g)?;
    }
    Ok((builder.finish(obj)?, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::LogisticRegressionModel;
    use crate::optimizers::Sgd;
    use crate::rng::RngStream;

    fn obj(n: usize, d: usize) -> Objective<LogisticRegressionModel> {
        let s = RngStream::new(41, 0);
        let x = s.child(0).standard_normal(n * d).unwrap();
        let y = (0..n).map(|i| (i % 3 == 1) as u8 as f64).collect();
        Objective::new(LogisticRegressionModel::new(x, y, d).unwrap())
    }

    fn params(d: usize, seed: u64) -> VariationalParams {
        let s = RngStream::new(seed, 2);
        let ls = s.child(1).standard_normal(d).unwrap().iter().map(|v| 0.3 * v - 0.5).collect();
        VariationalParams::new(s.child(0).standard_normal(d).unwrap(), ls).unwrap()
    }

    #[test]
    fn update_tracks_recomputation() {
        let o = obj(30, 4);
        let mut t = ParamTable::synced(&o, &params(4, 1)).unwrap();
        let mut rng = RngStream::new(3, 0).rng();
        for step in 0..300u64 {
            let mut idx: Vec<usize> = (0..30).collect();
            rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
            let b = 1 + (step as usize % 5);
            t.update(&o, &idx[..b], &params(4, 100 + step)).unwrap();
        }
        let fresh = t.recompute_running_mean(&o).unwrap();
        let g = t.running_mean().unwrap();
        let num: f64 = g.iter().zip(&fresh).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den: f64 = fresh.iter().map(|b| b * b).sum::<f64>().sqrt();
        assert!(num <= 1e-10 * den);
    }

    #[test]
    fn update_costs_one_gradient_per_index() {
        let o = obj(10, 3);
        let mut t = ParamTable::synced(&o, &params(3, 2)).unwrap();
        let before = o.counter().snapshot();
        t.update(&o, &[1, 4, 7], &params(3, 3)).unwrap();
        let d = o.counter().snapshot().since(before);
        assert_eq!((d.grad, d.hvp), (3, 0));
    }

    #[test]
    fn params_only_table_rejects_update() {
        let o = obj(5, 2);
        let mut t = ParamTable::params_only(vec![params(2, 4); 5]);
        assert!(matches!(t.update(&o, &[0], &params(2, 5)), Err(Error::TableNotInitialized)));
    }

    #[test]
    fn builder_requires_full_coverage() {
        let mut b = TableBuilder::new(3);
        b.record(&[0, 2], &params(2, 6)).unwrap();
        assert!(!b.is_complete());
        assert!(b.record(&[2], &params(2, 6)).is_err());
        assert!(b.finish_params_only().is_err());
    }

    #[test]
    fn init_assigns_every_entry_once_and_zero_step_keeps_w0() {
        let o = obj(23, 3);
        let w0 = params(3, 7);
        let mut sched = MinibatchSchedule::new(23, 5, RngStream::new(8, 0)).unwrap();
        let noise_rng = RngStream::new(9, 0);
        let mut i = 0;
        let (t, w) = init_table(&o, &w0, &mut Sgd::new(0.0).unwrap(), &mut sched, |_| {
            i += 1;
            Ok(Noise::Shared(noise_rng.child(i).standard_normal(3)?))
        })
        .unwrap();
        assert_eq!(sched.epochs_completed(), 1);
        assert_eq!(w, w0);
        assert!(t.entries().iter().all(|e| *e == w0));
        assert_eq!(t.running_mean().unwrap(), t.recompute_running_mean(&o).unwrap().as_slice());
    }

    #[test]
    fn init_records_pre_step_parameters() {
        let o = obj(6, 2);
        let w0 = params(2, 10);
        let mut sched = MinibatchSchedule::new(6, 2, RngStream::new(11, 0)).unwrap();
        let (t, _) = init_table(&o, &w0, &mut Sgd::new(1e-3).unwrap(), &mut sched, |_| {
            Ok(Noise::Shared(vec![0.5, -0.5]))
        })
        .unwrap();
        let distinct: std::collections::HashSet<String> =
            t.entries().iter().map(|e| format!("{:?}", e.as_slice())).collect();
        assert_eq!(distinct.len(), 3);
        assert!(t.entries().contains(&w0));
    }
}
