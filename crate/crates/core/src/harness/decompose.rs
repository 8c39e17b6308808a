//! Variance table at a frozen point: the three-way decomposition plus the
//! trace-variance of each estimator with its state frozen.
//!
//! Table state comes from the checkpoint when it has one; otherwise the
//! table is synced to the checkpoint's `w` (every entry equal to `w`).

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::diagnostics::{decompose as decompose_variance, estimate_estimator_variance, Estimate, VarianceDecomposition};
use crate::error::{Error, Result};
use crate::estimators::{Estimator, JointSaga, ParamTable, SvrgState};
use crate::objective::Objective;
use crate::rng::RngStream;
use crate::types::VariationalParams;

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::{build_problem, write_atomic, Problem, TaskModel};

#[derive(Debug, Clone)]
pub struct DecompositionReport {
    pub decomposition: VarianceDecomposition,
    /// `(estimator name, trace-variance)` in a fixed order.
    pub estimators: Vec<(String, Estimate)>,
}

impl DecompositionReport {
    pub fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = ["v_joint", "v_joint_se", "v_sub", "v_sub_se", "v_mc", "v_mc_se"]
            .into_iter()
            .map(String::from)
            .collect();
        for (name, _) in &self.estimators {
            h.push(name.clone());
            h.push(format!("{name}_se"));
        }
        h
    }

    pub fn values(&self) -> Vec<f64> {
        let d = &self.decomposition;
        let mut v = vec![d.v_joint.value, d.v_joint.se, d.v_sub.value, d.v_sub.se, d.v_mc.value, d.v_mc.se];
        for (_, e) in &self.estimators {
            v.push(e.value);
            v.push(e.se);
        }
        v
    }

    pub fn estimator(&self, name: &str) -> Option<Estimate> {
        self.estimators.iter().find(|(n, _)| n == name).map(|(_, e)| *e)
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.header().join(",");
        s.push('\n');
        let vals: Vec<String> = self.values().iter().map(|v| format!("{v}")).collect();
        writeln!(s, "{}", vals.join(",")).unwrap();
        s
    }
}

/// Reads the checkpoint, checks it against the configured model, and writes
/// `decompose.csv` into `cfg.out`.
pub fn decompose(cfg: &RunConfig, checkpoint: impl Into<PathBuf>) -> Result<(DecompositionReport, PathBuf)> {
    let ck = Checkpoint::load(checkpoint.into())?;
    let model = match build_problem(cfg)? {
        Problem::Bbvi(m) => m,
        Problem::Glm(_) => return Err(Error::Config("decompose applies to BBVI tasks".into())),
    };
    let report = decompose_at(&model, &ck, cfg)?;
    let path = cfg.out.join("decompose.csv");
    write_atomic(&path, report.to_csv().as_bytes())?;
    Ok((report, path))
}

/// The report at the checkpoint's endpoint. Sample sizes come from
/// `var_samples`, `inner_samples` and `mc_samples`; the stream from `seed`.
pub fn decompose_at(model: &TaskModel, ck: &Checkpoint, cfg: &RunConfig) -> Result<DecompositionReport> {
    let obj = Objective::new(model);
    ck.check_model(obj.num_data(), obj.dim())?;
    let w: &VariationalParams = &ck.w;
    let stream = RngStream::new(cfg.seed, 0).named("decompose");
    let decomposition = decompose_variance(&obj, w, &cfg.diagnostics(), &stream)?;

    let entries = match &ck.table {
        Some(t) => t.entries().to_vec(),
        None => vec![w.clone(); obj.num_data()],
    };
    let saga = match ck.joint_saga() {
        Some(j) => j,
        None => JointSaga::new(ParamTable::from_entries(&obj, entries.clone())?)?,
    };
    let svrg = match &ck.svrg {
        Some(s) => s.clone(),
        None => SvrgState::new(&obj, w, 1)?,
    };
    let estimators = [
        Estimator::Naive,
        Estimator::Cv,
        Estimator::Inc(ParamTable::params_only(entries.clone())),
        Estimator::Ensemble {
            beta: cfg.beta,
            table: ParamTable::params_only(entries),
        },
        Estimator::JointSaga(saga),
        Estimator::JointSvrg(svrg),
    ];
    let s = cfg.var_samples;
    let estimators = estimators
        .iter()
        .map(|e| {
            let name = e.kind().name().to_string();
            let est = estimate_estimator_variance(&obj, w, e, s, &stream.named(&name))?;
            Ok((name, est))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DecompositionReport {
        decomposition,
        estimators,
    })
}
