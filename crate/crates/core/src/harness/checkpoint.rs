//! Text checkpoint of a run's endpoint: the variational parameters, the
//! parameter table and SVRG snapshot when the estimator has them.
//!
//! ```text
//! # dsvi checkpoint v1 d=<d> n=<N>
//! estimator,<name>
//! w,<2d values>
//! entry,<n>,<2d values>       one per datum, when a table exists
//! anchor,<n>,<d values>       one per datum, when the table caches anchors
//! g,<d values>
//! snapshot,<2d values>        SVRG only
//! snapshot_mean,<d values>
//! svrg,<K>,<steps since refresh>
//! ```
//!
//! Floats use the shortest round-trip representation, so a restored
//! checkpoint is bit-identical to the saved state.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::estimators::{Estimator, JointSaga, ParamTable, SvrgState};
use crate::types::VariationalParams;

const MAGIC: &str = "# dsvi checkpoint v1";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub estimator: String,
    pub n_data: usize,
    pub w: VariationalParams,
    pub table: Option<ParamTable>,
    pub svrg: Option<SvrgState>,
}

fn join(values: &[f64]) -> String {
    let mut s = String::new();
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        write!(s, "{v}").expect("write to string");
    }
    s
}

impl Checkpoint {
    pub fn new(estimator: &str, n_data: usize, w: VariationalParams, state: Option<&Estimator>) -> Self {
        let (table, svrg) = match state {
            Some(Estimator::JointSvrg(s)) => (None, Some(s.clone())),
            Some(e) => (e.table().cloned(), None),
            None => (None, None),
        };
        Self {
            estimator: estimator.to_string(),
            n_data,
            w,
            table,
            svrg,
        }
    }

    pub fn dim(&self) -> usize {
        self.w.dim()
    }

    /// The SAGA estimator for this endpoint if the table carries a running
    /// mean.
    pub fn joint_saga(&self) -> Option<JointSaga> {
        self.table.clone().and_then(|t| JointSaga::new(t).ok())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{MAGIC} d={} n={}", self.dim(), self.n_data).unwrap();
        writeln!(s, "estimator,{}", self.estimator).unwrap();
        writeln!(s, "w,{}", join(self.w.as_slice())).unwrap();
        if let Some(t) = &self.table {
            for (n, e) in t.entries().iter().enumerate() {
                writeln!(s, "entry,{n},{}", join(e.as_slice())).unwrap();
            }
            if let (Some(anchors), Some(g)) = (t.anchors(), t.running_mean()) {
                for (n, a) in anchors.iter().enumerate() {
                    writeln!(s, "anchor,{n},{}", join(a)).unwrap();
                }
                writeln!(s, "g,{}", join(g)).unwrap();
            }
        }
        if let Some(sv) = &self.svrg {
            writeln!(s, "snapshot,{}", join(sv.snapshot().as_slice())).unwrap();
            writeln!(s, "snapshot_mean,{}", join(sv.snapshot_mean())).unwrap();
            writeln!(s, "svrg,{},{}", sv.update_frequency(), sv.steps_since_refresh()).unwrap();
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        super::write_atomic(path.as_ref(), self.to_text().as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| perr(1, "", "empty checkpoint"))?;
        let rest = header
            .strip_prefix(MAGIC)
            .ok_or_else(|| perr(1, "", "not a dsvi checkpoint"))?;
        let (mut d, mut n_data) = (None, None);
        for tok in rest.split_whitespace() {
            match tok.split_once('=') {
                Some(("d", v)) => d = v.parse::<usize>().ok(),
                Some(("n", v)) => n_data = v.parse::<usize>().ok(),
                _ => return Err(perr(1, "", &format!("unexpected header token '{tok}'"))),
            }
        }
        let (d, n_data) = match (d, n_data) {
            (Some(d), Some(n)) if d > 0 && n > 0 => (d, n),
            _ => return Err(perr(1, "", "header needs d=<dim> n=<data>")),
        };

        let mut estimator = String::new();
        let mut w = None;
        let mut entries: Vec<Option<VariationalParams>> = vec![None; n_data];
        let mut anchors: Vec<Option<Vec<f64>>> = vec![None; n_data];
        let (mut has_entries, mut has_anchors) = (false, false);
        let mut g = None;
        let (mut snapshot, mut snapshot_mean, mut svrg) = (None, None, None);

        for (i, line) in lines {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let tag = fields.next().unwrap_or("");
            let fields: Vec<&str> = fields.collect();
            let floats = |f: &[&str], want: usize| -> Result<Vec<f64>> {
                if f.len() != want {
                    return Err(perr(line_no, tag, &format!("expected {want} values, got {}", f.len())));
                }
                f.iter()
                    .map(|v| v.parse::<f64>().map_err(|e| perr(line_no, tag, &e.to_string())))
                    .collect()
            };
            let index = |f: &[&str]| -> Result<usize> {
                let n = f
                    .first()
                    .and_then(|v| v.parse::<usize>().ok())
                    .ok_or_else(|| perr(line_no, tag, "missing datum index"))?;
                if n >= n_data {
                    return Err(perr(line_no, tag, &format!("datum index {n} ≥ {n_data}")));
                }
                Ok(n)
            };
            match tag {
                "estimator" => estimator = fields.first().copied().unwrap_or("").to_string(),
                "w" => w = Some(VariationalParams::from_flat(floats(&fields, 2 * d)?)?),
                "entry" => {
                    let n = index(&fields)?;
                    entries[n] = Some(VariationalParams::from_flat(floats(&fields[1..], 2 * d)?)?);
                    has_entries = true;
                }
                "anchor" => {
                    let n = index(&fields)?;
                    anchors[n] = Some(floats(&fields[1..], d)?);
                    has_anchors = true;
                }
                "g" => g = Some(floats(&fields, d)?),
                "snapshot" => snapshot = Some(VariationalParams::from_flat(floats(&fields, 2 * d)?)?),
                "snapshot_mean" => snapshot_mean = Some(floats(&fields, d)?),
                "svrg" => {
                    let v: Vec<usize> = fields
                        .iter()
                        .map(|s| s.parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| perr(line_no, tag, &e.to_string()))?;
                    if v.len() != 2 {
                        return Err(perr(line_no, tag, "expected K and steps since refresh"));
                    }
                    svrg = Some((v[0], v[1]));
                }
                other => return Err(perr(line_no, other, "unknown row tag")),
            }
        }

        let w = w.ok_or_else(|| perr(0, "w", "missing parameter row"))?;
        let table = if has_entries {
            let entries = entries
                .into_iter()
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| perr(0, "entry", "table is missing entries"))?;
            Some(if has_anchors {
                let anchors = anchors
                    .into_iter()
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| perr(0, "anchor", "table is missing anchors"))?;
                let g = g.ok_or_else(|| perr(0, "g", "table is missing its running mean"))?;
                ParamTable::restore(entries, anchors, g)?
            } else {
                ParamTable::params_only(entries)
            })
        } else {
            None
        };
        let svrg = match (snapshot, snapshot_mean, svrg) {
            (Some(s), Some(m), Some((k, steps))) => Some(SvrgState::restore(s, m, k, steps)?),
            (None, None, None) => None,
            _ => return Err(perr(0, "snapshot", "incomplete SVRG state")),
        };
        Ok(Self {
            estimator,
            n_data,
            w,
            table,
            svrg,
        })
    }

    /// Errors unless the checkpoint was taken on a model of this shape.
    pub fn check_model(&self, n_data: usize, dim: usize) -> Result<()> {
        if self.n_data != n_data || self.dim() != dim {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint has N={}, d={}; model has N={n_data}, d={dim}",
                self.n_data,
                self.dim()
            )));
        }
        Ok(())
    }
}

fn perr(line: usize, column: &str, message: &str) -> Error {
    Error::Parse {
        line,
        column: column.to_string(),
        message: message.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::LogisticRegressionModel;
    use crate::objective::Objective;
    use crate::rng::RngStream;

    fn setup() -> (Objective<LogisticRegressionModel>, VariationalParams) {
        let s = RngStream::new(5, 0);
        let x = s.child(0).standard_normal(8 * 3).unwrap();
        let y = (0..8).map(|i| (i % 2) as f64).collect();
        let obj = Objective::new(LogisticRegressionModel::new(x, y, 3).unwrap());
        let w = VariationalParams::new(s.child(1).standard_normal(3).unwrap(), vec![-0.3, 0.1, -1.0 / 3.0]).unwrap();
        (obj, w)
    }

    #[test]
    fn round_trips_saga_table_exactly() {
        let (obj, w) = setup();
        let est = Estimator::JointSaga(JointSaga::new(ParamTable::synced(&obj, &w).unwrap()).unwrap());
        let ck = Checkpoint::new("joint-saga", 8, w.clone(), Some(&est));
        let back = Checkpoint::parse(&ck.to_text()).unwrap();
        assert_eq!(back.w, w);
        assert_eq!(back.table, ck.table);
        assert_eq!(back.to_text(), ck.to_text());
        assert!(back.joint_saga().is_some());
    }

    #[test]
    fn round_trips_svrg_and_plain() {
        let (obj, w) = setup();
        let est = Estimator::JointSvrg(SvrgState::new(&obj, &w, 4).unwrap());
        let ck = Checkpoint::new("joint-svrg", 8, w.clone(), Some(&est));
        let back = Checkpoint::parse(&ck.to_text()).unwrap();
        assert_eq!(back.to_text(), ck.to_text());
        assert_eq!(back.svrg.unwrap().update_frequency(), 4);

        let plain = Checkpoint::new("naive", 8, w, None);
        let back = Checkpoint::parse(&plain.to_text()).unwrap();
        assert!(back.table.is_none() && back.svrg.is_none());
    }

    #[test]
    fn rejects_malformed_and_mismatched() {
        assert!(Checkpoint::parse("hello").is_err());
        assert!(Checkpoint::parse("# dsvi checkpoint v1 d=2 n=3\nw,1,2,3\n").is_err());
        let ck = Checkpoint::parse("# dsvi checkpoint v1 d=1 n=3\nw,0.5,0\n").unwrap();
        assert!(ck.check_model(3, 1).is_ok());
        assert!(matches!(ck.check_model(4, 1), Err(Error::CheckpointMismatch(_))));
        assert!(Checkpoint::parse("# dsvi checkpoint v1 d=1 n=3\nw,0.5,0\nentry,5,1,1\n").is_err());
    }
}
