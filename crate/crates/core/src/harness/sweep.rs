//! Step-size sweeps and the retrospective-best curve.
//!
//! The best curve averages each step size's traces over seeds, then takes the
//! pointwise maximum over step sizes. A step size contributes at an
//! iteration only if every seed has a finite ELBO there, so diverged runs
//! drop out from the point of divergence.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::par;

use super::config::RunConfig;
use super::runner::{run_cell, CellResult};
use super::{build_problem, write_atomic};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BestPoint {
    pub iteration: u64,
    pub epoch: f64,
    pub elbo: f64,
    pub step_size: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSummary {
    pub step_size: f64,
    /// Mean over seeds of the final ELBO; NaN if any seed diverged.
    pub mean_final_elbo: f64,
    pub min_final_elbo: f64,
    pub max_final_elbo: f64,
    pub diverged_seeds: usize,
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    /// Ordered by step size (grid order), then seed.
    pub cells: Vec<CellResult>,
    pub summary: Vec<StepSummary>,
    pub best: Vec<BestPoint>,
    pub trace_paths: Vec<PathBuf>,
    pub summary_path: PathBuf,
    pub best_path: PathBuf,
}

pub fn trace_file_name(method: &str, step_size: f64, seed: u64) -> String {
    format!("trace_{method}_lr{step_size}_seed{seed}.csv")
}

/// Runs every (step size, seed) cell and writes one trace per cell,
/// `summary.csv` and `best.csv` into `cfg.out`.
pub fn sweep(cfg: &RunConfig) -> Result<SweepOutput> {
    cfg.validate()?;
    let grid = cfg.resolved_grid()?;
    if grid.is_empty() {
        return Err(Error::Config("sweep needs a non-empty grid".into()));
    }
    let seeds = cfg.resolved_seeds();
    let problem = build_problem(cfg)?;
    let jobs: Vec<(f64, u64)> = grid.iter().flat_map(|&lr| seeds.iter().map(move |&s| (lr, s))).collect();
    let method = cfg.method.name();
    let cells = par::try_map_slice(&jobs, |&(lr, seed)| {
        let cell = run_cell(&problem, cfg, lr, seed)?;
        write_atomic(&cfg.out.join(trace_file_name(method, lr, seed)), &cell.trace_csv()?)?;
        Ok(cell)
    })?;
    let trace_paths = jobs
        .iter()
        .map(|&(lr, s)| cfg.out.join(trace_file_name(method, lr, s)))
        .collect();

    let summary = summarize(&cells, &grid);
    let best = retrospective_best(&cells, &grid);

    let mut s = String::from("step_size,mean_final_elbo,min_final_elbo,max_final_elbo,diverged_seeds\n");
    for r in &summary {
        writeln!(
            s,
            "{},{},{},{},{}",
            r.step_size, r.mean_final_elbo, r.min_final_elbo, r.max_final_elbo, r.diverged_seeds
        )
        .unwrap();
    }
    let summary_path = cfg.out.join("summary.csv");
    write_atomic(&summary_path, s.as_bytes())?;

    let mut b = String::from("iteration,epoch,best_elbo,best_step_size\n");
    for p in &best {
        writeln!(b, "{},{},{},{}", p.iteration, p.epoch, p.elbo, p.step_size).unwrap();
    }
    let best_path = cfg.out.join("best.csv");
    write_atomic(&best_path, b.as_bytes())?;

    Ok(SweepOutput {
        cells,
        summary,
        best,
        trace_paths,
        summary_path,
        best_path,
    })
}

fn same(a: f64, b: f64) -> bool {
    a.to_bits() == b.to_bits()
}

/// Final-ELBO statistics per step size, in grid order.
pub fn summarize(cells: &[CellResult], grid: &[f64]) -> Vec<StepSummary> {
    grid.iter()
        .map(|&lr| {
            let finals: Vec<f64> = cells.iter().filter(|c| same(c.step_size, lr)).map(|c| c.final_elbo()).collect();
            let diverged = finals.iter().filter(|v| !v.is_finite()).count();
            let ok: Vec<f64> = finals.iter().copied().filter(|v| v.is_finite()).collect();
            let mean = if diverged == 0 && !finals.is_empty() {
                finals.iter().sum::<f64>() / finals.len() as f64
            } else {
                f64::NAN
            };
            StepSummary {
                step_size: lr,
                mean_final_elbo: mean,
                min_final_elbo: ok.iter().copied().fold(f64::NAN, f64::min),
                max_final_elbo: ok.iter().copied().fold(f64::NAN, f64::max),
                diverged_seeds: diverged,
            }
        })
        .collect()
}

/// Seed-averaged pointwise maximum over step sizes. Iterations where no step
/// size has a finite average are omitted. Ties go to the earlier grid entry.
pub fn retrospective_best(cells: &[CellResult], grid: &[f64]) -> Vec<BestPoint> {
    // iteration → (epoch, per-step-size (sum, count, all finite))
    let mut points: BTreeMap<u64, (f64, Vec<(f64, usize, bool)>)> = BTreeMap::new();
    for (gi, &lr) in grid.iter().enumerate() {
        let group: Vec<&CellResult> = cells.iter().filter(|c| same(c.step_size, lr)).collect();
        for c in &group {
            for r in c.trace.iter().filter(|r| r.elbo.is_finite()) {
                let e = points
                    .entry(r.iteration)
                    .or_insert_with(|| (r.epoch, vec![(0.0, 0, true); grid.len()]));
                e.1[gi].0 += r.elbo;
                e.1[gi].1 += 1;
            }
        }
        for (_, (_, acc)) in points.iter_mut() {
            if acc[gi].1 != group.len() {
                acc[gi].2 = false;
            }
        }
    }
    points
        .into_iter()
        .filter_map(|(iteration, (epoch, acc))| {
            let mut best: Option<(f64, f64)> = None;
            for (gi, &(sum, count, complete)) in acc.iter().enumerate() {
                if !complete || count == 0 {
                    continue;
                }
                let mean = sum / count as f64;
                if best.is_none_or(|(b, _)| mean > b) {
                    best = Some((mean, grid[gi]));
                }
            }
            best.map(|(elbo, step_size)| BestPoint {
                iteration,
                epoch,
                elbo,
                step_size,
            })
        })
        .collect()
}
