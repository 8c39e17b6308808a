//! One optimization cell: a fixed step size and seed, run for a fixed budget.
//!
//! Random streams are derived from the seed by name: `schedule` orders the
//! data, `noise` draws each iteration's `ε`, `elbo` is a fixed evaluation
//! stream shared by every evaluation (common random numbers), and
//! `variance` seeds the decomposition at each variance-eval iteration.
//! Evaluations use a detached objective, so oracle columns count only the
//! optimizer's own calls.

use std::path::PathBuf;

use crate::data::MinibatchSchedule;
use crate::diagnostics::{decompose as decompose_variance, evaluate_elbo, DiagnosticsConfig, TraceRecord, VarianceDecomposition};
use crate::dropout_glm::{DropoutGlm, GlmEstimator, GlmTable};
use crate::error::{Error, Result};
use crate::estimators::{Estimator, EstimatorKind, JointSaga, Noise, OracleCounts, SvrgState, TableBuilder};
use crate::objective::Objective;
use crate::optimizers::{smiso_inner_step, Optimizer, Smiso};
use crate::rng::RngStream;
use crate::types::VariationalParams;

use super::checkpoint::Checkpoint;
use super::config::{Method, RunConfig};
use super::{build_problem, write_atomic, Problem, TaskModel};

#[derive(Debug, Clone)]
pub struct CellResult {
    pub step_size: f64,
    pub seed: u64,
    pub trace: Vec<TraceRecord>,
    /// The run stopped early on a non-finite value; its last row has a NaN
    /// ELBO.
    pub diverged: bool,
    /// Endpoint state for BBVI tasks.
    pub checkpoint: Option<Checkpoint>,
}

impl CellResult {
    /// ELBO of the last row; NaN when diverged.
    pub fn final_elbo(&self) -> f64 {
        if self.diverged {
            f64::NAN
        } else {
            self.trace.last().map_or(f64::NAN, |r| r.elbo)
        }
    }

    pub fn trace_csv(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        crate::diagnostics::write_trace(&mut buf, &self.trace)?;
        Ok(buf)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub cell: CellResult,
    pub trace_path: PathBuf,
    pub checkpoint_path: Option<PathBuf>,
}

/// Runs `cfg.step_size` with `cfg.seed` and writes `trace.csv` (and
/// `checkpoint.csv` for BBVI tasks) into `cfg.out`.
pub fn run(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let problem = build_problem(cfg)?;
    let cell = run_cell(&problem, cfg, cfg.step_size, cfg.seed)?;
    let trace_path = cfg.out.join("trace.csv");
    write_atomic(&trace_path, &cell.trace_csv()?)?;
    let checkpoint_path = match &cell.checkpoint {
        Some(ck) => {
            let p = cfg.out.join("checkpoint.csv");
            ck.save(&p)?;
            Some(p)
        }
        None => None,
    };
    Ok(RunOutput {
        cell,
        trace_path,
        checkpoint_path,
    })
}

/// Iteration budget: `iters` if set, else `⌈epochs · batches per epoch⌉`.
pub(crate) fn budget(cfg: &RunConfig, batches_per_epoch: usize) -> u64 {
    cfg.iters
        .unwrap_or_else(|| (cfg.epochs * batches_per_epoch as f64).ceil() as u64)
}

/// Runs one cell. Non-finite values end the cell with `diverged = true`;
/// any other error is returned.
pub fn run_cell(problem: &Problem, cfg: &RunConfig, step_size: f64, seed: u64) -> Result<CellResult> {
    let root = RngStream::new(seed, 0);
    let schedule = MinibatchSchedule::new(problem.num_data(), cfg.batch_size, root.named("schedule"))?;
    let total = budget(cfg, schedule.batches_per_epoch());
    match problem {
        Problem::Bbvi(model) => {
            let stepper = BbviStepper::new(model, cfg, step_size, schedule.batches_per_epoch())?;
            drive(stepper, schedule, cfg, step_size, seed, total, &root)
        }
        Problem::Glm(glm) => {
            let stepper = GlmStepper::new(glm.clone(), cfg, step_size)?;
            drive(stepper, schedule, cfg, step_size, seed, total, &root)
        }
    }
}

trait Stepper {
    fn noise(&self, stream: &RngStream, batch_len: usize, per_datum: bool) -> Result<Noise>;
    /// One optimizer step. `epoch_done` is true when `batch` closed an epoch.
    fn step(&mut self, batch: &[usize], noise: &Noise, epoch_done: bool) -> Result<()>;
    fn elbo(&self, samples: usize, stream: &RngStream) -> Result<f64>;
    fn variance(&self, cfg: &DiagnosticsConfig, stream: &RngStream) -> Result<Option<VarianceDecomposition>>;
    fn counts(&self) -> OracleCounts;
    fn checkpoint(&self) -> Option<Checkpoint>;
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFinite(_))
}

fn drive<S: Stepper>(
    mut s: S,
    mut schedule: MinibatchSchedule,
    cfg: &RunConfig,
    step_size: f64,
    seed: u64,
    total: u64,
    root: &RngStream,
) -> Result<CellResult> {
    let noise_stream = root.named("noise");
    let elbo_stream = root.named("elbo");
    let var_stream = root.named("variance");
    let diag = cfg.diagnostics();
    let mut trace = Vec::new();
    let mut evals = 0u64;

    let row = |s: &S, t: u64, epoch: f64, evals: &mut u64| -> Result<TraceRecord> {
        *evals += 1;
        let elbo = s.elbo(cfg.elbo_samples, &elbo_stream)?;
        let v = if cfg.var_every > 0 && t % cfg.var_every == 0 {
            s.variance(&diag, &var_stream.child(t))?
        } else {
            None
        };
        let c = s.counts();
        Ok(TraceRecord {
            iteration: t,
            epoch,
            elbo,
            v_joint: v.map(|v| v.v_joint.value),
            v_sub: v.map(|v| v.v_sub.value),
            v_mc: v.map(|v| v.v_mc.value),
            grad_calls: c.grad,
            hvp_calls: c.hvp,
            step_size,
            seed,
        })
    };
    let diverged_row = |s: &S, t: u64, epoch: f64| {
        let c = s.counts();
        TraceRecord {
            iteration: t,
            epoch,
            elbo: f64::NAN,
            v_joint: None,
            v_sub: None,
            v_mc: None,
            grad_calls: c.grad,
            hvp_calls: c.hvp,
            step_size,
            seed,
        }
    };

    let mut diverged = false;
    match row(&s, 0, 0.0, &mut evals) {
        Ok(r) if r.elbo.is_finite() => trace.push(r),
        Ok(_) => {
            trace.push(diverged_row(&s, 0, 0.0));
            diverged = true;
        }
        Err(e) if is_divergence(&e) => {
            trace.push(diverged_row(&s, 0, 0.0));
            diverged = true;
        }
        Err(e) => return Err(e),
    }

    let mut t = 0u64;
    while !diverged && t < total {
        let before = schedule.epochs_completed();
        let batch = schedule.next_batch();
        let noise = s.noise(&noise_stream.child(t), batch.len(), cfg.per_datum_noise)?;
        let epoch_done = schedule.epochs_completed() > before;
        t += 1;
        let outcome = s.step(&batch, &noise, epoch_done).and_then(|()| {
            if t % cfg.eval_every == 0 || t == total {
                row(&s, t, schedule.epoch_progress(), &mut evals).map(Some)
            } else {
                Ok(None)
            }
        });
        match outcome {
            Ok(Some(r)) if !r.elbo.is_finite() => diverged = true,
            Ok(Some(r)) => trace.push(r),
            Ok(None) => {}
            Err(e) if is_divergence(&e) => diverged = true,
            Err(e) => return Err(e),
        }
        if diverged {
            log::warn!("step size {step_size}, seed {seed}: non-finite value at iteration {t}");
            trace.push(diverged_row(&s, t, schedule.epoch_progress()));
        }
    }
    log::debug!("step size {step_size}, seed {seed}: {evals} ELBO evaluations, uncounted");
    Ok(CellResult {
        step_size,
        seed,
        trace,
        diverged,
        checkpoint: if diverged { None } else { s.checkpoint() },
    })
}

enum Phase {
    /// A naive epoch that fills the table before the target estimator runs.
    Warmup { builder: TableBuilder, target: EstimatorKind },
    Ready(Estimator),
    Smiso(Smiso),
}

struct BbviStepper<'a> {
    obj: Objective<&'a TaskModel>,
    w: VariationalParams,
    phase: Phase,
    optimizer: Option<Box<dyn Optimizer>>,
    name: &'static str,
}

impl<'a> BbviStepper<'a> {
    fn new(model: &'a TaskModel, cfg: &RunConfig, step_size: f64, batches_per_epoch: usize) -> Result<Self> {
        let obj = Objective::new(model);
        let (n, d) = (obj.num_data(), obj.dim());
        let w = VariationalParams::constant(d, 0.0, cfg.init_log_sigma)?;
        let (phase, optimizer) = match cfg.estimator_kind(batches_per_epoch) {
            None => {
                let gamma = smiso_inner_step(step_size, cfg.smiso_alpha, cfg.batch_size.min(n), n);
                (Phase::Smiso(Smiso::new(&w, n, cfg.smiso_alpha, gamma)?), None)
            }
            Some(kind) => {
                let opt = cfg.optimizer_kind()?.expect("non-smiso method has an optimizer").build(step_size)?;
                let phase = match kind {
                    EstimatorKind::Naive => Phase::Ready(Estimator::Naive),
                    EstimatorKind::Cv => Phase::Ready(Estimator::Cv),
                    EstimatorKind::JointSvrg { k } => Phase::Ready(Estimator::JointSvrg(SvrgState::new(&obj, &w, k)?)),
                    target => Phase::Warmup {
                        builder: TableBuilder::new(n),
                        target,
                    },
                };
                (phase, Some(opt))
            }
        };
        Ok(Self {
            obj,
            w,
            phase,
            optimizer,
            name: cfg.method.name(),
        })
    }
}

impl Stepper for BbviStepper<'_> {
    fn noise(&self, stream: &RngStream, batch_len: usize, per_datum: bool) -> Result<Noise> {
        let d = self.obj.dim();
        Ok(if per_datum {
            Noise::PerDatum((0..batch_len).map(|j| stream.child(j as u64).standard_normal(d)).collect::<Result<_>>()?)
        } else {
            Noise::Shared(stream.standard_normal(d)?)
        })
    }

    fn step(&mut self, batch: &[usize], noise: &Noise, epoch_done: bool) -> Result<()> {
        if let Phase::Smiso(s) = &mut self.phase {
            s.step(&self.obj, batch, noise)?;
            self.w = s.w_bar()?;
            return Ok(());
        }
        let opt = self.optimizer.as_mut().expect("optimizer present outside smiso");
        let g = match &mut self.phase {
            Phase::Warmup { builder, .. } => {
                builder.record(batch, &self.w)?;
                Estimator::Naive.step(&self.obj, &self.w, batch, noise)?
            }
            Phase::Ready(est) => est.step(&self.obj, &self.w, batch, noise)?,
            Phase::Smiso(_) => unreachable!(),
        };
        self.w = opt.step(&self.w, &g)?;
        if epoch_done {
            if let Phase::Warmup { builder, target } = &self.phase {
                let builder = builder.clone();
                let est = match *target {
                    EstimatorKind::Inc => Estimator::Inc(builder.finish_params_only()?),
                    EstimatorKind::Ensemble { beta } => Estimator::Ensemble {
                        beta,
                        table: builder.finish_params_only()?,
                    },
                    EstimatorKind::JointSaga => Estimator::JointSaga(JointSaga::new(builder.finish(&self.obj)?)?),
                    other => unreachable!("{other} has no warmup"),
                };
                self.phase = Phase::Ready(est);
            }
        }
        Ok(())
    }

    fn elbo(&self, samples: usize, stream: &RngStream) -> Result<f64> {
        Ok(evaluate_elbo(&self.obj.detached(), &self.w, samples, stream)?.value)
    }

    fn variance(&self, cfg: &DiagnosticsConfig, stream: &RngStream) -> Result<Option<VarianceDecomposition>> {
        decompose_variance(&self.obj.detached(), &self.w, cfg, stream).map(Some)
    }

    fn counts(&self) -> OracleCounts {
        self.obj.counter().snapshot()
    }

    fn checkpoint(&self) -> Option<Checkpoint> {
        let state = match &self.phase {
            Phase::Ready(e) => Some(e),
            _ => None,
        };
        Some(Checkpoint::new(self.name, self.obj.num_data(), self.w.clone(), state))
    }
}

enum GlmPhase {
    Warmup(Vec<Option<Vec<f64>>>),
    Ready(GlmEstimator),
}

struct GlmStepper {
    glm: DropoutGlm,
    w: Vec<f64>,
    phase: GlmPhase,
    optimizer: Box<dyn Optimizer>,
}

impl GlmStepper {
    fn new(glm: DropoutGlm, cfg: &RunConfig, step_size: f64) -> Result<Self> {
        let phase = match cfg.method {
            Method::Estimator(EstimatorKind::Naive) => GlmPhase::Ready(GlmEstimator::Naive),
            Method::Estimator(EstimatorKind::Cv) => GlmPhase::Ready(GlmEstimator::Cv),
            Method::Estimator(EstimatorKind::JointSaga) => GlmPhase::Warmup(vec![None; glm.num_data()]),
            other => return Err(Error::Config(format!("glm-dropout does not support {}", other.name()))),
        };
        let optimizer = cfg.optimizer_kind()?.expect("glm methods use an optimizer").build(step_size)?;
        Ok(Self {
            w: vec![0.0; glm.param_len()],
            glm,
            phase,
            optimizer,
        })
    }
}

impl Stepper for GlmStepper {
    fn noise(&self, stream: &RngStream, batch_len: usize, per_datum: bool) -> Result<Noise> {
        Ok(if per_datum {
            Noise::PerDatum(
                (0..batch_len)
                    .map(|j| self.glm.draw_noise(&mut stream.child(j as u64).rng()))
                    .collect::<Result<_>>()?,
            )
        } else {
            Noise::Shared(self.glm.draw_noise(&mut stream.rng())?)
        })
    }

    fn step(&mut self, batch: &[usize], noise: &Noise, epoch_done: bool) -> Result<()> {
        let g = match &mut self.phase {
            GlmPhase::Warmup(entries) => {
                for &n in batch {
                    entries[n] = Some(self.w.clone());
                }
                GlmEstimator::Naive.step(&self.glm, &self.w, batch, noise)?
            }
            GlmPhase::Ready(est) => est.step(&self.glm, &self.w, batch, noise)?,
        };
        self.optimizer.update(&mut self.w, &g)?;
        if !self.w.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("GLM weights"));
        }
        if epoch_done {
            if let GlmPhase::Warmup(entries) = &self.phase {
                let entries = entries
                    .iter()
                    .cloned()
                    .collect::<Option<Vec<_>>>()
                    .ok_or(Error::TableNotInitialized)?;
                self.phase = GlmPhase::Ready(GlmEstimator::Joint(GlmTable::from_entries(&self.glm, entries)?));
            }
        }
        Ok(())
    }

    /// Negated expected loss, so larger is better as for the ELBO.
    fn elbo(&self, samples: usize, stream: &RngStream) -> Result<f64> {
        Ok(-self.glm.expected_loss(&self.w, samples, stream)?)
    }

    fn variance(&self, _: &DiagnosticsConfig, _: &RngStream) -> Result<Option<VarianceDecomposition>> {
        Ok(None)
    }

    fn counts(&self) -> OracleCounts {
        self.glm.counter().snapshot()
    }

    fn checkpoint(&self) -> Option<Checkpoint> {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(text: &str) -> RunConfig {
        let mut c = RunConfig::from_text("n = 40\ndim = 3\nbatch_size = 4\nelbo_samples = 8\neval_every = 5\nstep_size = 1e-3\n").unwrap();
        for (k, v) in super::super::config::parse_config_text(text).unwrap() {
            c.set(&k, &v).unwrap();
        }
        c
    }

    fn cell(c: &RunConfig) -> CellResult {
        c.validate().unwrap();
        run_cell(&build_problem(c).unwrap(), c, c.step_size, c.seed).unwrap()
    }

    #[test]
    fn zero_iterations_give_initial_row_only() {
        let r = cell(&cfg("iters = 0"));
        assert_eq!(r.trace.len(), 1);
        assert_eq!(r.trace[0].iteration, 0);
        assert_eq!(r.trace[0].grad_calls, 0);
    }

    #[test]
    fn naive_counts_one_gradient_per_datum() {
        let r = cell(&cfg("iters = 23"));
        let last = r.trace.last().unwrap();
        assert_eq!(last.iteration, 23);
        assert_eq!(last.grad_calls, 23 * 4);
        assert_eq!(last.hvp_calls, 0);
        let its: Vec<u64> = r.trace.iter().map(|r| r.iteration).collect();
        assert_eq!(its, vec![0, 5, 10, 15, 20, 23]);
    }

    #[test]
    fn table_estimators_warm_up_with_a_naive_epoch() {
        // 40 data, |B| = 4: one epoch is 10 iterations.
        let r = cell(&cfg("estimator = joint-saga\niters = 20\neval_every = 10"));
        let at10 = &r.trace[1];
        assert_eq!((at10.grad_calls, at10.hvp_calls), (40 + 40, 0));
        let at20 = &r.trace[2];
        assert_eq!((at20.grad_calls, at20.hvp_calls), (80 + 10 * 4 * 2, 10 * 4));

        let r = cell(&cfg("estimator = joint-svrg\niters = 20\neval_every = 10"));
        // Snapshot at start and after every 10 steps; 3 per datum per step.
        assert_eq!(r.trace[2].grad_calls + r.trace[2].hvp_calls, 40 * 2 + 20 * 4 * 3);
    }

    #[test]
    fn same_seed_same_bytes() {
        let c = cfg("estimator = cv\niters = 12\nvar_every = 6\nvar_samples = 10\ninner_samples = 4\nmc_samples = 4");
        assert_eq!(cell(&c).trace_csv().unwrap(), cell(&c).trace_csv().unwrap());
        assert!(cell(&c).trace[0].v_sub.is_some());
    }

    #[test]
    fn huge_step_diverges_without_error() {
        let r = cell(&cfg("step_size = 1e6\niters = 50"));
        assert!(r.diverged);
        assert!(r.trace.last().unwrap().elbo.is_nan());
        assert!(r.final_elbo().is_nan());
        assert!(r.checkpoint.is_none());
    }

    #[test]
    fn smiso_and_glm_run() {
        let r = cell(&cfg("estimator = smiso\niters = 10"));
        assert!(!r.diverged && r.trace.len() == 3);
        let r = cell(&cfg("task = glm-dropout\nglm_outputs = 3\nestimator = joint-saga\niters = 15\nstep_size = 1e-2"));
        assert!(!r.diverged);
        assert!(r.checkpoint.is_none());
        assert!(r.trace.iter().all(|t| t.elbo.is_finite() && t.elbo <= 0.0));
    }
}
