//! Every method on every task runs a few epochs of a 100-datum instance
//! without producing a non-finite value.

use dsvi::harness::{build_problem, run_cell, RunConfig};

fn cfg(task: &str, method: &str, optimizer: Option<&str>, step: f64) -> RunConfig {
    let mut c = RunConfig::from_text(&format!(
        "task = {task}\nn = 100\ndim = 4\nclasses = 3\nplayers = 6\nglm_outputs = 3\n\
         estimator = {method}\nbatch_size = 10\nepochs = 3\neval_every = 10\nvar_every = 15\n\
         elbo_samples = 20\nvar_samples = 20\ninner_samples = 4\nmc_samples = 10\nstep_size = {step}\n"
    ))
    .unwrap();
    if let Some(o) = optimizer {
        c.set("optimizer", o).unwrap();
    }
    c
}

#[test]
fn every_method_on_every_task_stays_finite() {
    let tasks = ["logistic", "multiclass", "bradley-terry", "linear-gaussian"];
    let estimators = ["naive", "cv", "inc", "ensemble", "joint-saga", "joint-svrg"];
    let mut ran = 0;
    for task in tasks {
        let mut combos: Vec<(&str, Option<&str>, f64)> = Vec::new();
        for e in estimators {
            combos.push((e, Some("sgd"), 1e-4));
            combos.push((e, Some("adam"), 1e-2));
        }
        combos.push(("smiso", None, 1e-4));
        for (method, opt, step) in combos {
            let c = cfg(task, method, opt, step);
            let problem = build_problem(&c).unwrap();
            let cell = run_cell(&problem, &c, step, 1).unwrap();
            assert!(!cell.diverged, "{task} {method} {opt:?} diverged");
            for r in &cell.trace {
                assert!(r.elbo.is_finite(), "{task} {method} {opt:?} t={}", r.iteration);
                for v in [r.v_joint, r.v_sub, r.v_mc].into_iter().flatten() {
                    assert!(v.is_finite());
                }
            }
            assert_eq!(cell.trace.last().unwrap().iteration, 30);
            ran += 1;
        }
    }
    for method in ["naive", "cv", "joint-saga"] {
        for (opt, step) in [("sgd", 1e-3), ("adam", 1e-2)] {
            let c = cfg("glm-dropout", method, Some(opt), step);
            let cell = run_cell(&build_problem(&c).unwrap(), &c, step, 1).unwrap();
            assert!(!cell.diverged && cell.trace.iter().all(|r| r.elbo.is_finite()), "glm {method} {opt}");
            ran += 1;
        }
    }
    assert_eq!(ran, 4 * 13 + 6);
}
