use std::path::Path;

use nleig::c64;
use nleig::continuation::{
    continue_branch, labeled_points, seed_from_triple, snapshot_name, switch_branch, write_branch_csv, Branch,
    BranchPoint, ContinuationMode, MarkerKind,
};
use nleig::gridfn::GridFunctionJson;
use nleig::ls_solver::{ls_solve, rescale_unit_norm, LSConfig};
use nleig::models::{build_model, DiscretizedProblem};
use nleig::spectra::{compute_eigentriple, symmetrize_eigenvector, EigenTriple};
use nleig::symmetry::best_phase_residual;
use nleig::Error;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::config::{ContinuationBlock, RunConfig};
use crate::report::{num, write_atomic, write_json, CliError};

/// Result of a command that produced output. `partial` holds the first
/// failure when only some of the work succeeded.
#[derive(Debug, Default)]
pub struct Outcome {
    pub partial: Option<CliError>,
}

/// Eigentriple near `target`, made `C`-symmetric when `μ0` is real and the
/// model declares an antilinear symmetry.
fn eigentriple(problem: &DiscretizedProblem, target: c64) -> Result<EigenTriple, Error> {
    let t = compute_eigentriple(problem, target)?;
    match problem.primary_antilinear() {
        Some(op) if t.mu0.im.abs() <= 1e-9 * (1.0 + t.mu0.norm()) => {
            symmetrize_eigenvector(&t, op, Some(problem.phase_node))
        }
        _ => Ok(t),
    }
}

pub fn spectrum(cfg: &RunConfig, out: &Path) -> Result<Outcome, CliError> {
    let problem = build_model(&cfg.model)?;
    let mut csv = String::from("index,re_mu,im_mu,gap");
    for s in &problem.symmetries {
        csv.push_str(&format!(",sym_{}", s.name()));
    }
    csv.push('\n');
    println!("{:>5}  {:>22}  {:>22}  {:>10}", "index", "re mu", "im mu", "gap");
    for (k, target) in cfg.targets.iter().enumerate() {
        let index = k + 1;
        let t = eigentriple(&problem, target.value())?;
        let mut row = vec![index.to_string(), num(t.mu0.re), num(t.mu0.im), num(t.gap)];
        for s in &problem.symmetries {
            row.push(num(best_phase_residual(s, &t.psi0)?));
        }
        csv.push_str(&row.join(","));
        csv.push('\n');
        write_json(&out.join(format!("eigen_{index}.json")), &t.psi0.to_json())?;
        println!("{index:>5}  {:>22.15}  {:>22.15}  {:>10.3e}", t.mu0.re, t.mu0.im, t.gap);
    }
    write_atomic(&out.join("spectrum.csv"), csv.as_bytes())?;
    Ok(Outcome::default())
}

#[derive(Serialize)]
struct RescaledJson {
    eps: f64,
    mu: c64,
    residual: f64,
    #[serde(flatten)]
    psi: GridFunctionJson,
}

pub fn solve(cfg: &RunConfig, seed: Option<u64>, out: &Path) -> Result<Outcome, CliError> {
    let problem = build_model(&cfg.model)?;
    let ls = cfg
        .solver_config(seed)
        .ok_or_else(|| CliError::Config("solve needs a `solver` block".into()))?;
    let triple = eigentriple(&problem, cfg.targets[0].value())?;
    let result = match ls_solve(&problem, &triple, &ls) {
        Ok(r) => r,
        Err(e @ Error::NoContraction { .. }) => {
            let reached = largest_contracting_eps(&problem, &triple, &ls);
            eprintln!("largest eps reached: {reached}");
            return Err(CliError::Annotated {
                error: e,
                extra: json!({ "requested_eps": ls.eps, "largest_eps_reached": reached }),
            });
        }
        Err(e) => return Err(e.into()),
    };
    write_json(&out.join("result.json"), &result.to_json())?;
    println!(
        "eps {}  mu {} {:+}i  residual {:.3e}  outer iterations {}",
        result.eps, result.mu.re, result.mu.im, result.residual, result.diagnostics.outer_iterations
    );
    if cfg.unit_norm {
        let r = rescale_unit_norm(&problem, &result)?;
        write_json(
            &out.join("rescaled.json"),
            &RescaledJson {
                eps: r.eps,
                mu: r.mu,
                residual: r.residual,
                psi: r.psi.to_json(),
            },
        )?;
        println!("rescaled eps {}  residual {:.3e}", r.eps, r.residual);
    }
    Ok(Outcome::default())
}

/// Largest `ε / 2^k` (k ≤ 8) at which the solver still contracts, or 0.
fn largest_contracting_eps(problem: &DiscretizedProblem, triple: &EigenTriple, ls: &LSConfig) -> f64 {
    let mut cfg = *ls;
    for _ in 0..8 {
        cfg.eps *= 0.5;
        if ls_solve(problem, triple, &cfg).is_ok() {
            return cfg.eps;
        }
    }
    0.0
}

/// Branches grown from one target: the primary branch and its children.
struct TargetRun {
    branches: Vec<Branch>,
    failures: Vec<(usize, Error)>,
}

fn seed_point(problem: &DiscretizedProblem, block: &ContinuationBlock, target: c64) -> Result<BranchPoint, Error> {
    let seed = seed_from_triple(problem, &eigentriple(problem, target)?)?;
    if block.parameter == "eps" || block.eps == 0.0 {
        return Ok(seed);
    }
    // Natural steps land exactly on the requested ε.
    let mut cfg = block.config.clone();
    cfg.mode = ContinuationMode::Natural;
    cfg.detect_bifurcations = false;
    let b = continue_branch(problem, &seed, &cfg, "eps", block.eps).map_err(|f| f.error)?;
    b.points.last().cloned().ok_or_else(|| Error::InvalidSpec("empty ε branch".into()))
}

fn run_target(problem: &DiscretizedProblem, block: &ContinuationBlock, id: usize, target: c64) -> TargetRun {
    let mut run = TargetRun {
        branches: Vec::new(),
        failures: Vec::new(),
    };
    let seed = match seed_point(problem, block, target) {
        Ok(s) => s,
        Err(e) => {
            run.failures.push((id, e));
            return run;
        }
    };
    let mut branch = match continue_branch(problem, &seed, &block.config, &block.parameter, block.end) {
        Ok(b) => b,
        Err(f) => {
            run.failures.push((id, f.error));
            f.partial
        }
    };
    branch.branch_id = id;
    if block.switch {
        for (i, mk) in branch.bifurcation_markers.iter().enumerate() {
            if mk.kind != MarkerKind::Bifurcation {
                continue;
            }
            match switch_branch(problem, &branch, mk, &block.config) {
                Ok(child) => run.branches.push(child),
                Err(f) => {
                    let mut partial = f.partial;
                    partial.branch_id = id * 10 + 1 + i;
                    partial.parent_id = Some(id);
                    run.failures.push((partial.branch_id, f.error));
                    if !partial.points.is_empty() {
                        run.branches.push(partial);
                    }
                }
            }
        }
    }
    if !branch.points.is_empty() {
        run.branches.insert(0, branch);
    }
    run
}

fn write_branch_files(branch: &Branch, out: &Path) -> Result<(), CliError> {
    let mut csv = Vec::new();
    write_branch_csv(std::slice::from_ref(branch), &mut csv).map_err(|e| CliError::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    write_atomic(&out.join(format!("branch{}.csv", branch.branch_id)), &csv)?;
    for k in labeled_points(branch) {
        write_json(&out.join(snapshot_name(branch.branch_id, k)), &branch.points[k].to_json())?;
    }
    Ok(())
}

pub fn continuation(cfg: &RunConfig, jobs: usize, out: &Path) -> Result<Outcome, CliError> {
    let block = cfg
        .continuation
        .as_ref()
        .ok_or_else(|| CliError::Config("continue needs a `continuation` block".into()))?;
    let problem = build_model(&cfg.model)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Config(format!("cannot start worker threads: {e}")))?;
    let runs: Vec<Result<TargetRun, CliError>> = pool.install(|| {
        cfg.targets
            .par_iter()
            .enumerate()
            .map(|(k, target)| {
                let run = run_target(&problem, block, k + 1, target.value());
                for b in &run.branches {
                    write_branch_files(b, out)?;
                }
                Ok(run)
            })
            .collect()
    });
    let mut branches = Vec::new();
    let mut failures = Vec::new();
    for run in runs {
        let run = run?;
        branches.extend(run.branches);
        failures.extend(run.failures);
    }
    let mut csv = Vec::new();
    write_branch_csv(&branches, &mut csv).map_err(|e| CliError::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    write_atomic(&out.join("branches.csv"), &csv)?;
    print_summary(&branches, &failures);

    let Some((id, first)) = failures.first().cloned() else {
        return Ok(Outcome::default());
    };
    let failed: Vec<usize> = failures.iter().map(|(i, _)| *i).collect();
    let err = CliError::Annotated {
        error: first,
        extra: json!({ "branch_id": id, "failed_branches": failed }),
    };
    if branches.is_empty() {
        Err(err)
    } else {
        Ok(Outcome { partial: Some(err) })
    }
}

fn print_summary(branches: &[Branch], failures: &[(usize, Error)]) {
    println!(
        "{:>6}  {:>6}  {:>6}  {:>12}  {:>12}  {:>6}  {:>7}  {:>10}  status",
        "branch", "parent", "param", "from", "to", "points", "markers", "max|Im mu|"
    );
    for b in branches {
        let first = b.points.first().map_or(f64::NAN, |p| p.param);
        let last = b.points.last().map_or(f64::NAN, |p| p.param);
        let max_im = b.points.iter().fold(0.0_f64, |m, p| m.max(p.mu.im.abs()));
        let status = failures
            .iter()
            .find(|(i, _)| *i == b.branch_id)
            .map_or("ok".to_string(), |(_, e)| e.code().to_string());
        println!(
            "{:>6}  {:>6}  {:>6}  {:>12.6}  {:>12.6}  {:>6}  {:>7}  {:>10.3e}  {}",
            b.branch_id,
            b.parent_id.map_or("-".to_string(), |p| p.to_string()),
            b.parameter_name,
            first,
            last,
            b.points.len(),
            b.bifurcation_markers.len(),
            max_im,
            status
        );
    }
    for (id, e) in failures {
        if branches.iter().all(|b| b.branch_id != *id) {
            println!("{id:>6}  failed before the first point: {e}");
        }
    }
}
