//! The Lyapunov–Schmidt fixed-point solver.
//!
//! For a simple eigentriple `(μ0, ψ0, ψ0*)` the solution of
//! `(A - μ)ψ = εf(ψ)` is sought as `μ = μ0 + εν + ε²σ`, `ψ = ψ0 + εφ + χ`
//! with `⟨φ, ψ0*⟩ = ⟨χ, ψ0*⟩ = 0`. The scalar `σ` and the correction `χ` are
//! found by nested fixed-point iteration, `χ` in the inner loop.

use num_complex::Complex64 as c64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridfn::{GridFunction, GridFunctionJson};
use crate::models::DiscretizedProblem;
use crate::nonlinearity::{eval_f, lipschitz_estimate, NonlinearitySpec};
use crate::sparse::{BorderedFactor, BorderedSystem};
use crate::spectra::{EigenTriple, SpectralProjector, Which};

const DIAGNOSTIC_SEED: u64 = 0x15_0b;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LSConfig {
    pub eps: f64,
    #[serde(default = "default_tol")]
    pub tol_chi: f64,
    #[serde(default = "default_tol")]
    pub tol_sigma: f64,
    #[serde(default = "default_max")]
    pub max_inner: usize,
    #[serde(default = "default_max")]
    pub max_outer: usize,
    /// Abort when successive differences shrink by less than this factor.
    #[serde(default = "default_guard")]
    pub contraction_guard: f64,
    /// Seed for the sampled diagnostics (Lipschitz and inverse-norm estimates).
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_tol() -> f64 {
    1e-12
}
fn default_max() -> usize {
    500
}
fn default_guard() -> f64 {
    0.95
}
fn default_seed() -> u64 {
    DIAGNOSTIC_SEED
}

impl LSConfig {
    pub fn new(eps: f64) -> LSConfig {
        LSConfig {
            eps,
            tol_chi: default_tol(),
            tol_sigma: default_tol(),
            max_inner: default_max(),
            max_outer: default_max(),
            contraction_guard: default_guard(),
            seed: DIAGNOSTIC_SEED,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.tol_chi > 0.0 && self.tol_sigma > 0.0) {
            return Err(Error::InvalidSpec("tolerances must be positive".into()));
        }
        if self.max_inner < 1 || self.max_outer < 1 {
            return Err(Error::InvalidSpec("iteration limits must be at least 1".into()));
        }
        if !self.eps.is_finite() {
            return Err(Error::InvalidSpec("eps must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ContractionDiagnostics {
    pub r1_bound: f64,
    pub r2_bound: f64,
    pub norm_p0: f64,
    pub norm_q0: f64,
    pub l_estimate: f64,
    /// Estimate of `‖(Q0(A - μ0)Q0)^{-1}‖`.
    pub inverse_norm: f64,
    pub phi_norm: f64,
    pub inner_iterations: usize,
    pub outer_iterations: usize,
    pub final_chi_norm: f64,
    pub final_sigma_abs: f64,
    /// Largest ratio of successive `σ` differences.
    pub sigma_contraction: f64,
}

#[derive(Debug, Clone)]
pub struct LSResult {
    pub eps: f64,
    pub mu: c64,
    pub psi: GridFunction,
    pub nu: c64,
    pub sigma: c64,
    pub phi: GridFunction,
    pub chi: GridFunction,
    pub residual: f64,
    pub constraint_residual: f64,
    pub diagnostics: ContractionDiagnostics,
}

/// JSON form of [`LSResult`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LSResultJson {
    pub eps: f64,
    pub mu: c64,
    pub nu: c64,
    pub sigma: c64,
    pub residual: f64,
    pub constraint_residual: f64,
    pub diagnostics: ContractionDiagnostics,
    pub psi: GridFunctionJson,
    pub phi: GridFunctionJson,
    pub chi: GridFunctionJson,
}

impl LSResult {
    pub fn to_json(&self) -> LSResultJson {
        LSResultJson {
            eps: self.eps,
            mu: self.mu,
            nu: self.nu,
            sigma: self.sigma,
            residual: self.residual,
            constraint_residual: self.constraint_residual,
            diagnostics: self.diagnostics.clone(),
            psi: self.psi.to_json(),
            phi: self.phi.to_json(),
            chi: self.chi.to_json(),
        }
    }
}

/// `ν = -⟨f(ψ0), ψ0*⟩`.
pub fn compute_nu(triple: &EigenTriple, spec: &NonlinearitySpec) -> Result<c64> {
    Ok(-eval_f(spec, &triple.psi0)?.inner(&triple.psi0_star)?)
}

/// Bordered factorization of `A - μ0` with border column `ψ0` and row `ψ0*`;
/// its solutions with zero scalar right-hand side invert `Q0(A - μ0)Q0` on
/// the range of `Q0`.
pub fn reduced_inverse(problem: &DiscretizedProblem, triple: &EigenTriple) -> Result<BorderedFactor> {
    BorderedSystem::new(
        problem.operator.clone(),
        triple.mu0,
        triple.psi0.clone(),
        triple.psi0_star.clone(),
        c64::new(0.0, 0.0),
    )?
    .factor()
}

/// Residual of `(A - μ0)u = rhs` and the bound it must meet. The bound adds
/// the backward-error floor of the sparse solve to the relative target.
fn solve_check(problem: &DiscretizedProblem, mu0: c64, u: &GridFunction, rhs: &GridFunction, rel: f64) -> Result<(f64, f64)> {
    let r = problem.operator.apply(u)?.axpy(-mu0, u).sub(rhs).norm();
    let bound = rel * (1.0 + rhs.norm()) + 1e-13 * (problem.operator.norm1() + mu0.norm()) * u.norm();
    Ok((r, bound))
}

/// `φ` with `(A - μ0)φ = νψ0 + f(ψ0)` and `⟨φ, ψ0*⟩ = 0`.
pub fn solve_phi(
    problem: &DiscretizedProblem,
    triple: &EigenTriple,
    spec: &NonlinearitySpec,
    nu: c64,
) -> Result<GridFunction> {
    let factor = reduced_inverse(problem, triple)?;
    solve_phi_with(problem, triple, spec, nu, &factor)
}

fn solve_phi_with(
    problem: &DiscretizedProblem,
    triple: &EigenTriple,
    spec: &NonlinearitySpec,
    nu: c64,
    factor: &BorderedFactor,
) -> Result<GridFunction> {
    let rhs = eval_f(spec, &triple.psi0)?.axpy(nu, &triple.psi0);
    let (phi, _) = factor.solve(&rhs, c64::new(0.0, 0.0))?;
    let (r, bound) = solve_check(problem, triple.mu0, &phi, &rhs, 1e-10)?;
    if r > bound {
        return Err(Error::InconsistentRhs { residual: r });
    }
    Ok(phi)
}

/// Pieces shared by the inner and outer loops.
struct Context<'a> {
    problem: &'a DiscretizedProblem,
    triple: &'a EigenTriple,
    spec: &'a NonlinearitySpec,
    projector: SpectralProjector,
    factor: BorderedFactor,
    phi: GridFunction,
    nu: c64,
    f0: GridFunction,
}

impl Context<'_> {
    fn psi(&self, eps: f64, chi: &GridFunction) -> GridFunction {
        self.triple.psi0.axpy(c64::new(eps, 0.0), &self.phi).add(chi)
    }

    /// `R(χ) = ε[(ν + εσ)(χ + εφ) + Q0(f(ψ0 + εφ + χ) - f(ψ0))]`.
    fn r_map(&self, eps: f64, sigma: c64, chi: &GridFunction) -> Result<GridFunction> {
        let df = eval_f(self.spec, &self.psi(eps, chi))?.sub(&self.f0);
        let q = self.projector.project(&df, Which::Q0)?;
        let lin = chi.axpy(c64::new(eps, 0.0), &self.phi).scale(self.nu + sigma * eps);
        Ok(lin.add(&q).scale(c64::new(eps, 0.0)))
    }

    fn g_map(&self, eps: f64, sigma: c64, chi: &GridFunction) -> Result<GridFunction> {
        let r = self.r_map(eps, sigma, chi)?;
        let (x, _) = self.factor.solve(&r, c64::new(0.0, 0.0))?;
        // Remove the rounding-level P0 component.
        self.projector.project(&x, Which::Q0)
    }

    /// `S(σ) = -(1/ε)⟨f(ψ) - f(ψ0), ψ0*⟩` at the given `χ`.
    fn s_map(&self, eps: f64, chi: &GridFunction) -> Result<c64> {
        let df = eval_f(self.spec, &self.psi(eps, chi))?.sub(&self.f0);
        Ok(-df.inner(&self.triple.psi0_star)? / eps)
    }

    fn chi_loop(&self, eps: f64, sigma: c64, start: GridFunction, cfg: &LSConfig) -> Result<(GridFunction, usize)> {
        let mut chi = start;
        let mut last_diff = f64::INFINITY;
        for k in 1..=cfg.max_inner {
            let next = self.g_map(eps, sigma, &chi)?;
            let diff = next.sub(&chi).norm();
            let scale = next.norm().max(1.0);
            chi = next;
            if diff <= cfg.tol_chi * scale {
                return Ok((chi, k));
            }
            if diff > 100.0 * cfg.tol_chi * scale && last_diff.is_finite() {
                let ratio = diff / last_diff;
                if ratio > cfg.contraction_guard || !ratio.is_finite() {
                    return Err(Error::NoContraction {
                        loop_name: "chi",
                        ratio,
                        iteration: k,
                    });
                }
            }
            last_diff = diff;
        }
        Err(Error::MaxIterations {
            loop_name: "chi",
            iterations: cfg.max_inner,
        })
    }
}

fn context<'a>(
    problem: &'a DiscretizedProblem,
    triple: &'a EigenTriple,
    spec: &'a NonlinearitySpec,
) -> Result<Context<'a>> {
    let factor = reduced_inverse(problem, triple)?;
    let nu = compute_nu(triple, spec)?;
    let phi = solve_phi_with(problem, triple, spec, nu, &factor)?;
    let f0 = eval_f(spec, &triple.psi0)?;
    Ok(Context {
        problem,
        triple,
        spec,
        projector: SpectralProjector::new(triple.clone()),
        factor,
        phi,
        nu,
        f0,
    })
}

/// Inner loop `χ_{k+1} = G(χ_k)` from `χ_0 = 0` at fixed `σ`.
pub fn chi_fixed_point(
    problem: &DiscretizedProblem,
    triple: &EigenTriple,
    phi: &GridFunction,
    nu: c64,
    sigma: c64,
    cfg: &LSConfig,
) -> Result<(GridFunction, usize)> {
    cfg.validate()?;
    let mut ctx = context(problem, triple, &problem.nonlinearity)?;
    ctx.phi = phi.clone();
    ctx.nu = nu;
    ctx.chi_loop(cfg.eps, sigma, GridFunction::zeros(problem.grid.clone()), cfg)
}

/// Outcome of the outer loop.
#[derive(Debug, Clone)]
pub struct SigmaOutcome {
    pub sigma: c64,
    pub chi: GridFunction,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    /// Successive `|σ_{j+1} - σ_j|`, for contraction diagnostics.
    pub differences: Vec<f64>,
}

fn sigma_loop(ctx: &Context<'_>, cfg: &LSConfig) -> Result<SigmaOutcome> {
    let eps = cfg.eps;
    let zero = GridFunction::zeros(ctx.problem.grid.clone());
    if eps == 0.0 {
        return Ok(SigmaOutcome {
            sigma: c64::new(0.0, 0.0),
            chi: zero,
            outer_iterations: 0,
            inner_iterations: 0,
            differences: Vec::new(),
        });
    }
    let mut sigma = c64::new(0.0, 0.0);
    let mut chi = zero;
    let mut inner_total = 0;
    let mut differences = Vec::new();
    for j in 1..=cfg.max_outer {
        // Warm start: the inner fixed point does not depend on the start.
        let (c, k) = ctx.chi_loop(eps, sigma, chi, cfg)?;
        inner_total += k;
        chi = c;
        let next = ctx.s_map(eps, &chi)?;
        let diff = (next - sigma).norm();
        sigma = next;
        let scale = sigma.norm().max(1.0);
        if diff <= cfg.tol_sigma * scale {
            // One more inner solve so χ matches the final σ.
            let (c, k) = ctx.chi_loop(eps, sigma, chi, cfg)?;
            differences.push(diff);
            return Ok(SigmaOutcome {
                sigma,
                chi: c,
                outer_iterations: j,
                inner_iterations: inner_total + k,
                differences,
            });
        }
        if diff > 100.0 * cfg.tol_sigma * scale {
            if let Some(&last) = differences.last() {
                let ratio = diff / last;
                if ratio > cfg.contraction_guard || !ratio.is_finite() {
                    return Err(Error::NoContraction {
                        loop_name: "sigma",
                        ratio,
                        iteration: j,
                    });
                }
            }
        }
        differences.push(diff);
    }
    Err(Error::MaxIterations {
        loop_name: "sigma",
        iterations: cfg.max_outer,
    })
}

/// Outer loop `σ_{j+1} = S(σ_j)` from `σ_0 = 0`, each step running the inner
/// `χ` loop at the current `σ`.
pub fn sigma_fixed_point(
    problem: &DiscretizedProblem,
    triple: &EigenTriple,
    phi: &GridFunction,
    nu: c64,
    cfg: &LSConfig,
) -> Result<SigmaOutcome> {
    cfg.validate()?;
    let mut ctx = context(problem, triple, &problem.nonlinearity)?;
    ctx.phi = phi.clone();
    ctx.nu = nu;
    sigma_loop(&ctx, cfg)
}

/// `‖(A - μ)ψ - εf(ψ)‖`.
pub fn equation_residual(problem: &DiscretizedProblem, eps: f64, mu: c64, psi: &GridFunction) -> Result<f64> {
    let f = eval_f(&problem.nonlinearity, psi)?;
    Ok(problem
        .operator
        .apply(psi)?
        .axpy(-mu, psi)
        .axpy(c64::new(-eps, 0.0), &f)
        .norm())
}

/// Power-iteration estimate of `‖(Q0(A - μ0)Q0)^{-1}‖` from a seeded start.
fn inverse_norm_estimate(ctx: &Context<'_>, steps: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = ctx.problem.grid.clone();
    let v = (0..grid.len())
        .map(|_| c64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5))
        .collect();
    let mut x = ctx.projector.project(&GridFunction::new(grid, v)?, Which::Q0)?;
    let mut est = 0.0;
    for _ in 0..steps {
        let n = x.norm();
        if n == 0.0 {
            break;
        }
        x = x.scale(c64::new(1.0 / n, 0.0));
        let (y, _) = ctx.factor.solve(&x, c64::new(0.0, 0.0))?;
        x = ctx.projector.project(&y, Which::Q0)?;
        est = x.norm();
    }
    Ok(est)
}

/// Theorem-style solve: `ν`, `φ`, then the nested `σ`/`χ` iteration.
pub fn ls_solve(problem: &DiscretizedProblem, triple: &EigenTriple, cfg: &LSConfig) -> Result<LSResult> {
    cfg.validate()?;
    let spec = &problem.nonlinearity;
    let ctx = context(problem, triple, spec)?;
    let out = sigma_loop(&ctx, cfg)?;
    let eps = cfg.eps;
    let mu = triple.mu0 + ctx.nu * eps + out.sigma * (eps * eps);
    let psi = ctx.psi(eps, &out.chi);
    let residual = equation_residual(problem, eps, mu, &psi)?;
    let constraint_residual = (psi.inner(&triple.psi0_star)? - 1.0).norm();

    let norm_p0 = ctx.projector.norm_p0();
    let norm_q0 = ctx.projector.norm_q0();
    let phi_norm = ctx.phi.norm();
    let chi_norm = out.chi.norm();
    let mut inverse_norm = inverse_norm_estimate(&ctx, 8, cfg.seed)?;
    let r = ctx.r_map(eps, out.sigma, &out.chi)?;
    if r.norm() > 0.0 {
        inverse_norm = inverse_norm.max(chi_norm / r.norm());
    }
    let radius = (eps.abs() * phi_norm + chi_norm).max(1e-3);
    let mut l_estimate = lipschitz_estimate(spec, &triple.psi0, radius, 16, cfg.seed)?;
    let f_psi = eval_f(spec, &psi)?;
    let dpsi = psi.sub(&triple.psi0).norm();
    if dpsi > 0.0 {
        l_estimate = l_estimate.max(f_psi.sub(&ctx.f0).norm() / dpsi);
    }
    if phi_norm > 0.0 {
        let h = 1e-6 / phi_norm;
        let step = eval_f(spec, &triple.psi0.axpy(c64::new(h, 0.0), &ctx.phi))?;
        l_estimate = l_estimate.max(step.sub(&ctx.f0).norm() / (h * phi_norm));
    }
    let sigma_contraction = out
        .differences
        .windows(2)
        .filter(|w| w[0] > 0.0)
        .map(|w| w[1] / w[0])
        .fold(0.0, f64::max);
    let diagnostics = ContractionDiagnostics {
        r1_bound: norm_p0 * l_estimate * phi_norm,
        r2_bound: inverse_norm * (ctx.nu.norm() + norm_q0 * l_estimate) * phi_norm,
        norm_p0,
        norm_q0,
        l_estimate,
        inverse_norm,
        phi_norm,
        inner_iterations: out.inner_iterations,
        outer_iterations: out.outer_iterations,
        final_chi_norm: chi_norm,
        final_sigma_abs: out.sigma.norm(),
        sigma_contraction,
    };
    let bound = 10.0 * cfg.tol_chi * (1.0 + problem.operator.norm1());
    if residual > bound || !residual.is_finite() {
        return Err(Error::ResidualCheckFailed { residual, bound });
    }
    Ok(LSResult {
        eps,
        mu,
        psi,
        nu: ctx.nu,
        sigma: out.sigma,
        phi: ctx.phi.clone(),
        chi: out.chi,
        residual,
        constraint_residual,
        diagnostics,
    })
}

/// Unit-norm rescaling of a solution of a homogeneous problem.
#[derive(Debug, Clone)]
pub struct Rescaled {
    pub eps: f64,
    pub mu: c64,
    pub psi: GridFunction,
    pub residual: f64,
}

/// `ψ̃ = ψ/‖ψ‖`, `μ̃ = μ`, `ε̃ = ε‖ψ‖^{q-1}`.
pub fn rescale_unit_norm(problem: &DiscretizedProblem, result: &LSResult) -> Result<Rescaled> {
    let q = problem
        .nonlinearity
        .homogeneity_degree()
        .ok_or(Error::NotHomogeneous)?;
    let n = result.psi.norm();
    let psi = result.psi.scale(c64::new(1.0 / n, 0.0));
    let eps = result.eps * n.powf(q - 1.0);
    let residual = equation_residual(problem, eps, result.mu, &psi)?;
    let bound = 1e-9 * (1.0 + problem.operator.norm1());
    if residual > bound {
        return Err(Error::ResidualCheckFailed { residual, bound });
    }
    Ok(Rescaled {
        eps,
        mu: result.mu,
        psi,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_model, toy_exact_nonlinear_pair, ModelSpec};
    use crate::spectra::{compute_eigentriple, symmetrize_eigenvector};

    fn toy_triple(n: usize, target: f64) -> (DiscretizedProblem, EigenTriple) {
        let p = build_model(&ModelSpec::new("toy_robin").param("alpha", 0.5).resolution(n)).unwrap();
        let t = compute_eigentriple(&p, c64::new(target, 0.0)).unwrap();
        let c = p.primary_antilinear().unwrap().clone();
        let t = symmetrize_eigenvector(&t, &c, Some(p.phase_node)).unwrap();
        (p, t)
    }

    #[test]
    fn zero_eps_returns_the_eigenpair() {
        let (p, t) = toy_triple(256, 0.2);
        let r = ls_solve(&p, &t, &LSConfig::new(0.0)).unwrap();
        assert_eq!(r.mu, t.mu0);
        assert_eq!(r.psi.values(), t.psi0.values());
    }

    #[test]
    fn toy_ground_state_has_trivial_corrections() {
        let (p, t) = toy_triple(512, 0.2);
        let r = ls_solve(&p, &t, &LSConfig::new(0.1)).unwrap();
        assert!(r.phi.norm() < 1e-9, "{}", r.phi.norm());
        assert!(r.chi.norm() < 1e-9);
        assert!(r.sigma.norm() < 1e-9);
        let (mu, _) = toy_exact_nonlinear_pair(0.5, 0.1).unwrap();
        assert!((r.mu.re - mu).abs() < 1e-4);
    }

    #[test]
    fn perturbed_nu_is_inconsistent() {
        let (p, t) = toy_triple(256, 1.1);
        let nu = compute_nu(&t, &p.nonlinearity).unwrap();
        let err = solve_phi(&p, &t, &p.nonlinearity, nu + 0.1).unwrap_err();
        assert!(matches!(err, Error::InconsistentRhs { .. }));
    }

    #[test]
    fn corrections_live_in_the_complement() {
        let (p, t) = toy_triple(256, 1.1);
        let r = ls_solve(&p, &t, &LSConfig::new(0.05)).unwrap();
        assert!(r.phi.inner(&t.psi0_star).unwrap().norm() <= 1e-11);
        assert!(r.chi.inner(&t.psi0_star).unwrap().norm() <= 1e-11);
        assert!(r.constraint_residual <= 1e-11);
        let d = &r.diagnostics;
        assert!(d.final_sigma_abs <= d.r1_bound * 1.5 + 1e-12, "{d:?}");
        assert!(d.final_chi_norm <= d.r2_bound * 0.05f64.powi(2) * 1.5 + 1e-12, "{d:?}");
    }

    #[test]
    fn large_eps_trips_the_guard() {
        let (p, t) = toy_triple(256, 1.1);
        let err = ls_solve(&p, &t, &LSConfig::new(40.0)).unwrap_err();
        assert!(
            matches!(err, Error::NoContraction { .. } | Error::MaxIterations { .. }),
            "{err:?}"
        );
    }

    #[test]
    fn rescaling_a_doubled_solution() {
        let (p, t) = toy_triple(256, 1.1);
        let r = ls_solve(&p, &t, &LSConfig::new(0.05)).unwrap();
        let mut doubled = r.clone();
        doubled.psi = r.psi.scale(c64::new(2.0 / r.psi.norm(), 0.0));
        doubled.eps = r.eps * r.psi.norm().powi(2) / 4.0;
        let s = rescale_unit_norm(&p, &doubled).unwrap();
        assert!((s.eps - 4.0 * doubled.eps).abs() <= 1e-14 * s.eps.abs());
        assert!((s.psi.norm() - 1.0).abs() < 1e-14);
    }
}
