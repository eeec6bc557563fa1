//! Simple isolated eigentriples `(μ0, ψ0, ψ0*)` and their Riesz projections.

use num_complex::Complex64 as c64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gridfn::{weighted_dot, weighted_norm, GridFunction};
use crate::models::DiscretizedProblem;
use crate::sparse::{ShiftedSolver, SparseOperator};
use crate::symmetry::{probe_vectors, SymmetryOp, PROBE_COUNT, PROBE_SEED};

const START_SEED: u64 = 0xe16e;

#[derive(Debug, Clone)]
pub struct EigenTriple {
    pub mu0: c64,
    pub psi0: GridFunction,
    pub psi0_star: GridFunction,
    /// Distance from `mu0` to the nearest other eigenvalue found.
    pub gap: f64,
}

impl EigenTriple {
    /// `‖Aψ0 - μ0ψ0‖` and `‖A*ψ0* - conj(μ0)ψ0*‖`.
    pub fn residuals(&self, a: &SparseOperator) -> Result<(f64, f64)> {
        let r = a.apply(&self.psi0)?.axpy(-self.mu0, &self.psi0).norm();
        let l = a
            .adjoint()
            .apply(&self.psi0_star)?
            .axpy(-self.mu0.conj(), &self.psi0_star)
            .norm();
        Ok((r, l))
    }
}

/// Iteration controls for [`compute_eigentriple_with`].
#[derive(Debug, Clone, Copy)]
pub struct EigenOptions {
    pub max_iterations: usize,
    /// Converged when the eigen-residual is at most `tol * ‖A‖_1`.
    pub tol: f64,
    /// Neighbouring eigenvalues closer than `simple_tol * (1 + |μ0|)` make
    /// `μ0` non-simple.
    pub simple_tol: f64,
}

impl Default for EigenOptions {
    fn default() -> Self {
        EigenOptions {
            max_iterations: 300,
            tol: 1e-11,
            simple_tol: 1e-6,
        }
    }
}

pub fn compute_eigentriple(problem: &DiscretizedProblem, target: c64) -> Result<EigenTriple> {
    compute_eigentriple_with(&problem.operator, target, EigenOptions::default())
}

/// Factors `A - t`, nudging `t` off an exact eigenvalue.
fn shifted_solver(a: &SparseOperator, t: c64) -> Result<(ShiftedSolver, c64)> {
    let mut shift = t;
    for k in 0..4 {
        if let Ok(s) = ShiftedSolver::new(a, shift) {
            let est = s.sigma_min_estimate();
            if est > 1e-13 * s.norm1() {
                return Ok((s, shift));
            }
        }
        let d = 1e-7 * (1.0 + t.norm()) * 10f64.powi(k);
        shift = t + c64::new(0.6 * d, 0.8 * d);
    }
    Err(Error::SingularSystem { pivot: 0.0 })
}

struct Eigenvector {
    mu: c64,
    v: Vec<c64>,
    residual: f64,
}

fn normalize(w: &[f64], v: &mut [c64]) -> f64 {
    let n = weighted_norm(w, v);
    if n > 0.0 && n.is_finite() {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn rayleigh(a: &SparseOperator, w: &[f64], v: &[c64]) -> (c64, f64) {
    let mut av = vec![c64::new(0.0, 0.0); v.len()];
    a.matrix().apply(v, &mut av);
    let mu = weighted_dot(w, &av, v) / weighted_dot(w, v, v).re;
    let r: Vec<c64> = av.iter().zip(v).map(|(p, q)| p - mu * q).collect();
    (mu, weighted_norm(w, &r) / weighted_norm(w, v))
}

/// Inverse iteration at the fixed shift, then Rayleigh-quotient steps.
fn eigenvector(
    a: &SparseOperator,
    solver: &ShiftedSolver,
    start: Vec<c64>,
    opts: EigenOptions,
) -> Result<Eigenvector> {
    let w = a.grid().weights().to_vec();
    let tol = opts.tol * a.norm1();
    let mut v = start;
    normalize(&w, &mut v);
    let (mut mu, mut res) = rayleigh(a, &w, &v);
    let mut it = 0;
    let mut settled = false;
    while it < opts.max_iterations {
        it += 1;
        v = solver.solve_raw(&v);
        if normalize(&w, &mut v) == 0.0 || !v[0].re.is_finite() {
            return Err(Error::NoConvergence { iterations: it, residual: f64::INFINITY });
        }
        let (m, r) = rayleigh(a, &w, &v);
        let change = (m - mu).norm();
        mu = m;
        res = r;
        if change <= 1e-8 * (1.0 + mu.norm()) {
            settled = true;
            break;
        }
    }
    if !settled && res > 1e-3 * (1.0 + mu.norm()) {
        return Err(Error::NoConvergence { iterations: it, residual: res });
    }
    // Rayleigh-quotient refinement; stops once the residual stagnates.
    let mut best = Eigenvector { mu, v: v.clone(), residual: res };
    for _ in 0..4 {
        let Ok((step, _)) = shifted_solver(a, mu) else { break };
        let mut x = step.solve_raw(&v);
        if normalize(&w, &mut x) == 0.0 || !x.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
            break;
        }
        let (m, r) = rayleigh(a, &w, &x);
        if r >= best.residual * 0.5 && best.residual <= tol {
            if r < best.residual {
                best = Eigenvector { mu: m, v: x, residual: r };
            }
            break;
        }
        v = x;
        mu = m;
        if r < best.residual {
            best = Eigenvector { mu, v: v.clone(), residual: r };
        }
    }
    if best.residual > tol {
        return Err(Error::NoConvergence {
            iterations: it,
            residual: best.residual,
        });
    }
    Ok(best)
}

/// Next eigenvalue near `shift` after deflating `v` (unit norm) by the
/// orthogonal projection: the compression of `(A - t)^{-1}` to `v^⊥` has the
/// remaining eigenvalues.
fn deflated_neighbor(a: &SparseOperator, solver: &ShiftedSolver, shift: c64, v: &[c64], opts: EigenOptions) -> c64 {
    let w = a.grid().weights().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(START_SEED ^ 0xdef1);
    let project = |x: &mut Vec<c64>| {
        let c = weighted_dot(&w, x, v);
        x.iter_mut().zip(v).for_each(|(p, q)| *p -= c * q);
    };
    let mut x: Vec<c64> = (0..v.len())
        .map(|_| c64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5))
        .collect();
    project(&mut x);
    normalize(&w, &mut x);
    let mut lambda = c64::new(0.0, 0.0);
    for _ in 0..opts.max_iterations.min(200) {
        let mut y = solver.solve_raw(&x);
        project(&mut y);
        let l = weighted_dot(&w, &y, &x);
        let done = (l - lambda).norm() <= 1e-10 * l.norm();
        lambda = l;
        if normalize(&w, &mut y) == 0.0 {
            break;
        }
        x = y;
        if done {
            break;
        }
    }
    if lambda.norm() == 0.0 {
        return c64::new(f64::INFINITY, 0.0);
    }
    shift + lambda.inv()
}

fn random_start(n: usize, seed: u64) -> Vec<c64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| c64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5))
        .collect()
}

pub fn compute_eigentriple_with(a: &SparseOperator, target: c64, opts: EigenOptions) -> Result<EigenTriple> {
    let n = a.dim();
    let w = a.grid().weights().to_vec();
    let (solver, shift) = shifted_solver(a, target)?;
    let right = eigenvector(a, &solver, random_start(n, START_SEED), opts)?;
    let mu0 = right.mu;

    let neighbor = deflated_neighbor(a, &solver, shift, &right.v, opts);
    let gap = (neighbor - mu0).norm();
    if gap <= opts.simple_tol * (1.0 + mu0.norm()) {
        return Err(Error::NonSimple { mu0, neighbor });
    }

    let adj = a.adjoint();
    let d = 1e-9 * (1.0 + mu0.norm());
    let (adj_solver, _) = shifted_solver(&adj, mu0.conj() + c64::new(0.6 * d, 0.8 * d))?;
    let left = eigenvector(&adj, &adj_solver, random_start(n, START_SEED + 1), opts)?;

    // Deterministic phase: the largest entry of ψ0 is real and positive.
    let mut psi = right.v;
    let imax = psi
        .iter()
        .enumerate()
        .max_by(|x, y| x.1.norm().total_cmp(&y.1.norm()))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let rot = psi[imax].conj() / psi[imax].norm();
    psi.iter_mut().for_each(|z| *z *= rot);
    normalize(&w, &mut psi);

    let overlap = weighted_dot(&w, &psi, &left.v);
    if overlap.norm() < 1e-8 {
        return Err(Error::DefectivePair { overlap: overlap.norm() });
    }
    let scale = overlap.conj().inv();
    let star: Vec<c64> = left.v.iter().map(|z| z * scale).collect();
    Ok(EigenTriple {
        mu0,
        psi0: GridFunction::new(a.grid().clone(), psi)?,
        psi0_star: GridFunction::new(a.grid().clone(), star)?,
        gap,
    })
}

/// Picks the overall sign of a `C`-symmetric vector: positive real part at
/// the phase node (summed with its image), falling back to the node where
/// that sum is largest.
fn fix_sign(op: &SymmetryOp, v: &mut [c64], phase_node: Option<usize>) {
    let perm = op.permutation();
    let pair = |i: usize| v[i].re + v[perm[i]].re;
    let mut node = phase_node.unwrap_or(0);
    let scale = v.iter().fold(0.0f64, |m, z| m.max(z.norm()));
    if phase_node.is_none() || pair(node).abs() <= 1e-6 * scale {
        node = (0..v.len())
            .max_by(|&i, &j| pair(i).abs().total_cmp(&pair(j).abs()))
            .unwrap_or(0);
    }
    if pair(node) < 0.0 {
        v.iter_mut().for_each(|z| *z = -*z);
    }
}

/// `C`-symmetric representative of the eigenvector `ψ0` for real `μ0`.
pub fn symmetrize_eigenvector(
    triple: &EigenTriple,
    op: &SymmetryOp,
    phase_node: Option<usize>,
) -> Result<EigenTriple> {
    let mu = triple.mu0;
    if mu.im.abs() > 1e-9 * (1.0 + mu.norm()) {
        return Err(Error::NonRealEigenvalue { mu });
    }
    if !op.is_antilinear() {
        return Err(Error::InvalidSpec(format!("{} is not antilinear", op.name())));
    }
    let symmetric = |u: &GridFunction| -> Result<GridFunction> {
        let cu = op.apply(u)?;
        let plus = u.add(&cu);
        if plus.norm() >= 1e-8 * u.norm() {
            Ok(plus)
        } else {
            Ok(u.sub(&cu).scale(c64::new(0.0, 1.0)))
        }
    };
    let mut psi = symmetric(&triple.psi0)?;
    let w = psi.grid().weights().to_vec();
    normalize(&w, psi.values_mut());
    fix_sign(op, psi.values_mut(), phase_node);
    let star = symmetric(&triple.psi0_star)?;
    let overlap = psi.inner(&star)?;
    if overlap.norm() < 1e-8 {
        return Err(Error::DefectivePair { overlap: overlap.norm() });
    }
    // The overlap of two C-symmetric vectors is real; divide by its real part
    // to keep ψ0* symmetric.
    let star = star.scale(c64::new(1.0 / overlap.re, 0.0));
    Ok(EigenTriple {
        mu0: c64::new(mu.re, 0.0),
        psi0: psi,
        psi0_star: star,
        gap: triple.gap,
    })
}

/// Eigen-sign `s` with `Sψ0 ≈ sψ0` for a linear symmetry, if `ψ0` has one.
pub fn linear_symmetry_sign(triple: &EigenTriple, op: &SymmetryOp, tol: f64) -> Result<Option<f64>> {
    let s = op.apply(&triple.psi0)?;
    for sign in [1.0, -1.0] {
        if s.axpy(c64::new(-sign, 0.0), &triple.psi0).norm() <= tol * triple.psi0.norm() {
            return Ok(Some(sign));
        }
    }
    Ok(None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    P0,
    Q0,
}

/// The rank-one Riesz projection `P0 = ⟨·, ψ0*⟩ψ0` and its complement.
#[derive(Debug, Clone)]
pub struct SpectralProjector {
    pub triple: EigenTriple,
}

impl SpectralProjector {
    pub fn new(triple: EigenTriple) -> SpectralProjector {
        SpectralProjector { triple }
    }

    /// `⟨u, ψ0*⟩`.
    pub fn coefficient(&self, u: &GridFunction) -> Result<c64> {
        u.inner(&self.triple.psi0_star)
    }

    pub fn project(&self, u: &GridFunction, which: Which) -> Result<GridFunction> {
        let c = self.coefficient(u)?;
        Ok(match which {
            Which::P0 => self.triple.psi0.scale(c),
            Which::Q0 => u.axpy(-c, &self.triple.psi0),
        })
    }

    /// `‖P0‖ = ‖ψ0‖ ‖ψ0*‖`.
    pub fn norm_p0(&self) -> f64 {
        self.triple.psi0.norm() * self.triple.psi0_star.norm()
    }

    /// `‖Q0‖`, exact for a rank-one projection: equal to `‖P0‖` unless `P0 = 0`
    /// or `P0 = I`.
    pub fn norm_q0(&self) -> f64 {
        if self.triple.psi0.len() <= 1 {
            0.0
        } else {
            self.norm_p0()
        }
    }
}

pub fn project(projector: &SpectralProjector, u: &GridFunction, which: Which) -> Result<GridFunction> {
    projector.project(u, which)
}

/// `max_u ‖P0 C u - C P0 u‖ / ‖u‖` over the seeded probes.
pub fn projector_symmetry_residual(projector: &SpectralProjector, op: &SymmetryOp) -> Result<f64> {
    let grid = projector.triple.psi0.grid().clone();
    let mut worst: f64 = 0.0;
    for u in probe_vectors(&grid, PROBE_COUNT, PROBE_SEED) {
        let a = projector.project(&op.apply(&u)?, Which::P0)?;
        let b = op.apply(&projector.project(&u, Which::P0)?)?;
        worst = worst.max(a.sub(&b).norm() / u.norm());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_model, ModelSpec};

    fn toy(n: usize) -> DiscretizedProblem {
        build_model(&ModelSpec::new("toy_robin").param("alpha", 0.5).resolution(n)).unwrap()
    }

    #[test]
    fn toy_ground_state() {
        let p = toy(512);
        let t = compute_eigentriple(&p, c64::new(0.2, 0.0)).unwrap();
        assert!((t.mu0 - 0.25).norm() < 1e-5, "{}", t.mu0);
        assert!((t.gap - 0.75).abs() < 1e-3);
        assert!((t.psi0.norm() - 1.0).abs() < 1e-12);
        assert!((t.psi0.inner(&t.psi0_star).unwrap() - 1.0).norm() < 1e-12);
        let (r, l) = t.residuals(&p.operator).unwrap();
        let tol = 1e-11 * p.operator.norm1();
        assert!(r <= tol && l <= tol * t.psi0_star.norm(), "{r} {l}");
    }

    #[test]
    fn dnls_exact_target_is_nudged() {
        let p = build_model(&ModelSpec::new("dnls").param("N", 1.0).param("gamma", 0.0)).unwrap();
        let t = compute_eigentriple(&p, c64::new(1.0, 0.0)).unwrap();
        assert!((t.mu0 - 1.0).norm() < 1e-13);
        assert!((t.gap - 2.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_eigenvalue_is_not_simple() {
        let p = build_model(&ModelSpec::new("sho6_2d").param("gamma", 0.0).resolution(41)).unwrap();
        let target = c64::new(2.0 * 2f64.sqrt(), 0.0);
        assert!(matches!(compute_eigentriple(&p, target), Err(Error::NonSimple { .. })));
    }

    #[test]
    fn symmetrization_is_phase_independent() {
        let p = toy(256);
        let pt = p.primary_antilinear().unwrap().clone();
        let t = compute_eigentriple(&p, c64::new(0.2, 0.0)).unwrap();
        let mut rotated = t.clone();
        rotated.psi0 = t.psi0.scale(c64::from_polar(1.0, std::f64::consts::FRAC_PI_3));
        rotated.psi0_star = t.psi0_star.scale(c64::from_polar(1.0, std::f64::consts::FRAC_PI_3));
        let mut real = t.clone();
        real.mu0.im = 0.0;
        rotated.mu0.im = 0.0;
        let a = symmetrize_eigenvector(&real, &pt, Some(p.phase_node)).unwrap();
        let b = symmetrize_eigenvector(&rotated, &pt, Some(p.phase_node)).unwrap();
        let d = a.psi0.sub(&b.psi0).norm();
        assert!(d < 1e-10, "{d} {}", a.psi0.add(&b.psi0).norm());
        assert!(pt.apply(&a.psi0).unwrap().sub(&a.psi0).norm() <= 1e-12);
        assert!((a.psi0.inner(&a.psi0_star).unwrap() - 1.0).norm() < 1e-12);
    }

    #[test]
    fn complex_eigenvalue_cannot_be_symmetrized() {
        let p = build_model(&ModelSpec::new("dnls").param("N", 1.0).param("gamma", 1.2)).unwrap();
        let t = compute_eigentriple(&p, c64::new(0.1, 0.6)).unwrap();
        assert!((t.mu0 - c64::new(0.0, 0.44f64.sqrt())).norm() < 1e-12);
        let c = p.primary_antilinear().unwrap();
        assert!(matches!(
            symmetrize_eigenvector(&t, c, None),
            Err(Error::NonRealEigenvalue { .. })
        ));
    }

    #[test]
    fn projections_split_identity() {
        let p = toy(128);
        let t = compute_eigentriple(&p, c64::new(1.1, 0.0)).unwrap();
        let proj = SpectralProjector::new(t.clone());
        for u in probe_vectors(&p.grid, 4, 3) {
            let p0 = proj.project(&u, Which::P0).unwrap();
            let q0 = proj.project(&u, Which::Q0).unwrap();
            assert!(p0.add(&q0).sub(&u).max_abs() <= 1e-15 * u.max_abs().max(1.0));
            let pp = proj.project(&p0, Which::P0).unwrap();
            assert!(pp.sub(&p0).norm() <= 1e-12 * u.norm());
        }
        assert!(proj.project(&t.psi0, Which::Q0).unwrap().norm() < 1e-12);
    }
}
