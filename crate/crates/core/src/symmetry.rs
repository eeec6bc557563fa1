//! Reflection symmetries, with or without complex conjugation.

use std::sync::Arc;

use num_complex::Complex64 as c64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{Grid, Layout};
use crate::gridfn::GridFunction;
use crate::nonlinearity::{eval_f, NonlinearitySpec};
use crate::sparse::SparseOperator;

/// Seed of the probe vectors used by the residual functions.
pub const PROBE_SEED: u64 = 0x0c0de;
/// Number of probe vectors used by the residual functions.
pub const PROBE_COUNT: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct SymmetryOp {
    name: String,
    permutation: Arc<Vec<usize>>,
    conjugate: bool,
    /// Expected eigen-sign of a linear symmetry, when classified.
    pub expected_sign: Option<i8>,
}

impl SymmetryOp {
    pub fn new(name: impl Into<String>, permutation: Vec<usize>, conjugate: bool) -> Result<SymmetryOp> {
        let n = permutation.len();
        for (i, &j) in permutation.iter().enumerate() {
            if j >= n || permutation[j] != i {
                return Err(Error::NonSymmetricGrid(format!(
                    "node map is not an involution at node {i}"
                )));
            }
        }
        Ok(SymmetryOp {
            name: name.into(),
            permutation: Arc::new(permutation),
            conjugate,
            expected_sign: None,
        })
    }

    /// Builds a named symmetry from the grid's reflection maps. Names ending
    /// in `T` (and `lattice-PT`) include complex conjugation.
    pub fn from_grid(grid: &Grid, name: &str) -> Result<SymmetryOp> {
        let (map, conjugate) = match name {
            "PT" | "lattice-PT" => ("P", true),
            "P1T" => ("P1", true),
            "P2T" => ("P2", true),
            "P" | "P1" | "P2" => (name, false),
            _ => return Err(Error::InvalidSpec(format!("unknown symmetry `{name}`"))),
        };
        let perm = grid.reflection(map).ok_or_else(|| {
            Error::NonSymmetricGrid(format!("grid is not closed under the reflection {map}"))
        })?;
        SymmetryOp::new(name, perm.to_vec(), conjugate)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn is_antilinear(&self) -> bool {
        self.conjugate
    }

    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    pub fn apply_slice(&self, u: &[c64]) -> Vec<c64> {
        self.permutation
            .iter()
            .map(|&j| if self.conjugate { u[j].conj() } else { u[j] })
            .collect()
    }

    pub fn apply(&self, u: &GridFunction) -> Result<GridFunction> {
        if u.len() != self.permutation.len() {
            return Err(Error::DimensionMismatch {
                expected: self.permutation.len(),
                found: u.len(),
            });
        }
        Ok(u.with_values(self.apply_slice(u.values())))
    }
}

pub fn apply_symmetry(op: &SymmetryOp, u: &GridFunction) -> Result<GridFunction> {
    op.apply(u)
}

/// Seeded probe vectors. On spatial grids the random field is tapered by a
/// centred Gaussian whose width is a third of the half-width, so residuals weight the
/// region where the models put their structure rather than the far field.
pub fn probe_vectors(grid: &Arc<Grid>, count: usize, seed: u64) -> Vec<GridFunction> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tapered = grid.layout() != Layout::Lattice;
    let width = if grid.dim() == 1 { grid.measure() / 6.0 } else { grid.measure().sqrt() / 6.0 };
    let envelope: Vec<f64> = grid
        .nodes()
        .map(|x| {
            if tapered {
                let r2: f64 = x.iter().map(|v| v * v).sum();
                (-0.5 * r2 / (width * width)).exp()
            } else {
                1.0
            }
        })
        .collect();
    (0..count)
        .map(|_| {
            let v = envelope
                .iter()
                .map(|&e| c64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5) * e)
                .collect();
            GridFunction::new(grid.clone(), v).expect("length matches grid")
        })
        .collect()
}

/// `max_u ‖A(op u) - op(A u)‖ / (‖u‖ ‖A‖_1)` over the seeded probes.
pub fn operator_commutation_residual(op: &SymmetryOp, a: &SparseOperator) -> Result<f64> {
    let scale = a.norm1().max(f64::MIN_POSITIVE);
    let mut worst: f64 = 0.0;
    for u in probe_vectors(a.grid(), PROBE_COUNT, PROBE_SEED) {
        let lhs = a.apply(&op.apply(&u)?)?;
        let rhs = op.apply(&a.apply(&u)?)?;
        worst = worst.max(lhs.sub(&rhs).norm() / u.norm());
    }
    Ok(worst / scale)
}

/// `max_ψ ‖op f(ψ) - f(op ψ)‖ / (1 + ‖f(ψ)‖)` over `probes` seeded probes,
/// each scaled to norm 10 so the nonlinear part dominates the `1 +`.
pub fn nonlinearity_equivariance_residual(
    op: &SymmetryOp,
    spec: &NonlinearitySpec,
    grid: &Arc<Grid>,
    probes: usize,
    seed: u64,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for psi in probe_vectors(grid, probes, seed) {
        let psi = psi.scale(c64::new(10.0 / psi.norm(), 0.0));
        let f = eval_f(spec, &psi)?;
        let lhs = op.apply(&f)?;
        let rhs = eval_f(spec, &op.apply(&psi)?)?;
        worst = worst.max(lhs.sub(&rhs).norm() / (1.0 + f.norm()));
    }
    Ok(worst)
}

/// `‖op ψ - sign ψ‖ / ‖ψ‖`.
pub fn solution_symmetry_residual(op: &SymmetryOp, psi: &GridFunction, sign: f64) -> Result<f64> {
    let image = op.apply(psi)?;
    let n = psi.norm();
    let d = image.axpy(c64::new(-sign, 0.0), psi).norm();
    Ok(if n > 0.0 { d / n } else { d })
}

/// Symmetry residual that ignores the gauge: for antilinear `op` the
/// minimum over phases `θ` of `‖op ψ - e^{iθ} ψ‖ / ‖ψ‖`, for linear `op` the
/// smaller of the two sign residuals.
pub fn best_phase_residual(op: &SymmetryOp, psi: &GridFunction) -> Result<f64> {
    if !op.is_antilinear() {
        return Ok(solution_symmetry_residual(op, psi, 1.0)?.min(solution_symmetry_residual(op, psi, -1.0)?));
    }
    let image = op.apply(psi)?;
    let overlap = image.inner(psi)?;
    let rot = if overlap.norm() > 0.0 {
        overlap / overlap.norm()
    } else {
        c64::new(1.0, 0.0)
    };
    let n = psi.norm();
    let d = image.axpy(-rot, psi).norm();
    Ok(if n > 0.0 { d / n } else { d })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::BoundaryKind;
    use crate::nonlinearity::PolyTerm;

    #[test]
    fn pt_fixes_plane_wave() {
        let r = std::f64::consts::FRAC_PI_2;
        let g = Arc::new(Grid::closed_1d(2048, -r, r, BoundaryKind::Dirichlet).unwrap());
        let xi = GridFunction::from_fn(g.clone(), |x| c64::from_polar(1.0, -0.5 * x[0]));
        let pt = SymmetryOp::from_grid(&g, "PT").unwrap();
        assert!(solution_symmetry_residual(&pt, &xi, 1.0).unwrap() <= 1e-13);
    }

    #[test]
    fn p2_flips_odd_functions() {
        let g = Arc::new(Grid::interior_2d(15, -3.0, 3.0).unwrap());
        let u = GridFunction::from_fn(g.clone(), |x| c64::new(x[1] * (-x[0] * x[0]).exp(), x[1]));
        let p2 = SymmetryOp::from_grid(&g, "P2").unwrap();
        assert!(solution_symmetry_residual(&p2, &u, -1.0).unwrap() <= 1e-13);
    }

    #[test]
    fn broken_involution_is_rejected() {
        assert!(SymmetryOp::new("bad", vec![1, 2, 0], true).is_err());
    }

    #[test]
    fn cubic_is_equivariant() {
        let g = Arc::new(Grid::interior_2d(9, -2.0, 2.0).unwrap());
        for name in ["PT", "P1T", "P2T", "P2"] {
            let op = SymmetryOp::from_grid(&g, name).unwrap();
            let r = nonlinearity_equivariance_residual(&op, &NonlinearitySpec::Cubic, &g, 8, 1).unwrap();
            assert!(r <= 1e-13);
        }
    }

    #[test]
    fn polynomial_equivariance_depends_on_coefficient_symmetry() {
        let g = Arc::new(Grid::interior_1d(64, -1.0, 1.0).unwrap());
        let pt = SymmetryOp::from_grid(&g, "PT").unwrap();
        let odd: Vec<c64> = g.nodes().map(|x| c64::new(0.0, x[0].signum())).collect();
        let good = NonlinearitySpec::polynomial(vec![PolyTerm { p: 2, q: 1, coeff: odd }]).unwrap();
        let bad = NonlinearitySpec::polynomial(vec![PolyTerm {
            p: 2,
            q: 1,
            coeff: vec![c64::new(0.0, 1.0); 64],
        }])
        .unwrap();
        assert!(nonlinearity_equivariance_residual(&pt, &good, &g, 32, 7).unwrap() <= 1e-12);
        let r = nonlinearity_equivariance_residual(&pt, &bad, &g, 32, 7).unwrap();
        assert!((r - 2.0).abs() < 0.05, "{r}");
    }
}
