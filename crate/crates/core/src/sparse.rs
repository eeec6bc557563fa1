//! Sparse complex operators on grids, direct solves and bordered solves.

use std::sync::Arc;

use num_complex::Complex64 as c64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::gridfn::GridFunction;
use crate::linalg::{euclid_norm, BorderedLu, Borders, Csr, SparseLu};

#[derive(Debug, Clone)]
pub struct SparseOperator {
    grid: Arc<Grid>,
    matrix: Csr<c64>,
}

impl SparseOperator {
    pub fn new(grid: Arc<Grid>, matrix: Csr<c64>) -> Result<SparseOperator> {
        if matrix.dim() != grid.len() {
            return Err(Error::DimensionMismatch {
                expected: grid.len(),
                found: matrix.dim(),
            });
        }
        Ok(SparseOperator { grid, matrix })
    }

    pub fn from_triplets(grid: Arc<Grid>, entries: Vec<(usize, usize, c64)>) -> Result<SparseOperator> {
        let matrix = Csr::from_triplets(grid.len(), entries)?;
        SparseOperator::new(grid, matrix)
    }

    pub fn identity(grid: Arc<Grid>) -> SparseOperator {
        let entries = (0..grid.len()).map(|i| (i, i, c64::new(1.0, 0.0))).collect();
        SparseOperator::from_triplets(grid, entries).expect("identity is well formed")
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn matrix(&self) -> &Csr<c64> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    pub fn apply(&self, u: &GridFunction) -> Result<GridFunction> {
        if u.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: u.len(),
            });
        }
        if !self.grid.same_as(u.grid()) {
            return Err(Error::GridMismatch("operator and function live on different grids".into()));
        }
        let mut out = vec![c64::new(0.0, 0.0); self.dim()];
        self.matrix.apply(u.values(), &mut out);
        Ok(u.with_values(out))
    }

    /// Adjoint in the weighted inner product: `A*_ij = (w_j / w_i) conj(A_ji)`.
    pub fn adjoint(&self) -> SparseOperator {
        let w = self.grid.weights();
        let entries = self
            .matrix
            .iter()
            .map(|(i, j, a)| (j, i, a.conj() * (w[i] / w[j])))
            .collect();
        SparseOperator::from_triplets(self.grid.clone(), entries).expect("same dimension")
    }

    pub fn norm1(&self) -> f64 {
        self.matrix.norm1()
    }

    /// `A - s I`. The diagonal is added to the pattern if missing.
    pub fn shifted(&self, s: c64) -> SparseOperator {
        let n = self.dim();
        let mut entries: Vec<_> = self.matrix.iter().collect();
        entries.extend((0..n).map(|i| (i, i, -s)));
        SparseOperator::from_triplets(self.grid.clone(), entries).expect("same dimension")
    }

    /// `self + a * other` for operators with the same pattern.
    pub fn add_scaled(&self, a: f64, other: &SparseOperator) -> Result<SparseOperator> {
        if !self.matrix.same_pattern(&other.matrix) {
            return Err(Error::InvalidSpec("operators have different sparsity patterns".into()));
        }
        let mut m = self.matrix.clone();
        for (v, w) in m.values_mut().iter_mut().zip(other.matrix.values()) {
            *v += w * a;
        }
        SparseOperator::new(self.grid.clone(), m)
    }
}

/// LU of `A - s` kept for repeated solves.
pub struct ShiftedSolver {
    shifted: Csr<c64>,
    lu: SparseLu<c64>,
    norm1: f64,
}

impl ShiftedSolver {
    pub fn new(a: &SparseOperator, shift: c64) -> Result<ShiftedSolver> {
        let shifted = a.shifted(shift).matrix;
        let lu = SparseLu::factor(&shifted, None)?;
        let norm1 = shifted.norm1();
        Ok(ShiftedSolver { shifted, lu, norm1 })
    }

    pub fn solve_raw(&self, b: &[c64]) -> Vec<c64> {
        self.lu.solve(b)
    }

    /// Solve with up to two refinement steps.
    pub fn solve_refined(&self, b: &[c64]) -> Result<Vec<c64>> {
        let n = b.len();
        let mut x = self.lu.solve(b);
        for _ in 0..2 {
            if !x.iter().all(|v| v.re.is_finite() && v.im.is_finite()) {
                return Err(Error::SingularSystem { pivot: 0.0 });
            }
            let mut ax = vec![c64::new(0.0, 0.0); n];
            self.shifted.apply(&x, &mut ax);
            let r: Vec<c64> = b.iter().zip(&ax).map(|(p, q)| p - q).collect();
            if euclid_norm(&r) <= 1e-13 * (euclid_norm(b) + self.norm1 * euclid_norm(&x)) {
                break;
            }
            let dx = self.lu.solve(&r);
            x.iter_mut().zip(dx).for_each(|(a, d)| *a += d);
        }
        Ok(x)
    }

    /// Estimate of `σ_min(A - s)` from two seeded inverse-iteration steps.
    pub fn sigma_min_estimate(&self) -> f64 {
        let n = self.shifted.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let mut x: Vec<c64> = (0..n)
            .map(|_| c64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5))
            .collect();
        let mut est = f64::INFINITY;
        for _ in 0..2 {
            let nx = euclid_norm(&x);
            x.iter_mut().for_each(|v| *v /= nx);
            x = self.lu.solve(&x);
            let ny = euclid_norm(&x);
            if !ny.is_finite() {
                return 0.0;
            }
            est = 1.0 / ny;
        }
        est
    }

    pub fn norm1(&self) -> f64 {
        self.norm1
    }
}

/// Solves `(A - shift) u = rhs`.
pub fn direct_solve(a: &SparseOperator, shift: c64, rhs: &GridFunction) -> Result<GridFunction> {
    if rhs.len() != a.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            found: rhs.len(),
        });
    }
    let solver = ShiftedSolver::new(a, shift)?;
    let pivot = solver.sigma_min_estimate();
    if !(pivot > 1e-12 * solver.norm1()) {
        return Err(Error::SingularSystem { pivot });
    }
    let u = solver.solve_refined(rhs.values())?;
    Ok(rhs.with_values(u))
}

/// `(A - shift) u + λ c = rhs`, `⟨u, r⟩ + corner λ = rhs_scalar`.
#[derive(Debug, Clone)]
pub struct BorderedSystem {
    pub base: SparseOperator,
    pub shift: c64,
    pub column: GridFunction,
    pub row: GridFunction,
    pub corner: c64,
}

impl BorderedSystem {
    pub fn new(
        base: SparseOperator,
        shift: c64,
        column: GridFunction,
        row: GridFunction,
        corner: c64,
    ) -> Result<BorderedSystem> {
        for v in [&column, &row] {
            if v.len() != base.dim() {
                return Err(Error::DimensionMismatch {
                    expected: base.dim(),
                    found: v.len(),
                });
            }
        }
        column.check_same_grid(&row)?;
        if column.max_abs() == 0.0 || row.max_abs() == 0.0 {
            return Err(Error::InvalidSpec("border vectors must be nonzero".into()));
        }
        Ok(BorderedSystem {
            base,
            shift,
            column,
            row,
            corner,
        })
    }

    pub fn factor(&self) -> Result<BorderedFactor> {
        let shifted = self.base.shifted(self.shift);
        let w = self.base.grid().weights();
        let row: Vec<c64> = self
            .row
            .values()
            .iter()
            .zip(w)
            .map(|(r, &w)| r.conj() * w)
            .collect();
        let p = self
            .column
            .values()
            .iter()
            .zip(self.row.values())
            .enumerate()
            .max_by(|a, b| (a.1 .0 * a.1 .1).norm().total_cmp(&(b.1 .0 * b.1 .1).norm()))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let alpha = c64::new(shifted.norm1().max(1.0), 0.0);
        let borders = Borders {
            cols: vec![self.column.values().to_vec()],
            rows: vec![row],
            corner: vec![self.corner],
        };
        let lu = BorderedLu::new(shifted.matrix, borders, vec![(p, alpha)], None, false)?;
        Ok(BorderedFactor {
            lu,
            grid: self.base.grid().clone(),
        })
    }
}

/// Reusable factorization of a [`BorderedSystem`].
pub struct BorderedFactor {
    lu: BorderedLu<c64>,
    grid: Arc<Grid>,
}

impl BorderedFactor {
    pub fn solve(&self, rhs: &GridFunction, rhs_scalar: c64) -> Result<(GridFunction, c64)> {
        if rhs.len() != self.grid.len() {
            return Err(Error::DimensionMismatch {
                expected: self.grid.len(),
                found: rhs.len(),
            });
        }
        let mut b = rhs.values().to_vec();
        b.push(rhs_scalar);
        let mut z = self.lu.solve(&b, false)?;
        let res: Vec<c64> = b
            .iter()
            .zip(self.lu.apply(&z, false))
            .map(|(p, q)| p - q)
            .collect();
        let bn = euclid_norm(&b);
        if euclid_norm(&res) > 1e-8 * bn.max(f64::MIN_POSITIVE) && bn > 0.0 {
            return Err(Error::SingularSystem {
                pivot: self.lu.schur_pivot_ratio(),
            });
        }
        let lambda = z.pop().expect("augmented unknown");
        Ok((GridFunction::new(self.grid.clone(), z)?, lambda))
    }
}

pub fn bordered_solve(
    sys: &BorderedSystem,
    rhs: &GridFunction,
    rhs_scalar: c64,
) -> Result<(GridFunction, c64)> {
    sys.factor()?.solve(rhs, rhs_scalar)
}
