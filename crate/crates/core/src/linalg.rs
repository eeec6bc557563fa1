//! Sparse matrices, sparse LU and bordered solves by block elimination.
//!
//! faer's supernodal LU bounds fill for worst-case pivoting, so a single dense
//! border row makes the symbolic analysis quadratic in memory. Bordered systems
//!
//! ```text
//! [ B  C ] [x]   [f]
//! [ R  D ] [y] = [g]
//! ```
//!
//! are therefore solved around a sparse LU of `B` alone. `B` may be singular
//! (the projected operators of this crate always are, along the eigenvector),
//! so a few diagonal entries are boosted first and the boost is undone through
//! an enlarged Schur complement.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};
use std::sync::Arc;

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::sparse::linalg::lu::{self, LuRef, NumericLu, SymbolicLu};
use faer::sparse::{SparseColMatRef, SymbolicSparseColMatRef};
use faer::{Conj, MatMut, Par};
use num_complex::Complex64 as c64;

use crate::error::{Error, Result};

/// Field operations shared by the real and complex solvers.
pub trait Scalar:
    faer::traits::ComplexField<Real = f64>
    + Copy
    + Send
    + Sync
    + Debug
    + PartialEq
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    fn zero() -> Self;
    fn from_f64(x: f64) -> Self;
    fn modulus(self) -> f64;
    fn conjugate(self) -> Self;
    fn finite(self) -> bool;
}

impl Scalar for f64 {
    fn zero() -> Self {
        0.0
    }
    fn from_f64(x: f64) -> Self {
        x
    }
    fn modulus(self) -> f64 {
        self.abs()
    }
    fn conjugate(self) -> Self {
        self
    }
    fn finite(self) -> bool {
        self.is_finite()
    }
}

impl Scalar for c64 {
    fn zero() -> Self {
        c64::new(0.0, 0.0)
    }
    fn from_f64(x: f64) -> Self {
        c64::new(x, 0.0)
    }
    fn modulus(self) -> f64 {
        self.norm()
    }
    fn conjugate(self) -> Self {
        self.conj()
    }
    fn finite(self) -> bool {
        self.re.is_finite() && self.im.is_finite()
    }
}

pub(crate) fn euclid_norm<T: Scalar>(x: &[T]) -> f64 {
    x.iter().map(|v| v.modulus().powi(2)).sum::<f64>().sqrt()
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Square matrix in compressed sparse row form with sorted, unique columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr<T> {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<T>,
}

impl<T: Scalar> Csr<T> {
    /// Duplicates are summed; explicit zeros are kept so that the pattern
    /// depends only on which entries were pushed.
    pub fn from_triplets(n: usize, mut entries: Vec<(usize, usize, T)>) -> Result<Csr<T>> {
        if let Some(&(i, j, _)) = entries.iter().find(|&&(i, j, _)| i >= n || j >= n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: i.max(j) + 1,
            });
        }
        entries.sort_by_key(|&(i, j, _)| (i, j));
        let mut row_ptr = vec![0usize; n + 1];
        let mut col_idx = Vec::with_capacity(entries.len());
        let mut values: Vec<T> = Vec::with_capacity(entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (i, j, v) in entries {
            if last == Some((i, j)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            last = Some((i, j));
            row_ptr[i + 1] += 1;
            col_idx.push(j);
            values.push(v);
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        Ok(Csr {
            n,
            row_ptr,
            col_idx,
            values,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[T]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[r.clone()], &self.values[r])
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn same_pattern(&self, other: &Csr<T>) -> bool {
        self.n == other.n && self.row_ptr == other.row_ptr && self.col_idx == other.col_idx
    }

    /// Position of entry `(i, j)` in the value array.
    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        let (cols, _) = self.row(i);
        cols.binary_search(&j).ok().map(|k| self.row_ptr[i] + k)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, T)> + '_ {
        (0..self.n).flat_map(move |i| {
            let (cols, vals) = self.row(i);
            cols.iter().zip(vals).map(move |(&j, &v)| (i, j, v))
        })
    }

    /// `y = A x`.
    pub fn apply(&self, x: &[T], y: &mut [T]) {
        for (i, yi) in y.iter_mut().enumerate().take(self.n) {
            let (cols, vals) = self.row(i);
            *yi = cols
                .iter()
                .zip(vals)
                .fold(T::zero(), |acc, (&j, &v)| acc + v * x[j]);
        }
    }

    /// `y = Aᵀ x`.
    pub fn apply_transpose(&self, x: &[T], y: &mut [T]) {
        y.iter_mut().for_each(|v| *v = T::zero());
        for (i, &xi) in x.iter().enumerate().take(self.n) {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                y[j] += v * xi;
            }
        }
    }

    /// Maximum absolute column sum.
    pub fn norm1(&self) -> f64 {
        let mut sums = vec![0.0; self.n];
        for (_, j, v) in self.iter() {
            sums[j] += v.modulus();
        }
        sums.into_iter().fold(0.0, f64::max)
    }

    /// Entries `alpha` added at the given diagonal positions (which must be in
    /// the pattern).
    pub fn with_diagonal_added(&self, diag: &[(usize, T)]) -> Result<Csr<T>> {
        let mut out = self.clone();
        for &(i, a) in diag {
            let k = out
                .position(i, i)
                .ok_or_else(|| Error::InvalidSpec(format!("diagonal entry {i} not in pattern")))?;
            out.values[k] += a;
        }
        Ok(out)
    }
}

/// Symbolic LU analysis, shareable between matrices with one pattern.
#[derive(Clone)]
pub struct LuSymbolic {
    inner: Arc<SymbolicLu<usize>>,
    row_ptr: Arc<Vec<usize>>,
    col_idx: Arc<Vec<usize>>,
}

impl LuSymbolic {
    pub fn analyze<T: Scalar>(a: &Csr<T>) -> Result<LuSymbolic> {
        let sym = SymbolicSparseColMatRef::new_checked(a.n, a.n, &a.row_ptr, None, &a.col_idx);
        let inner = lu::factorize_symbolic_lu(sym, Default::default())
            .map_err(|e| Error::Unsupported(format!("symbolic LU failed: {e:?}")))?;
        Ok(LuSymbolic {
            inner: Arc::new(inner),
            row_ptr: Arc::new(a.row_ptr.clone()),
            col_idx: Arc::new(a.col_idx.clone()),
        })
    }

    fn matches<T: Scalar>(&self, a: &Csr<T>) -> bool {
        *self.row_ptr == a.row_ptr && *self.col_idx == a.col_idx
    }
}

/// Sparse LU with partial pivoting.
///
/// The CSR arrays of `A` are handed to faer as the CSC arrays of `Aᵀ`, so the
/// factorization is of `Aᵀ` and the two solve directions are swapped.
pub struct SparseLu<T> {
    n: usize,
    symbolic: LuSymbolic,
    numeric: NumericLu<usize, T>,
}

impl<T: Scalar> SparseLu<T> {
    pub fn factor(a: &Csr<T>, symbolic: Option<&LuSymbolic>) -> Result<SparseLu<T>> {
        let symbolic = match symbolic {
            Some(s) if s.matches(a) => s.clone(),
            _ => LuSymbolic::analyze(a)?,
        };
        let sym = SymbolicSparseColMatRef::new_checked(a.n, a.n, &a.row_ptr, None, &a.col_idx);
        let mat = SparseColMatRef::new(sym, &a.values);
        let mut numeric = NumericLu::new();
        let par = Par::Seq;
        let req = symbolic
            .inner
            .factorize_numeric_lu_scratch::<T>(par, Default::default());
        let mut buf = MemBuffer::try_new(req)
            .map_err(|_| Error::Unsupported("out of memory in LU workspace".into()))?;
        symbolic
            .inner
            .factorize_numeric_lu(&mut numeric, mat, par, MemStack::new(&mut buf), Default::default())
            .map_err(|e| match e {
                faer::sparse::linalg::LuError::SymbolicSingular { .. } => {
                    Error::SingularSystem { pivot: 0.0 }
                }
                other => Error::Unsupported(format!("numeric LU failed: {other:?}")),
            })?;
        Ok(SparseLu {
            n: a.n,
            symbolic,
            numeric,
        })
    }

    pub fn symbolic(&self) -> &LuSymbolic {
        &self.symbolic
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    fn run(&self, x: &mut [T], transpose: bool) {
        assert_eq!(x.len(), self.n);
        let lu = LuRef::new_unchecked(&self.symbolic.inner, &self.numeric);
        let par = Par::Seq;
        let mut buf = MemBuffer::new(self.symbolic.inner.solve_in_place_scratch::<T>(1, par));
        let rhs = MatMut::from_column_major_slice_mut(x, self.n, 1);
        if transpose {
            lu.solve_in_place_with_conj(Conj::No, rhs, par, MemStack::new(&mut buf));
        } else {
            lu.solve_transpose_in_place_with_conj(Conj::No, rhs, par, MemStack::new(&mut buf));
        }
    }

    /// Overwrites `x` with `A⁻¹ x`.
    pub fn solve_in_place(&self, x: &mut [T]) {
        self.run(x, false);
    }

    /// Overwrites `x` with `A⁻ᵀ x`.
    pub fn solve_transpose_in_place(&self, x: &mut [T]) {
        self.run(x, true);
    }

    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}

/// Gaussian elimination with partial pivoting for the small Schur systems.
#[derive(Debug, Clone)]
pub(crate) struct SmallLu<T> {
    n: usize,
    lu: Vec<T>,
    perm: Vec<usize>,
    /// Smallest pivot relative to the largest entry of the input.
    pub pivot_ratio: f64,
}

impl<T: Scalar> SmallLu<T> {
    pub fn new(n: usize, mut a: Vec<T>) -> SmallLu<T> {
        assert_eq!(a.len(), n * n);
        let scale = a.iter().fold(0.0f64, |m, v| m.max(v.modulus()));
        let mut perm: Vec<usize> = (0..n).collect();
        let mut min_pivot = f64::INFINITY;
        for k in 0..n {
            let p = (k..n)
                .max_by(|&i, &j| a[i * n + k].modulus().total_cmp(&a[j * n + k].modulus()))
                .unwrap();
            if p != k {
                for c in 0..n {
                    a.swap(k * n + c, p * n + c);
                }
                perm.swap(k, p);
            }
            let piv = a[k * n + k];
            min_pivot = min_pivot.min(piv.modulus());
            if piv.modulus() == 0.0 {
                continue;
            }
            for i in k + 1..n {
                let l = a[i * n + k] / piv;
                a[i * n + k] = l;
                for c in k + 1..n {
                    let u = a[k * n + c];
                    a[i * n + c] -= l * u;
                }
            }
        }
        let pivot_ratio = if n == 0 {
            1.0
        } else if scale > 0.0 {
            min_pivot / scale
        } else {
            0.0
        };
        SmallLu {
            n,
            lu: a,
            perm,
            pivot_ratio,
        }
    }

    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let n = self.n;
        let mut x: Vec<T> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            for k in 0..i {
                let l = self.lu[i * n + k];
                let xk = x[k];
                x[i] -= l * xk;
            }
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                let u = self.lu[i * n + k];
                let xk = x[k];
                x[i] -= u * xk;
            }
            x[i] /= self.lu[i * n + i];
        }
        x
    }
}

/// Dense borders of a bordered system, stored as plain vectors.
#[derive(Debug, Clone)]
pub struct Borders<T> {
    /// Border columns `C` (each of length n).
    pub cols: Vec<Vec<T>>,
    /// Border rows `R` (each of length n), acting by the plain bilinear dot.
    pub rows: Vec<Vec<T>>,
    /// Corner block `D`, row-major `k × k`.
    pub corner: Vec<T>,
}

impl<T: Scalar> Borders<T> {
    pub fn k(&self) -> usize {
        self.cols.len()
    }

    fn transposed(&self) -> Borders<T> {
        let k = self.k();
        let mut corner = vec![T::zero(); k * k];
        for i in 0..k {
            for j in 0..k {
                corner[j * k + i] = self.corner[i * k + j];
            }
        }
        Borders {
            cols: self.rows.clone(),
            rows: self.cols.clone(),
            corner,
        }
    }
}

/// One direction (plain or transposed) of the block elimination.
struct Elimination<T> {
    borders: Borders<T>,
    z_cols: Vec<Vec<T>>,
    z_boost: Vec<Vec<T>>,
    schur: SmallLu<T>,
}

/// Factorization of the bordered matrix `[[B, C], [R, D]]`.
pub struct BorderedLu<T> {
    base: Arc<Csr<T>>,
    lu: Arc<SparseLu<T>>,
    boost: Vec<(usize, T)>,
    plain: Elimination<T>,
    transposed: Option<Elimination<T>>,
}

impl<T: Scalar> BorderedLu<T> {
    /// `boost` lists diagonal positions and values added to `B` before the
    /// sparse factorization; pick positions where the expected null vectors
    /// of `B` are large.
    pub fn new(
        base: Csr<T>,
        borders: Borders<T>,
        boost: Vec<(usize, T)>,
        symbolic: Option<&LuSymbolic>,
        with_transpose: bool,
    ) -> Result<BorderedLu<T>> {
        let n = base.dim();
        let k = borders.k();
        if borders.rows.len() != k
            || borders.corner.len() != k * k
            || borders.cols.iter().chain(&borders.rows).any(|v| v.len() != n)
        {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: borders.cols.first().map_or(0, |c| c.len()),
            });
        }
        let boosted = base.with_diagonal_added(&boost)?;
        let lu = SparseLu::factor(&boosted, symbolic)?;
        Self::assemble(Arc::new(base), Arc::new(lu), borders, boost, with_transpose)
    }

    fn assemble(
        base: Arc<Csr<T>>,
        lu: Arc<SparseLu<T>>,
        borders: Borders<T>,
        boost: Vec<(usize, T)>,
        with_transpose: bool,
    ) -> Result<BorderedLu<T>> {
        let n = base.dim();
        if borders.rows.len() != borders.k()
            || borders.corner.len() != borders.k() * borders.k()
            || borders.cols.iter().chain(&borders.rows).any(|v| v.len() != n)
        {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: borders.cols.first().map_or(0, |c| c.len()),
            });
        }
        let plain = eliminate(&lu, borders.clone(), &boost, false)?;
        let transposed = if with_transpose {
            Some(eliminate(&lu, borders.transposed(), &boost, true)?)
        } else {
            None
        };
        Ok(BorderedLu {
            base,
            lu,
            boost,
            plain,
            transposed,
        })
    }

    /// Same base matrix and factorization with different borders.
    pub fn rebordered(&self, borders: Borders<T>, with_transpose: bool) -> Result<BorderedLu<T>> {
        Self::assemble(
            self.base.clone(),
            self.lu.clone(),
            borders,
            self.boost.clone(),
            with_transpose,
        )
    }

    pub fn borders(&self) -> &Borders<T> {
        &self.plain.borders
    }

    pub fn symbolic(&self) -> &LuSymbolic {
        self.lu.symbolic()
    }

    pub fn dim(&self) -> usize {
        self.base.dim() + self.plain.borders.k()
    }

    /// Smallest pivot of the Schur complement relative to its largest entry.
    pub fn schur_pivot_ratio(&self) -> f64 {
        self.plain.schur.pivot_ratio
    }

    /// `y = K z` (or `Kᵀ z`).
    pub fn apply(&self, z: &[T], transpose: bool) -> Vec<T> {
        let n = self.base.dim();
        let e = self.direction(transpose);
        let k = e.borders.k();
        let (x, y) = z.split_at(n);
        let mut out = vec![T::zero(); n + k];
        if transpose {
            self.base.apply_transpose(x, &mut out[..n]);
        } else {
            self.base.apply(x, &mut out[..n]);
        }
        for (c, &yc) in e.borders.cols.iter().zip(y) {
            for (o, &cv) in out[..n].iter_mut().zip(c) {
                *o += cv * yc;
            }
        }
        for (r, row) in e.borders.rows.iter().enumerate() {
            let mut s = dot(row, x);
            for (c, &yc) in y.iter().enumerate() {
                s += e.borders.corner[r * k + c] * yc;
            }
            out[n + r] = s;
        }
        out
    }

    fn direction(&self, transpose: bool) -> &Elimination<T> {
        if transpose {
            self.transposed
                .as_ref()
                .expect("BorderedLu built without transpose support")
        } else {
            &self.plain
        }
    }

    fn solve_once(&self, rhs: &[T], transpose: bool) -> Vec<T> {
        let n = self.base.dim();
        let e = self.direction(transpose);
        let k = e.borders.k();
        let r = self.boost.len();
        let (f, g) = rhs.split_at(n);
        let mut zf = f.to_vec();
        if transpose {
            self.lu.solve_transpose_in_place(&mut zf);
        } else {
            self.lu.solve_in_place(&mut zf);
        }
        let mut small = vec![T::zero(); k + r];
        for i in 0..k {
            small[i] = g[i] - dot(&e.borders.rows[i], &zf);
        }
        for (j, &(p, a)) in self.boost.iter().enumerate() {
            small[k + j] = a * zf[p];
        }
        let yt = e.schur.solve(&small);
        let (y, t) = yt.split_at(k);
        let mut x = zf;
        for (zc, &yc) in e.z_cols.iter().zip(y) {
            for (xv, &zv) in x.iter_mut().zip(zc) {
                *xv -= zv * yc;
            }
        }
        for (zu, &tv) in e.z_boost.iter().zip(t) {
            for (xv, &zv) in x.iter_mut().zip(zu) {
                *xv += zv * tv;
            }
        }
        x.extend_from_slice(y);
        x
    }

    /// Solves `K z = rhs` (or `Kᵀ z = rhs`) with up to three steps of
    /// iterative refinement against the unboosted matrix.
    pub fn solve(&self, rhs: &[T], transpose: bool) -> Result<Vec<T>> {
        assert_eq!(rhs.len(), self.dim());
        let mut z = self.solve_once(rhs, transpose);
        let rhs_norm = euclid_norm(rhs);
        let mut last = f64::INFINITY;
        for _ in 0..3 {
            if !z.iter().all(|v| v.finite()) {
                return Err(Error::SingularSystem { pivot: 0.0 });
            }
            let kz = self.apply(&z, transpose);
            let res: Vec<T> = rhs.iter().zip(&kz).map(|(&a, &b)| a - b).collect();
            let rn = euclid_norm(&res);
            if rn <= 1e-15 * rhs_norm || rn >= 0.5 * last {
                break;
            }
            last = rn;
            let dz = self.solve_once(&res, transpose);
            for (a, b) in z.iter_mut().zip(dz) {
                *a += b;
            }
        }
        Ok(z)
    }
}

fn eliminate<T: Scalar>(
    lu: &SparseLu<T>,
    borders: Borders<T>,
    boost: &[(usize, T)],
    transpose: bool,
) -> Result<Elimination<T>> {
    let n = lu.dim();
    let k = borders.k();
    let r = boost.len();
    let solve = |v: &mut Vec<T>| {
        if transpose {
            lu.solve_transpose_in_place(v)
        } else {
            lu.solve_in_place(v)
        }
    };
    let z_cols: Vec<Vec<T>> = borders
        .cols
        .iter()
        .map(|c| {
            let mut v = c.clone();
            solve(&mut v);
            v
        })
        .collect();
    let z_boost: Vec<Vec<T>> = boost
        .iter()
        .map(|&(p, _)| {
            let mut v = vec![T::zero(); n];
            v[p] = T::from_f64(1.0);
            solve(&mut v);
            v
        })
        .collect();
    if z_cols.iter().chain(&z_boost).any(|v| !v.iter().all(|x| x.finite())) {
        return Err(Error::SingularSystem { pivot: 0.0 });
    }
    // Unknowns (y, t) with t_j = a_j x_{p_j}:
    //   (D - R Z_C) y + (R Z_U) t = g - R z_f
    //   (a_j Z_C[p_j]) y + (I - a_j Z_U[p_j]) t = a_j z_f[p_j]
    let m = k + r;
    let mut s = vec![T::zero(); m * m];
    for i in 0..k {
        for j in 0..k {
            s[i * m + j] = borders.corner[i * k + j] - dot(&borders.rows[i], &z_cols[j]);
        }
        for j in 0..r {
            s[i * m + k + j] = dot(&borders.rows[i], &z_boost[j]);
        }
    }
    for (i, &(p, a)) in boost.iter().enumerate() {
        for j in 0..k {
            s[(k + i) * m + j] = a * z_cols[j][p];
        }
        for j in 0..r {
            let delta = if i == j { T::from_f64(1.0) } else { T::zero() };
            s[(k + i) * m + k + j] = delta - a * z_boost[j][p];
        }
    }
    let schur = SmallLu::new(m, s);
    if !(schur.pivot_ratio > 1e-14) {
        return Err(Error::SingularSystem {
            pivot: schur.pivot_ratio,
        });
    }
    Ok(Elimination {
        borders,
        z_cols,
        z_boost,
        schur,
    })
}
