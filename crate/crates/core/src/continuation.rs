//! Newton continuation of normalized solution branches.
//!
//! The real unknowns are `(Re ψ, Im ψ, Re μ, Im μ)`, plus the parameter in
//! arclength mode. Two scalar constraints close the system: `‖ψ‖² = 1` and
//! the gauge condition `Im(ψ(x0) + ψ(π x0)) = 0`, where `π` is the node map of
//! the primary antilinear symmetry.

use std::borrow::Cow;
use std::cell::RefCell;
use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gridfn::{GridFunction, GridFunctionJson};
use crate::linalg::{BorderedLu, Borders, Csr, LuSymbolic};
use crate::models::DiscretizedProblem;
use crate::nonlinearity::eval_f;
use crate::sparse::SparseOperator;
use crate::spectra::{compute_eigentriple_with, EigenOptions, EigenTriple};
use crate::symmetry::SymmetryOp;
use crate::{c64, Error, Result};

const NEWTON_MAX: usize = 50;
const STEP_NEWTON_MAX: usize = 12;
const STEP_TOL: f64 = 1e-9;
const SV_ITERATIONS: usize = 5;
const SV_SEED: u64 = 0x5eed_0517;
const SIGN_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContinuationMode {
    #[default]
    Natural,
    Arclength,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContinuationConfig {
    pub mode: ContinuationMode,
    pub step: f64,
    pub min_step: f64,
    pub max_step: f64,
    pub max_steps: usize,
    pub newton_tol: f64,
    pub detect_bifurcations: bool,
    pub complex_mu_allowed: bool,
}

impl Default for ContinuationConfig {
    fn default() -> Self {
        ContinuationConfig {
            mode: ContinuationMode::Natural,
            step: 0.05,
            min_step: 1e-5,
            max_step: 0.2,
            max_steps: 500,
            newton_tol: 1e-10,
            detect_bifurcations: true,
            complex_mu_allowed: false,
        }
    }
}

impl ContinuationConfig {
    fn validate(&self) -> Result<()> {
        let ok = self.step > 0.0
            && self.min_step > 0.0
            && self.min_step <= self.step
            && self.step <= self.max_step
            && self.newton_tol > 0.0
            && self.max_steps > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidSpec(
                "continuation needs 0 < min_step <= step <= max_step, newton_tol > 0 and max_steps > 0".into(),
            ))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymmetryResidual {
    pub name: String,
    pub residual: f64,
    /// Eigen-sign used for a linear symmetry; `None` for antilinear ones.
    pub sign: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct BranchPoint {
    /// Value of the continuation parameter.
    pub param: f64,
    pub eps: f64,
    pub gamma: Option<f64>,
    pub mu: c64,
    pub psi: GridFunction,
    pub newton_residual: f64,
    pub newton_iterations: usize,
    pub symmetry_residuals: Vec<SymmetryResidual>,
    /// Smallest singular value of the bordered Jacobian.
    pub stability_indicator: f64,
    tangent: Option<Arc<Vec<f64>>>,
    null_vector: Option<Arc<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchPointJson {
    pub param: f64,
    pub eps: f64,
    pub gamma: Option<f64>,
    pub mu: c64,
    pub newton_residual: f64,
    pub stability_indicator: f64,
    pub symmetry_residuals: Vec<SymmetryResidual>,
    /// Flattened so a snapshot is also a plain grid-function file.
    #[serde(flatten)]
    pub psi: GridFunctionJson,
}

impl BranchPoint {
    pub fn symmetry_residual(&self, name: &str) -> Option<&SymmetryResidual> {
        self.symmetry_residuals.iter().find(|s| s.name == name)
    }

    pub fn to_json(&self) -> BranchPointJson {
        BranchPointJson {
            param: self.param,
            eps: self.eps,
            gamma: self.gamma,
            mu: self.mu,
            newton_residual: self.newton_residual,
            stability_indicator: self.stability_indicator,
            symmetry_residuals: self.symmetry_residuals.clone(),
            psi: self.psi.to_json(),
        }
    }

    pub fn from_json(problem: &DiscretizedProblem, json: &BranchPointJson) -> Result<BranchPoint> {
        Ok(BranchPoint {
            param: json.param,
            eps: json.eps,
            gamma: json.gamma,
            mu: json.mu,
            psi: GridFunction::from_json(problem.grid.clone(), &json.psi)?,
            newton_residual: json.newton_residual,
            newton_iterations: 0,
            symmetry_residuals: json.symmetry_residuals.clone(),
            stability_indicator: json.stability_indicator,
            tangent: None,
            null_vector: None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkerKind {
    /// The branch turns back in the parameter.
    Fold,
    /// A fold where a complex-conjugate pair of solutions emerges.
    Collision,
    /// Isolated dip of the stability indicator away from folds.
    Bifurcation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Marker {
    pub param: f64,
    pub kind: MarkerKind,
    /// Index of the refined point in `Branch::points`.
    pub point: usize,
}

#[derive(Debug, Clone)]
pub struct Branch {
    pub branch_id: usize,
    pub parent_id: Option<usize>,
    /// `eps` or the name of a model parameter.
    pub parameter_name: String,
    pub points: Vec<BranchPoint>,
    pub bifurcation_markers: Vec<Marker>,
    pub operator_norm: f64,
    pub gauge: Gauge,
    pub range: (f64, f64),
}

impl Branch {
    fn empty(parameter: &str, range: (f64, f64)) -> Branch {
        Branch {
            branch_id: 0,
            parent_id: None,
            parameter_name: parameter.to_string(),
            points: Vec::new(),
            bifurcation_markers: Vec::new(),
            operator_norm: 0.0,
            gauge: Gauge {
                node: 0,
                partner: 0,
                c0: c64::new(1.0, 0.0),
                c1: c64::new(0.0, 0.0),
            },
            range,
        }
    }

    /// Largest `|Im μ| / (1 + |μ|)` over the points before the first marker.
    pub fn max_relative_imag_before_markers(&self) -> f64 {
        let stop = self
            .bifurcation_markers
            .iter()
            .map(|m| m.point)
            .min()
            .unwrap_or(self.points.len());
        self.points[..stop]
            .iter()
            .map(|p| p.mu.im.abs() / (1.0 + p.mu.norm()))
            .fold(0.0, f64::max)
    }
}

/// A branch that stopped early, with everything accepted up to the failure.
#[derive(Debug, Clone)]
pub struct BranchFailure {
    pub error: Error,
    pub partial: Branch,
}

impl fmt::Display for BranchFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({} points kept)", self.error, self.partial.points.len())
    }
}

impl std::error::Error for BranchFailure {}

impl From<BranchFailure> for Error {
    fn from(b: BranchFailure) -> Error {
        b.error
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NewtonConstraints {
    pub newton_tol: f64,
    pub max_iterations: usize,
    /// Preferred gauge node; the problem's default is used when absent.
    pub phase_node: Option<usize>,
}

impl Default for NewtonConstraints {
    fn default() -> Self {
        NewtonConstraints {
            newton_tol: 1e-10,
            max_iterations: NEWTON_MAX,
            phase_node: None,
        }
    }
}

// ---------------------------------------------------------------------------
// Real coordinates

fn pack(psi: &[c64], mu: c64, p: f64) -> Vec<f64> {
    let m = psi.len();
    let mut x = vec![0.0; 2 * m + 3];
    for (i, z) in psi.iter().enumerate() {
        x[i] = z.re;
        x[m + i] = z.im;
    }
    x[2 * m] = mu.re;
    x[2 * m + 1] = mu.im;
    x[2 * m + 2] = p;
    x
}

fn psi_of(x: &[f64], m: usize) -> Vec<c64> {
    (0..m).map(|i| c64::new(x[i], x[m + i])).collect()
}

fn mu_of(x: &[f64], m: usize) -> c64 {
    c64::new(x[2 * m], x[2 * m + 1])
}

/// Inner product with the grid weights on the field block.
fn theta_dot(w: &[f64], x: &[f64], y: &[f64]) -> f64 {
    let m = w.len();
    let mut s = 0.0;
    for i in 0..m {
        s += w[i] * (x[i] * y[i] + x[m + i] * y[m + i]);
    }
    s + x[2 * m..].iter().zip(&y[2 * m..]).map(|(a, b)| a * b).sum::<f64>()
}

fn theta_norm(w: &[f64], x: &[f64]) -> f64 {
    theta_dot(w, x, x).sqrt()
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn lerp(a: &[f64], b: &[f64], t: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + t * (y - x)).collect()
}

fn point_x(point: &BranchPoint) -> Vec<f64> {
    pack(point.psi.values(), point.mu, point.param)
}

/// Gauge condition `Im(c0 ψ(x0) + c1 ψ(x1)) = 0`.
///
/// With an antilinear symmetry `C` the pair is `(x0, π x0)` and
/// `c1 = conj(c0)`, which keeps the condition `C`-invariant; `c0` is the
/// conjugate unit phase of the seed at `x0`. For a seed that is positive at a
/// `C`-fixed node this is `Im ψ(x0) = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gauge {
    pub node: usize,
    pub partner: usize,
    pub c0: c64,
    pub c1: c64,
}

impl Gauge {
    fn value(&self, psi: &[c64]) -> c64 {
        self.c0 * psi[self.node] + self.c1 * psi[self.partner]
    }

    /// Rotates `ψ` so that the gauge functional is real and positive.
    fn fix(&self, psi: &mut [c64]) {
        let z = self.value(psi);
        if z.norm() > 0.0 {
            let rot = z.conj() / z.norm();
            psi.iter_mut().for_each(|v| *v *= rot);
        }
    }
}

fn choose_gauge(problem: &DiscretizedProblem, psi: &[c64], preferred: Option<usize>) -> Gauge {
    let scale = psi.iter().fold(0.0f64, |m, z| m.max(z.norm()));
    let x0 = preferred.unwrap_or(problem.phase_node);
    let x0 = if x0 < psi.len() && psi[x0].norm() > 1e-3 * scale {
        x0
    } else {
        (0..psi.len()).max_by(|&i, &j| psi[i].norm().total_cmp(&psi[j].norm())).unwrap_or(0)
    };
    let z = psi[x0];
    let c = if z.norm() > 0.0 { z / z.norm() } else { c64::new(1.0, 0.0) };
    match problem.primary_antilinear() {
        Some(op) => Gauge {
            node: x0,
            partner: op.permutation()[x0],
            c0: c.conj(),
            c1: c,
        },
        None => Gauge {
            node: x0,
            partner: x0,
            c0: c.conj(),
            c1: c64::new(0.0, 0.0),
        },
    }
}

/// Rotates `ψ` into the `C`-invariant phase when it is a `C`-eigenvector.
fn symmetric_phase(problem: &DiscretizedProblem, psi: &mut [c64]) {
    let Some(op) = problem.primary_antilinear() else { return };
    let w = problem.grid.weights();
    let c = op.apply_slice(psi);
    let overlap: c64 = c.iter().zip(psi.iter()).zip(w).map(|((a, b), w)| a * b.conj() * *w).sum();
    let nrm: f64 = psi.iter().zip(w).map(|(z, w)| w * z.norm_sqr()).sum();
    if overlap.norm() < (1.0 - 1e-6) * nrm {
        return;
    }
    let half = c64::from_polar(1.0, overlap.arg() / 2.0);
    psi.iter_mut().for_each(|z| *z *= half);
}

fn normalize(psi: &mut [c64], w: &[f64]) {
    let n = psi.iter().zip(w).map(|(z, w)| w * z.norm_sqr()).sum::<f64>().sqrt();
    if n > 0.0 {
        psi.iter_mut().for_each(|z| *z /= n);
    }
}

fn linear_residual(op: &SymmetryOp, psi: &GridFunction, sign: f64) -> Result<f64> {
    crate::symmetry::solution_symmetry_residual(op, psi, sign)
}

/// Eigen-signs of the linear symmetries at a point, `None` where the point is
/// not an eigenvector within `SIGN_TOL`.
fn linear_signs(problem: &DiscretizedProblem, psi: &GridFunction) -> Result<Vec<Option<f64>>> {
    problem
        .symmetries
        .iter()
        .map(|op| {
            if op.is_antilinear() {
                return Ok(None);
            }
            if let Some(s) = op.expected_sign {
                return Ok(Some(s as f64));
            }
            for s in [1.0, -1.0] {
                if linear_residual(op, psi, s)? <= SIGN_TOL {
                    return Ok(Some(s));
                }
            }
            Ok(None)
        })
        .collect()
}

fn symmetry_residuals(
    problem: &DiscretizedProblem,
    psi: &GridFunction,
    signs: &[Option<f64>],
) -> Result<Vec<SymmetryResidual>> {
    let primary = problem.primary_antilinear().map(|op| op.name().to_string());
    problem
        .symmetries
        .iter()
        .zip(signs)
        .map(|(op, sign)| {
            let (residual, sign) = if op.is_antilinear() {
                let r = if Some(op.name()) == primary.as_deref() {
                    linear_residual(op, psi, 1.0)?
                } else {
                    crate::symmetry::best_phase_residual(op, psi)?
                };
                (r, None)
            } else if let Some(s) = sign {
                (linear_residual(op, psi, *s)?, Some(*s))
            } else {
                let r = linear_residual(op, psi, 1.0)?.min(linear_residual(op, psi, -1.0)?);
                (r, None)
            };
            Ok(SymmetryResidual {
                name: op.name().to_string(),
                residual,
                sign,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// The parametrized system

enum Param {
    Eps,
    Model {
        name: String,
        base: f64,
        delta: SparseOperator,
    },
}

struct Lin {
    jac: Csr<f64>,
    col_a: Vec<f64>,
    col_b: Vec<f64>,
    col_p: Vec<f64>,
    row_norm: Vec<f64>,
    row_phase: Vec<f64>,
    res: Vec<f64>,
    boost: Vec<(usize, f64)>,
}

struct Analysis {
    sv: f64,
    null: Option<Vec<f64>>,
    tangent: Option<Vec<f64>>,
}

struct Corrected {
    x: Vec<f64>,
    lin: Lin,
    iterations: usize,
    residual: f64,
}

struct ArcConstraint<'b> {
    tangent: &'b [f64],
    anchor: &'b [f64],
    h: f64,
}

struct Family<'a> {
    problem: &'a DiscretizedProblem,
    param: Param,
    eps: f64,
    norm_a: f64,
    gauge: Gauge,
    weights: Vec<f64>,
    tol: f64,
    symbolic: RefCell<Option<LuSymbolic>>,
}

impl<'a> Family<'a> {
    fn new(
        problem: &'a DiscretizedProblem,
        parameter: &str,
        eps: f64,
        gauge: Gauge,
        tol: f64,
    ) -> Result<Family<'a>> {
        let m = problem.grid.len();
        if problem
            .nonlinearity
            .wirtinger_derivatives(&vec![c64::new(0.0, 0.0); m])
            .is_none()
        {
            return Err(Error::Unsupported(format!(
                "Newton continuation needs pointwise derivatives; `{}` is nonlocal",
                problem.nonlinearity.name()
            )));
        }
        let param = if parameter == "eps" {
            Param::Eps
        } else {
            if !problem.kind.continuable().contains(&parameter) {
                return Err(Error::InvalidSpec(format!(
                    "model `{}` cannot be continued in `{parameter}`",
                    problem.kind.name()
                )));
            }
            let base = problem.spec.real(parameter).map_err(|_| {
                Error::InvalidSpec(format!("set `{parameter}` explicitly to continue in it"))
            })?;
            let a0 = &problem.operator;
            let a1 = problem.rebuild_with(parameter, base + 1.0)?.operator;
            let a2 = problem.rebuild_with(parameter, base + 2.0)?.operator;
            let delta = a1.add_scaled(-1.0, a0)?;
            let curvature = a2.add_scaled(-1.0, a0)?.add_scaled(-2.0, &delta)?;
            if curvature.norm1() > 1e-9 * (1.0 + delta.norm1()) {
                return Err(Error::Unsupported(format!("operator is not affine in `{parameter}`")));
            }
            Param::Model {
                name: parameter.to_string(),
                base,
                delta,
            }
        };
        Ok(Family {
            problem,
            param,
            eps,
            norm_a: problem.operator.norm1(),
            gauge,
            weights: problem.grid.weights().to_vec(),
            tol,
            symbolic: RefCell::new(None),
        })
    }

    fn m(&self) -> usize {
        self.weights.len()
    }

    fn operator(&self, p: f64) -> Result<Cow<'_, SparseOperator>> {
        match &self.param {
            Param::Eps => Ok(Cow::Borrowed(&self.problem.operator)),
            Param::Model { base, delta, .. } => {
                Ok(Cow::Owned(self.problem.operator.add_scaled(p - base, delta)?))
            }
        }
    }

    fn eps_at(&self, p: f64) -> f64 {
        match self.param {
            Param::Eps => p,
            Param::Model { .. } => self.eps,
        }
    }

    fn gamma_at(&self, p: f64) -> Option<f64> {
        match &self.param {
            Param::Model { name, .. } if name == "gamma" => Some(p),
            _ => self.problem.spec.real("gamma").ok(),
        }
    }

    fn initial_param(&self, eps: f64) -> f64 {
        match &self.param {
            Param::Eps => eps,
            Param::Model { base, .. } => *base,
        }
    }

    fn linearize(&self, x: &[f64]) -> Result<Lin> {
        let m = self.m();
        let p = x[2 * m + 2];
        let a = self.operator(p)?;
        let eps = self.eps_at(p);
        let psi_v = psi_of(x, m);
        let mu = mu_of(x, m);
        let psi = GridFunction::new(self.problem.grid.clone(), psi_v)?;
        let ap = a.apply(&psi)?;
        let f = eval_f(&self.problem.nonlinearity, &psi)?;
        let (alpha, beta) = self
            .problem
            .nonlinearity
            .wirtinger_derivatives(psi.values())
            .ok_or_else(|| Error::Unsupported("nonlinearity has no pointwise derivative".into()))?;
        let w = &self.weights;
        let pv = psi.values();

        let mut res = vec![0.0; 2 * m + 2];
        for i in 0..m {
            let r = ap.values()[i] - mu * pv[i] - f.values()[i] * eps;
            res[i] = r.re;
            res[m + i] = r.im;
        }
        res[2 * m] = pv.iter().zip(w).map(|(z, w)| w * z.norm_sqr()).sum::<f64>() - 1.0;
        res[2 * m + 1] = self.gauge.value(pv).im;

        let mut t = Vec::with_capacity(4 * a.matrix().nnz() + 4 * m);
        for (i, j, v) in a.matrix().iter() {
            t.push((i, j, v.re));
            t.push((i, j + m, -v.im));
            t.push((i + m, j, v.im));
            t.push((i + m, j + m, v.re));
        }
        for i in 0..m {
            let s = alpha[i] + beta[i];
            let d = alpha[i] - beta[i];
            t.push((i, i, -mu.re - eps * s.re));
            t.push((i, i + m, mu.im + eps * d.im));
            t.push((i + m, i, -mu.im - eps * s.im));
            t.push((i + m, i + m, -mu.re - eps * d.re));
        }
        let jac = Csr::from_triplets(2 * m, t)?;

        let mut col_a = vec![0.0; 2 * m];
        let mut col_b = vec![0.0; 2 * m];
        let mut row_norm = vec![0.0; 2 * m];
        let mut row_phase = vec![0.0; 2 * m];
        for i in 0..m {
            col_a[i] = -pv[i].re;
            col_a[m + i] = -pv[i].im;
            col_b[i] = pv[i].im;
            col_b[m + i] = -pv[i].re;
            row_norm[i] = 2.0 * w[i] * pv[i].re;
            row_norm[m + i] = 2.0 * w[i] * pv[i].im;
        }
        for (node, c) in [(self.gauge.node, self.gauge.c0), (self.gauge.partner, self.gauge.c1)] {
            row_phase[node] += c.im;
            row_phase[m + node] += c.re;
        }

        let dp: Vec<c64> = match &self.param {
            Param::Eps => f.values().iter().map(|v| -v).collect(),
            Param::Model { delta, .. } => delta.apply(&psi)?.into_values(),
        };
        let mut col_p = vec![0.0; 2 * m];
        for (i, z) in dp.iter().enumerate() {
            col_p[i] = z.re;
            col_p[m + i] = z.im;
        }

        let peak = (0..m)
            .max_by(|&i, &j| pv[i].norm().total_cmp(&pv[j].norm()))
            .unwrap_or(0);
        let b = self.norm_a.max(1.0);
        Ok(Lin {
            jac,
            col_a,
            col_b,
            col_p,
            row_norm,
            row_phase,
            res,
            boost: vec![(peak, b), (peak + m, b)],
        })
    }

    fn residual_norm(&self, res: &[f64]) -> f64 {
        let m = self.m();
        let field: f64 = (0..m)
            .map(|i| self.weights[i] * (res[i] * res[i] + res[m + i] * res[m + i]))
            .sum::<f64>()
            .sqrt();
        field + res[2 * m].abs() + res[2 * m + 1].abs()
    }

    fn natural_borders(&self, lin: &Lin) -> Borders<f64> {
        Borders {
            cols: vec![lin.col_a.clone(), lin.col_b.clone()],
            rows: vec![lin.row_norm.clone(), lin.row_phase.clone()],
            corner: vec![0.0; 4],
        }
    }

    fn arc_borders(&self, lin: &Lin, tangent: &[f64]) -> Borders<f64> {
        let m = self.m();
        let mut row = vec![0.0; 2 * m];
        for i in 0..m {
            row[i] = self.weights[i] * tangent[i];
            row[m + i] = self.weights[i] * tangent[m + i];
        }
        let mut corner = vec![0.0; 9];
        corner[6] = tangent[2 * m];
        corner[7] = tangent[2 * m + 1];
        corner[8] = tangent[2 * m + 2];
        Borders {
            cols: vec![lin.col_a.clone(), lin.col_b.clone(), lin.col_p.clone()],
            rows: vec![lin.row_norm.clone(), lin.row_phase.clone(), row],
            corner,
        }
    }

    fn factor(&self, lin: &Lin, borders: Borders<f64>, with_transpose: bool) -> Result<BorderedLu<f64>> {
        let sym = self.symbolic.borrow().clone();
        let k = BorderedLu::new(lin.jac.clone(), borders, lin.boost.clone(), sym.as_ref(), with_transpose)?;
        if sym.is_none() {
            *self.symbolic.borrow_mut() = Some(k.symbolic().clone());
        }
        Ok(k)
    }

    /// Newton at fixed parameter, or on the hyperplane of `arc`.
    fn newton(&self, mut x: Vec<f64>, arc: Option<&ArcConstraint>, max_iter: usize) -> Result<Corrected> {
        let m = self.m();
        let tol = self.tol * (1.0 + self.norm_a);
        let mut last_step = f64::INFINITY;
        let mut prev = f64::INFINITY;
        let mut growth = 0;
        for it in 0..=max_iter {
            let lin = self.linearize(&x)?;
            let arc_res = arc.map(|c| theta_dot(&self.weights, c.tangent, &diff(&x, c.anchor)) - c.h);
            let rn = self.residual_norm(&lin.res) + arc_res.map_or(0.0, f64::abs);
            if !rn.is_finite() {
                return Err(Error::NewtonDiverged { iterations: it, residual: rn });
            }
            let scale = 1.0 + mu_of(&x, m).norm() + x[2 * m + 2].abs();
            if rn <= tol && last_step <= STEP_TOL * scale {
                return Ok(Corrected {
                    x,
                    lin,
                    iterations: it,
                    residual: rn,
                });
            }
            if rn > prev {
                growth += 1;
                if growth >= 4 {
                    return Err(Error::NewtonDiverged { iterations: it, residual: rn });
                }
            } else {
                growth = 0;
            }
            if it == max_iter {
                return Err(Error::NewtonDiverged { iterations: it, residual: rn });
            }
            prev = rn;
            let borders = match arc {
                Some(c) => self.arc_borders(&lin, c.tangent),
                None => self.natural_borders(&lin),
            };
            let k = self.factor(&lin, borders, false)?;
            let mut rhs: Vec<f64> = lin.res.iter().map(|v| -v).collect();
            if let Some(r) = arc_res {
                rhs.push(-r);
            }
            let dz = k.solve(&rhs, false)?;
            let upto = if arc.is_some() { 2 * m + 3 } else { 2 * m + 2 };
            for (xi, d) in x[..upto].iter_mut().zip(&dz) {
                *xi += d;
            }
            let mut step = dz.clone();
            step.resize(2 * m + 3, 0.0);
            last_step = theta_norm(&self.weights, &step);
        }
        unreachable!("loop returns on its last iteration")
    }

    /// Stability indicator, near-null vector and tangents at a converged
    /// point. `orient` is the previous arclength tangent, if any.
    fn analyze(&self, lin: &Lin, orient: Option<&[f64]>, warm: Option<&[f64]>) -> Result<Analysis> {
        let m = self.m();
        let n = 2 * m + 2;
        let knat = match self.factor(lin, self.natural_borders(lin), true) {
            Ok(k) => k,
            Err(Error::SingularSystem { .. }) => {
                return Ok(Analysis {
                    sv: 0.0,
                    null: None,
                    tangent: None,
                })
            }
            Err(e) => return Err(e),
        };

        // Scale to weighted-isometric coordinates with unit constraint rows.
        let mut dc = vec![1.0; n];
        let mut dr = vec![1.0; n];
        for i in 0..m {
            let s = self.weights[i].sqrt();
            dc[i] = 1.0 / s;
            dc[m + i] = 1.0 / s;
            dr[i] = s;
            dr[m + i] = s;
        }
        for (r, row) in [&lin.row_norm, &lin.row_phase].into_iter().enumerate() {
            let nrm = row.iter().zip(&dc).map(|(a, c)| (a * c) * (a * c)).sum::<f64>().sqrt();
            dr[2 * m + r] = if nrm > 0.0 { 1.0 / nrm } else { 1.0 };
        }
        let mut v: Vec<f64> = match warm {
            Some(w) if w.len() == n => w.iter().zip(&dc).map(|(a, c)| a / c).collect(),
            _ => {
                let mut rng = ChaCha8Rng::seed_from_u64(SV_SEED);
                (0..n).map(|_| rng.gen::<f64>() - 0.5).collect()
            }
        };
        let mut sv = f64::INFINITY;
        let mut ok = true;
        for _ in 0..SV_ITERATIONS {
            let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if !(nv > 0.0) || !nv.is_finite() {
                ok = false;
                break;
            }
            let y: Vec<f64> = v.iter().zip(&dc).map(|(a, c)| a / (c * nv)).collect();
            let y = knat.solve(&y, true)?;
            let y: Vec<f64> = y.iter().zip(&dr).map(|(a, r)| a / (r * r)).collect();
            let z = knat.solve(&y, false)?;
            let z: Vec<f64> = z.iter().zip(&dc).map(|(a, c)| a / c).collect();
            let nz = z.iter().map(|a| a * a).sum::<f64>().sqrt();
            if !nz.is_finite() {
                ok = false;
                break;
            }
            sv = 1.0 / nz.sqrt();
            v = z.iter().map(|a| a / nz).collect();
        }
        if !ok {
            sv = 0.0;
        }
        let null: Vec<f64> = v.iter().zip(&dc).map(|(a, c)| a * c).collect();

        let mut rhs: Vec<f64> = lin.col_p.iter().map(|v| -v).collect();
        rhs.extend([0.0, 0.0]);
        let dzdp = knat.solve(&rhs, false).ok().filter(|d| d.iter().all(|v| v.is_finite()));

        let tangent = match orient {
            Some(t) => {
                let kext = knat.rebordered(self.arc_borders(lin, t), false).ok();
                let mut e = vec![0.0; 2 * m + 3];
                e[2 * m + 2] = 1.0;
                kext.and_then(|k| k.solve(&e, false).ok())
            }
            None => dzdp.as_ref().map(|d| {
                let mut t = d.clone();
                t.push(1.0);
                t
            }),
        }
        .and_then(|mut t| {
            let nrm = theta_norm(&self.weights, &t);
            if nrm.is_finite() && nrm > 0.0 {
                t.iter_mut().for_each(|v| *v /= nrm);
                Some(t)
            } else {
                None
            }
        });
        Ok(Analysis {
            sv,
            null: ok.then_some(null),
            tangent,
        })
    }

    fn make_point(&self, c: &Corrected, an: &Analysis, signs: &[Option<f64>]) -> Result<BranchPoint> {
        let m = self.m();
        let p = c.x[2 * m + 2];
        let psi = GridFunction::new(self.problem.grid.clone(), psi_of(&c.x, m))?;
        let symmetry_residuals = symmetry_residuals(self.problem, &psi, signs)?;
        Ok(BranchPoint {
            param: p,
            eps: self.eps_at(p),
            gamma: self.gamma_at(p),
            mu: mu_of(&c.x, m),
            psi,
            newton_residual: c.residual,
            newton_iterations: c.iterations,
            symmetry_residuals,
            stability_indicator: an.sv,
            tangent: an.tangent.clone().map(Arc::new),
            null_vector: an.null.clone().map(Arc::new),
        })
    }
}

// ---------------------------------------------------------------------------
// Public entry points

/// Linear eigenpair as the `ε = 0` point of a branch: unit norm and gauge
/// fixed.
pub fn seed_from_triple(problem: &DiscretizedProblem, triple: &EigenTriple) -> Result<BranchPoint> {
    let mut psi = triple.psi0.values().to_vec();
    normalize(&mut psi, problem.grid.weights());
    symmetric_phase(problem, &mut psi);
    let gauge = choose_gauge(problem, &psi, None);
    gauge.fix(&mut psi);
    let psi = GridFunction::new(problem.grid.clone(), psi)?;
    let signs = linear_signs(problem, &psi)?;
    let symmetry_residuals = symmetry_residuals(problem, &psi, &signs)?;
    Ok(BranchPoint {
        param: 0.0,
        eps: 0.0,
        gamma: problem.spec.real("gamma").ok(),
        mu: triple.mu0,
        psi,
        newton_residual: f64::NAN,
        newton_iterations: 0,
        symmetry_residuals,
        stability_indicator: f64::NAN,
        tangent: None,
        null_vector: None,
    })
}

/// Corrects `predictor` to a solution at `ε = predictor.eps` on the operator
/// of `problem`.
pub fn newton_correct(
    problem: &DiscretizedProblem,
    predictor: &BranchPoint,
    constraints: &NewtonConstraints,
) -> Result<BranchPoint> {
    let psi = predictor.psi.values();
    if psi.len() != problem.grid.len() {
        return Err(Error::DimensionMismatch {
            expected: problem.grid.len(),
            found: psi.len(),
        });
    }
    let pair = choose_gauge(problem, psi, constraints.phase_node);
    let fam = Family::new(problem, "eps", predictor.eps, pair, constraints.newton_tol)?;
    let c = fam.newton(pack(psi, predictor.mu, predictor.eps), None, constraints.max_iterations)?;
    let an = fam.analyze(&c.lin, None, None)?;
    let psi = GridFunction::new(problem.grid.clone(), psi_of(&c.x, fam.m()))?;
    let signs = linear_signs(problem, &psi)?;
    fam.make_point(&c, &an, &signs)
}

/// Residual of a stored point against its defining system. Fails when the
/// Newton bound or either constraint is violated.
pub fn verify_point(problem: &DiscretizedProblem, branch: &Branch, point: &BranchPoint, newton_tol: f64) -> Result<f64> {
    let fam = Family::new(problem, &branch.parameter_name, point.eps, branch.gauge, newton_tol)?;
    let lin = fam.linearize(&point_x(point))?;
    let m = fam.m();
    let r = fam.residual_norm(&lin.res);
    let bound = newton_tol * (1.0 + fam.norm_a);
    let constraint = lin.res[2 * m].abs().max(lin.res[2 * m + 1].abs());
    if r > bound || constraint > newton_tol {
        return Err(Error::ResidualCheckFailed {
            residual: r.max(constraint),
            bound,
        });
    }
    Ok(r)
}

/// Continues the branch through `seed` to the parameter value `end`.
pub fn continue_branch(
    problem: &DiscretizedProblem,
    seed: &BranchPoint,
    cfg: &ContinuationConfig,
    parameter: &str,
    end: f64,
) -> std::result::Result<Branch, BranchFailure> {
    let fail = |error: Error, start: f64| BranchFailure {
        error,
        partial: Branch::empty(parameter, (start, end)),
    };
    if let Err(e) = cfg.validate() {
        return Err(fail(e, seed.param));
    }
    let mut psi = seed.psi.values().to_vec();
    symmetric_phase(problem, &mut psi);
    let pair = choose_gauge(problem, &psi, None);
    let fam = match Family::new(problem, parameter, seed.eps, pair, cfg.newton_tol) {
        Ok(f) => f,
        Err(e) => return Err(fail(e, seed.param)),
    };
    let start = fam.initial_param(seed.eps);
    let mut tracker = Tracker::new(fam, cfg.clone(), (start, end));
    tracker.run_from(pack(&psi, seed.mu, start), None)
}

/// Parameter values of the branch's markers plus any recorded indicator
/// minimum below `1e-6 ‖A‖_1` that no marker covers.
pub fn detect_bifurcation(branch: &Branch) -> Result<Vec<f64>> {
    if branch.points.len() < 3 {
        return Err(Error::InvalidSpec("bifurcation scan needs at least three points".into()));
    }
    let mut out: Vec<f64> = branch.bifurcation_markers.iter().map(|m| m.param).collect();
    let threshold = 1e-6 * branch.operator_norm;
    let sv: Vec<f64> = branch.points.iter().map(|p| p.stability_indicator).collect();
    for i in 1..sv.len() - 1 {
        if sv[i] <= threshold && sv[i] <= sv[i - 1] && sv[i] <= sv[i + 1] {
            let p = branch.points[i].param;
            if out.iter().all(|q| (q - p).abs() > 1e-3) {
                out.push(p);
            }
        }
    }
    Ok(out)
}

/// Starts the branch bifurcating at `marker` on `branch`.
///
/// `problem` must be the one the parent was continued with. The child is
/// continued in arclength mode over the parent's parameter range.
pub fn switch_branch(
    problem: &DiscretizedProblem,
    branch: &Branch,
    marker: &Marker,
    cfg: &ContinuationConfig,
) -> std::result::Result<Branch, BranchFailure> {
    let range = branch.range;
    let fail = |error: Error| BranchFailure {
        error,
        partial: Branch::empty(&branch.parameter_name, range),
    };
    cfg.validate().map_err(fail)?;
    let idx = marker.point;
    let point = branch
        .points
        .get(idx)
        .ok_or_else(|| fail(Error::InvalidSpec("marker does not refer to a branch point".into())))?;
    let fam = Family::new(problem, &branch.parameter_name, point.eps, branch.gauge, cfg.newton_tol)
        .map_err(fail)?;
    let m = fam.m();
    let w = fam.weights.clone();
    let xm = point_x(point);
    let lin = fam.linearize(&xm).map_err(fail)?;
    let an = fam.analyze(&lin, None, point.null_vector.as_deref().map(|v| v.as_slice())).map_err(fail)?;
    let null = an
        .null
        .ok_or_else(|| fail(Error::SwitchFailed("no near-null vector at the marker".into())))?;

    let tangent = point.tangent.as_deref().cloned().or_else(|| {
        let a = branch.points.get(idx.checked_sub(1)?)?;
        let b = branch.points.get(idx + 1)?;
        Some(diff(&point_x(b), &point_x(a)))
    });
    let mut v = null;
    v.push(0.0);
    if let Some(t) = tangent {
        let tt = theta_dot(&w, &t, &t);
        if tt > 0.0 {
            let c = theta_dot(&w, &v, &t) / tt;
            v.iter_mut().zip(&t).for_each(|(a, b)| *a -= c * b);
        }
    }
    let nv = theta_norm(&w, &v);
    if nv < 0.2 {
        return Err(fail(Error::SwitchFailed(format!(
            "marker at {} lies on a fold: the near-null vector is the branch tangent",
            marker.param
        ))));
    }
    v.iter_mut().for_each(|a| *a /= nv);

    let h = cfg.step;
    let mut last_err = None;
    for sign in [1.0, -1.0] {
        let pred: Vec<f64> = xm.iter().zip(&v).map(|(a, b)| a + sign * h * b).collect();
        let arc = ArcConstraint {
            tangent: &v,
            anchor: &xm,
            h: sign * h,
        };
        let c = match fam.newton(pred, Some(&arc), NEWTON_MAX) {
            Ok(c) => c,
            Err(e) => {
                last_err = Some(e);
                continue;
            }
        };
        if !cfg.complex_mu_allowed && mu_of(&c.x, m).im.abs() > 1e-6 * (1.0 + mu_of(&c.x, m).norm()) {
            last_err = Some(Error::SwitchFailed("child has complex μ".into()));
            continue;
        }
        // Reject a result that fell back onto the parent curve.
        let p_child = c.x[2 * m + 2];
        let mut parent = xm.clone();
        parent[2 * m + 2] = p_child;
        let distance = match fam.newton(parent, None, NEWTON_MAX) {
            Ok(pc) => {
                let mut d = diff(&c.x, &pc.x);
                d[2 * m + 2] = 0.0;
                theta_norm(&w, &d)
            }
            Err(_) => f64::INFINITY,
        };
        if distance < 0.25 * h {
            last_err = Some(Error::SwitchFailed("perturbation returned to the parent branch".into()));
            continue;
        }
        let marker_no = branch
            .bifurcation_markers
            .iter()
            .position(|mk| mk == marker)
            .unwrap_or(0);
        let mut child_cfg = cfg.clone();
        child_cfg.mode = ContinuationMode::Arclength;
        let mut tracker = Tracker::new(fam, child_cfg, range);
        tracker.branch_id = branch.branch_id * 10 + 1 + marker_no;
        tracker.parent_id = Some(branch.branch_id);
        tracker.signs_from_seed = true;
        let dir = diff(&c.x, &xm);
        return tracker.run_from(c.x, Some(dir));
    }
    Err(fail(Error::SwitchFailed(format!(
        "Newton failed for both perturbation signs ({})",
        last_err.map_or_else(|| "no attempt".to_string(), |e| e.to_string())
    ))))
}

// ---------------------------------------------------------------------------
// Branch tracking

struct Tracker<'a> {
    fam: Family<'a>,
    cfg: ContinuationConfig,
    range: (f64, f64),
    mode: ContinuationMode,
    dir: f64,
    end: f64,
    points: Vec<BranchPoint>,
    xs: Vec<Vec<f64>>,
    markers: Vec<Marker>,
    signs: Vec<Option<f64>>,
    signs_from_seed: bool,
    branch_id: usize,
    parent_id: Option<usize>,
}

type Step = (Corrected, Analysis);

impl<'a> Tracker<'a> {
    fn new(fam: Family<'a>, cfg: ContinuationConfig, range: (f64, f64)) -> Tracker<'a> {
        Tracker {
            mode: cfg.mode,
            dir: if range.1 >= range.0 { 1.0 } else { -1.0 },
            end: range.1,
            fam,
            cfg,
            range,
            points: Vec::new(),
            xs: Vec::new(),
            markers: Vec::new(),
            signs: Vec::new(),
            signs_from_seed: true,
            branch_id: 0,
            parent_id: None,
        }
    }

    fn m(&self) -> usize {
        self.fam.m()
    }

    fn branch(&self) -> Branch {
        Branch {
            branch_id: self.branch_id,
            parent_id: self.parent_id,
            parameter_name: match &self.fam.param {
                Param::Eps => "eps".to_string(),
                Param::Model { name, .. } => name.clone(),
            },
            points: self.points.clone(),
            bifurcation_markers: self.markers.clone(),
            operator_norm: self.fam.norm_a,
            gauge: self.fam.gauge,
            range: self.range,
        }
    }

    fn failure(&self, error: Error) -> BranchFailure {
        BranchFailure {
            error,
            partial: self.branch(),
        }
    }

    fn param(&self, i: usize) -> f64 {
        self.xs[i][2 * self.m() + 2]
    }

    fn tangent(&self, i: usize) -> Option<&[f64]> {
        self.points[i].tangent.as_deref().map(|v| v.as_slice())
    }

    fn push(&mut self, c: Corrected, an: Analysis) -> Result<()> {
        let point = self.fam.make_point(&c, &an, &self.signs)?;
        self.points.push(point);
        self.xs.push(c.x);
        Ok(())
    }

    fn insert(&mut self, at: usize, c: Corrected, an: Analysis) -> Result<()> {
        let point = self.fam.make_point(&c, &an, &self.signs)?;
        self.points.insert(at, point);
        self.xs.insert(at, c.x);
        for mk in &mut self.markers {
            if mk.point >= at {
                mk.point += 1;
            }
        }
        Ok(())
    }

    fn in_range(&self, p: f64) -> bool {
        let (lo, hi) = if self.range.0 <= self.range.1 {
            (self.range.0, self.range.1)
        } else {
            (self.range.1, self.range.0)
        };
        let slack = 1e-12 * (1.0 + lo.abs().max(hi.abs()));
        p >= lo - slack && p <= hi + slack
    }

    fn acceptable(&self, x: &[f64]) -> bool {
        let mu = mu_of(x, self.m());
        self.cfg.complex_mu_allowed || mu.im.abs() <= 1e-6 * (1.0 + mu.norm())
    }

    fn run_from(&mut self, x0: Vec<f64>, initial_direction: Option<Vec<f64>>) -> std::result::Result<Branch, BranchFailure> {
        let m = self.m();
        let first = match self.fam.newton(x0, None, NEWTON_MAX) {
            Ok(c) => c,
            Err(e) => return Err(self.failure(e)),
        };
        let mut an = match self.fam.analyze(&first.lin, None, None) {
            Ok(a) => a,
            Err(e) => return Err(self.failure(e)),
        };
        if let Some(d) = initial_direction {
            let n = theta_norm(&self.fam.weights, &d);
            if n > 0.0 {
                an.tangent = Some(d.iter().map(|v| v / n).collect());
            }
        } else if let Some(t) = an.tangent.as_mut() {
            if t[2 * m + 2] * self.dir < 0.0 {
                t.iter_mut().for_each(|v| *v = -*v);
            }
        }
        if self.signs_from_seed {
            let psi = match GridFunction::new(self.fam.problem.grid.clone(), psi_of(&first.x, m)) {
                Ok(p) => p,
                Err(e) => return Err(self.failure(e)),
            };
            self.signs = match linear_signs(self.fam.problem, &psi) {
                Ok(s) => s,
                Err(e) => return Err(self.failure(e)),
            };
        }
        if let Err(e) = self.push(first, an) {
            return Err(self.failure(e));
        }
        match self.run() {
            Ok(()) => Ok(self.branch()),
            Err(e) => Err(self.failure(e)),
        }
    }

    fn run(&mut self) -> Result<()> {
        let m = self.m();
        let mut h = self.cfg.step;
        let mut accepted = 0;
        let mut attempts = 0;
        while accepted < self.cfg.max_steps && attempts < 20 * self.cfg.max_steps {
            attempts += 1;
            let last = self.points.len() - 1;
            let p_last = self.param(last);
            if self.mode == ContinuationMode::Natural && (p_last - self.end).abs() <= 1e-14 * (1.0 + self.end.abs()) {
                break;
            }
            let step = match self.mode {
                ContinuationMode::Natural => self.natural_step(h),
                ContinuationMode::Arclength => self.arc_step(h),
            };
            let (c, an) = match step {
                Ok(s) if self.acceptable(&s.0.x) => s,
                _ => {
                    h *= 0.5;
                    if h < self.cfg.min_step {
                        return Err(Error::StepUnderflow { param: p_last, step: h });
                    }
                    continue;
                }
            };
            accepted += 1;
            let iterations = c.iterations;
            let p_new = c.x[2 * m + 2];
            let fold = self.mode == ContinuationMode::Arclength
                && self.cfg.detect_bifurcations
                && match (self.tangent(last), an.tangent.as_ref()) {
                    (Some(a), Some(b)) => a[2 * m + 2] * b[2 * m + 2] < 0.0,
                    _ => false,
                };
            if fold {
                let fold_at = self.refine_fold(last, &c.x)?;
                if let Some(fold_idx) = fold_at {
                    if self.cfg.complex_mu_allowed {
                        if let Some((cc, can)) = self.complex_restart(fold_idx) {
                            if let Some(mk) = self.markers.last_mut() {
                                mk.kind = MarkerKind::Collision;
                            }
                            let p_c = cc.x[2 * m + 2];
                            self.push(cc, can)?;
                            self.mode = ContinuationMode::Natural;
                            self.dir = (p_c - self.param(fold_idx)).signum();
                            if self.dir * (self.end - p_c) <= 0.0 {
                                break;
                            }
                            h = self.cfg.step;
                            continue;
                        }
                    }
                }
            }
            self.push(c, an)?;
            if self.cfg.detect_bifurcations {
                self.check_dip()?;
            }
            if iterations <= 3 {
                h = (h * 1.5).min(self.cfg.max_step);
            }
            if self.mode == ContinuationMode::Arclength && !self.in_range(p_new) {
                break;
            }
        }
        Ok(())
    }

    fn natural_step(&self, h: f64) -> Result<Step> {
        let m = self.m();
        let last = self.points.len() - 1;
        let p0 = self.param(last);
        let mut p1 = p0 + self.dir * h;
        if self.dir * (p1 - self.end) > 0.0 {
            p1 = self.end;
        }
        let x0 = &self.xs[last];
        let mut pred = if last >= 1 && (self.param(last - 1) - p0).abs() > 0.0 {
            let prev = &self.xs[last - 1];
            let t = (p1 - p0) / (p0 - self.param(last - 1));
            x0.iter().zip(prev).map(|(a, b)| a + t * (a - b)).collect::<Vec<f64>>()
        } else if let Some(d) = self.points[last].tangent.as_deref().filter(|t| t[2 * m + 2].abs() > 1e-12) {
            let s = (p1 - p0) / d[2 * m + 2];
            x0.iter().zip(d.iter()).map(|(a, b)| a + s * b).collect()
        } else {
            x0.clone()
        };
        pred[2 * m + 2] = p1;
        let c = self.fam.newton(pred, None, STEP_NEWTON_MAX)?;
        let warm = self.points[last].null_vector.as_deref().map(|v| v.as_slice());
        let an = self.fam.analyze(&c.lin, None, warm)?;
        Ok((c, an))
    }

    fn arc_probe(&self, from: usize, s: f64, pred: Vec<f64>) -> Result<Step> {
        let t = self
            .tangent(from)
            .ok_or(Error::SingularSystem { pivot: 0.0 })?
            .to_vec();
        let arc = ArcConstraint {
            tangent: &t,
            anchor: &self.xs[from],
            h: s,
        };
        let c = self.fam.newton(pred, Some(&arc), STEP_NEWTON_MAX)?;
        let warm = self.points[from].null_vector.as_deref().map(|v| v.as_slice());
        let an = self.fam.analyze(&c.lin, Some(&t), warm)?;
        Ok((c, an))
    }

    fn arc_step(&self, h: f64) -> Result<Step> {
        let last = self.points.len() - 1;
        let t = self.tangent(last).ok_or(Error::SingularSystem { pivot: 0.0 })?;
        let pred: Vec<f64> = self.xs[last].iter().zip(t).map(|(a, b)| a + h * b).collect();
        self.arc_probe(last, h, pred)
    }

    /// Bisects the sign change of the parameter component of the tangent
    /// between point `a` and the candidate `xb`. Inserts the fold point and
    /// its marker; returns its index.
    fn refine_fold(&mut self, a: usize, xb: &[f64]) -> Result<Option<usize>> {
        let m = self.m();
        let w = self.fam.weights.clone();
        let ta = match self.tangent(a) {
            Some(t) => t.to_vec(),
            None => return Ok(None),
        };
        let xa = self.xs[a].clone();
        let sb = theta_dot(&w, &ta, &diff(xb, &xa));
        let sign_a = ta[2 * m + 2].signum();
        let (mut lo, mut hi) = (0.0, sb);
        let mut best: Option<Step> = None;
        for _ in 0..40 {
            if (hi - lo).abs() <= 1e-5 {
                break;
            }
            let s = 0.5 * (lo + hi);
            let pred = lerp(&xa, xb, s / sb);
            let (c, an) = match self.arc_probe(a, s, pred) {
                Ok(r) => r,
                Err(_) => break,
            };
            let tp = an.tangent.as_ref().map_or(0.0, |t| t[2 * m + 2]);
            if tp * sign_a > 0.0 {
                lo = s;
            } else {
                hi = s;
            }
            best = Some((c, an));
        }
        let Some((c, an)) = best else { return Ok(None) };
        let param = c.x[2 * m + 2];
        let at = a + 1;
        self.insert(at, c, an)?;
        self.markers.push(Marker {
            param,
            kind: MarkerKind::Fold,
            point: at,
        });
        Ok(Some(at))
    }

    /// Seeds the complex-conjugate continuation beyond the fold at `f`.
    fn complex_restart(&self, f: usize) -> Option<Step> {
        let m = self.m();
        let w = &self.fam.weights;
        if f == 0 {
            return None;
        }
        let xf = &self.xs[f];
        let xp = &self.xs[f - 1];
        let tf = self.tangent(f)?;
        let mut d = diff(xp, xf);
        d[2 * m + 2] = 0.0;
        let s2 = theta_dot(w, &d, &d);
        let (pf, pp) = (xf[2 * m + 2], xp[2 * m + 2]);
        if !(s2 > 0.0) || pf == pp {
            return None;
        }
        // Near the fold p ≈ p_f - κ s²; beyond it s is imaginary.
        let kappa = (pf - pp) / s2;
        let side = (pf - pp).signum();
        let delta = 0.25 * self.cfg.step;
        let p_new = pf + side * delta;
        let amp = (delta / kappa.abs()).sqrt();
        let psi_f = psi_of(xf, m);
        let psi_t = psi_of(tf, m);
        let i = c64::new(0.0, 1.0);
        let psi: Vec<c64> = psi_f.iter().zip(&psi_t).map(|(a, b)| a + i * amp * b).collect();
        let mu = mu_of(xf, m) + i * amp * mu_of(tf, m);

        let mut candidates = vec![pack(&psi, mu, p_new)];
        if self.fam.eps_at(p_new) == 0.0 {
            if let Ok(a) = self.fam.operator(p_new) {
                if let Ok(tr) = compute_eigentriple_with(&a, mu, EigenOptions::default()) {
                    let mut v = tr.psi0.values().to_vec();
                    normalize(&mut v, w);
                    self.fam.gauge.fix(&mut v);
                    candidates.push(pack(&v, tr.mu0, p_new));
                }
            }
        }
        for pred in candidates {
            let Ok(mut c) = self.fam.newton(pred, None, NEWTON_MAX) else { continue };
            let mu = mu_of(&c.x, m);
            if mu.im.abs() <= 1e-6 * (1.0 + mu.norm()) {
                continue;
            }
            if mu.im < 0.0 {
                // Store the partner (Cψ, conj μ) with Im μ > 0.
                let op = self.fam.problem.primary_antilinear()?;
                let partner = op.apply_slice(&psi_of(&c.x, m));
                let Ok(pc) = self.fam.newton(pack(&partner, mu.conj(), c.x[2 * m + 2]), None, NEWTON_MAX) else {
                    continue;
                };
                c = pc;
            }
            let an = self.fam.analyze(&c.lin, None, None).ok()?;
            return Some((c, an));
        }
        None
    }

    /// Refines an indicator minimum at the second-to-last point by golden
    /// section and records a marker when the dip is sharp.
    fn check_dip(&mut self) -> Result<()> {
        let n = self.points.len();
        if n < 3 {
            return Ok(());
        }
        let (a, i, b) = (n - 3, n - 2, n - 1);
        let sv = |k: usize| self.points[k].stability_indicator;
        if !(sv(i) < sv(a) && sv(i) <= sv(b)) {
            return Ok(());
        }
        if sv(i) > 0.5 * sv(a).max(sv(b)) {
            return Ok(());
        }
        if self.markers.iter().any(|mk| mk.point >= a) {
            return Ok(());
        }
        let m = self.m();
        let w = self.fam.weights.clone();
        let xa = self.xs[a].clone();
        let xb = self.xs[b].clone();
        let arclength = self.mode == ContinuationMode::Arclength && self.tangent(a).is_some();
        let coord = |x: &[f64]| -> f64 {
            if arclength {
                theta_dot(&w, self.tangent(a).unwrap(), &diff(x, &xa))
            } else {
                x[2 * m + 2] - xa[2 * m + 2]
            }
        };
        let sb = coord(&xb);
        if sb == 0.0 {
            return Ok(());
        }
        let probe = |s: f64| -> Option<Step> {
            let pred = lerp(&xa, &xb, s / sb);
            if arclength {
                self.arc_probe(a, s, pred).ok()
            } else {
                let mut pred = pred;
                pred[2 * m + 2] = xa[2 * m + 2] + s;
                let c = self.fam.newton(pred, None, STEP_NEWTON_MAX).ok()?;
                let an = self.fam.analyze(&c.lin, None, None).ok()?;
                Some((c, an))
            }
        };
        let threshold = 1e-6 * self.fam.norm_a;
        let neighbours = sv(a).min(sv(b));
        let (mut lo, mut hi) = (0.0f64, sb);
        let mut c_s = coord(&self.xs[i]);
        let mut c_sv = sv(i);
        let mut best: Option<Step> = None;
        for _ in 0..40 {
            if (hi - lo).abs() <= 1e-4 || c_sv <= threshold {
                break;
            }
            let d = if (hi - c_s).abs() > (c_s - lo).abs() {
                c_s + 0.381_966 * (hi - c_s)
            } else {
                c_s - 0.381_966 * (c_s - lo)
            };
            let Some((cd, and)) = probe(d) else { break };
            let d_sv = and.sv;
            let right = (d - c_s) * sb > 0.0;
            if d_sv < c_sv {
                if right {
                    lo = c_s;
                } else {
                    hi = c_s;
                }
                c_s = d;
                c_sv = d_sv;
                best = Some((cd, and));
            } else if right {
                hi = d;
            } else {
                lo = d;
            }
        }
        if c_sv > threshold.max(0.1 * neighbours) {
            return Ok(());
        }
        let (param, at) = match best {
            Some((c, an)) => {
                let param = c.x[2 * m + 2];
                let at = if coord(&c.x) * sb < coord(&self.xs[i]) * sb { i } else { i + 1 };
                self.insert(at, c, an)?;
                (param, at)
            }
            None => (self.param(i), i),
        };
        if self
            .markers
            .iter()
            .all(|mk| (mk.param - param).abs() > 1e-3)
        {
            self.markers.push(Marker {
                param,
                kind: MarkerKind::Bifurcation,
                point: at,
            });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Output

pub const CSV_HEADER: &str = "branch_id,parent_id,param_name,param_value,eps,gamma,re_mu,im_mu,norm_psi,newton_residual,sv_min,sym_PT,sym_P1T,sym_P2T,sym_lin,sym_lin_sign,marker";

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_row(branch: &Branch, p: &BranchPoint, marker: bool) -> String {
    let sym = |names: &[&str]| -> String {
        p.symmetry_residuals
            .iter()
            .find(|s| names.contains(&s.name.as_str()))
            .map_or(String::new(), |s| num(s.residual))
    };
    let lin = p
        .symmetry_residuals
        .iter()
        .find(|s| matches!(s.name.as_str(), "P" | "P1" | "P2"));
    let fields = [
        branch.branch_id.to_string(),
        branch.parent_id.map_or(String::new(), |v| v.to_string()),
        branch.parameter_name.clone(),
        num(p.param),
        num(p.eps),
        p.gamma.map_or(String::new(), num),
        num(p.mu.re),
        num(p.mu.im),
        num(p.psi.norm()),
        num(p.newton_residual),
        num(p.stability_indicator),
        sym(&["PT", "lattice-PT"]),
        sym(&["P1T"]),
        sym(&["P2T"]),
        lin.map_or(String::new(), |s| num(s.residual)),
        lin.and_then(|s| s.sign).map_or(String::new(), |s| format!("{}", s as i32)),
        if marker { "1" } else { "0" }.to_string(),
    ];
    fields.join(",")
}

/// One row per point, then one `marker=1` row per marker.
pub fn write_branch_csv(branches: &[Branch], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for b in branches {
        for p in &b.points {
            writeln!(out, "{}", csv_row(b, p, false))?;
        }
        for mk in &b.bifurcation_markers {
            if let Some(p) = b.points.get(mk.point) {
                writeln!(out, "{}", csv_row(b, p, true))?;
            }
        }
    }
    Ok(())
}

pub fn snapshot_name(branch_id: usize, k: usize) -> String {
    format!("branch{branch_id}_pt{k}.json")
}

/// First, last and marker points.
pub fn labeled_points(branch: &Branch) -> Vec<usize> {
    let mut v: Vec<usize> = branch.bifurcation_markers.iter().map(|m| m.point).collect();
    if !branch.points.is_empty() {
        v.push(0);
        v.push(branch.points.len() - 1);
    }
    v.sort_unstable();
    v.dedup();
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_model, ModelSpec};
    use crate::spectra::compute_eigentriple;

    fn dimer(gamma: f64) -> DiscretizedProblem {
        build_model(&ModelSpec::new("dnls").param("N", 1.0).param("gamma", gamma)).unwrap()
    }

    fn seed(problem: &DiscretizedProblem, target: f64) -> BranchPoint {
        let t = compute_eigentriple(problem, c64::new(target, 0.0)).unwrap();
        seed_from_triple(problem, &t).unwrap()
    }

    #[test]
    fn exact_predictor_converges_at_once() {
        let p = dimer(0.3);
        let s = seed(&p, 0.9);
        let c = newton_correct(&p, &s, &NewtonConstraints::default()).unwrap();
        assert!(c.newton_iterations <= 2);
        assert!((c.mu - s.mu).norm() < 1e-12);
    }

    #[test]
    fn symmetric_dimer_branch_is_exact() {
        // At γ = 0 the in-phase mode has |ψ_i|² = 1/2 and μ = 1 - ε/2.
        let p = dimer(0.0);
        let s = seed(&p, 1.0);
        let cfg = ContinuationConfig {
            step: 0.1,
            ..Default::default()
        };
        let b = continue_branch(&p, &s, &cfg, "eps", 1.0).unwrap();
        assert!((b.points.last().unwrap().param - 1.0).abs() < 1e-14);
        for q in &b.points {
            assert!((q.mu.re - (1.0 - q.eps / 2.0)).abs() < 1e-10, "{} {}", q.eps, q.mu);
        }
        assert!(b.bifurcation_markers.is_empty());
    }

    #[test]
    fn antisymmetric_dimer_branch_splits_at_two() {
        // ψ2 = -ψ1 loses stability when ε|ψ1 ψ2| reaches 1, i.e. ε = 2.
        let p = dimer(0.0);
        let s = seed(&p, -1.0);
        let cfg = ContinuationConfig {
            step: 0.1,
            mode: ContinuationMode::Arclength,
            ..Default::default()
        };
        let b = continue_branch(&p, &s, &cfg, "eps", 3.0).unwrap();
        let found = detect_bifurcation(&b).unwrap();
        assert!(found.iter().any(|v| (v - 2.0).abs() < 1e-2), "{found:?}");
        let mk = *b
            .bifurcation_markers
            .iter()
            .find(|m| (m.param - 2.0).abs() < 1e-2)
            .unwrap();
        let child = switch_branch(&p, &b, &mk, &cfg).unwrap();
        assert_eq!(child.parent_id, Some(b.branch_id));
        let q = child.points.last().unwrap();
        // Asymmetric states: ψ1 ψ2 = -1/ε on the unit circle, hence μ = -ε.
        assert!((q.mu.re + q.eps).abs() < 1e-8, "{} {}", q.eps, q.mu);
        assert!(q.symmetry_residual("lattice-PT").unwrap().residual > 1e-2);
    }

    #[test]
    fn linear_collision_is_a_fold_then_complex() {
        let p = dimer(0.0);
        let s = seed(&p, 1.0);
        let cfg = ContinuationConfig {
            step: 0.05,
            mode: ContinuationMode::Arclength,
            complex_mu_allowed: true,
            ..Default::default()
        };
        let b = continue_branch(&p, &s, &cfg, "gamma", 1.5).unwrap();
        let mk = b.bifurcation_markers[0];
        assert_eq!(mk.kind, MarkerKind::Collision);
        assert!((mk.param - 1.0).abs() < 1e-3, "{}", mk.param);
        let last = b.points.last().unwrap();
        assert!((last.param - 1.5).abs() < 1e-12);
        assert!((last.mu - c64::new(0.0, 1.25f64.sqrt())).norm() < 1e-9, "{}", last.mu);
        // In real arithmetic the only other solution curve through the
        // collision is the complex pair, so a real-only switch must fail.
        let real = ContinuationConfig {
            complex_mu_allowed: false,
            ..cfg
        };
        let err = switch_branch(&p, &b, &mk, &real).unwrap_err();
        assert_eq!(err.error.code(), "SwitchFailed");
    }

    #[test]
    fn csv_has_exact_header_and_marker_rows() {
        let p = dimer(0.2);
        let s = seed(&p, 0.9);
        let b = continue_branch(&p, &s, &ContinuationConfig::default(), "eps", 0.2).unwrap();
        let mut out = Vec::new();
        write_branch_csv(std::slice::from_ref(&b), &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(CSV_HEADER));
        assert_eq!(text.lines().count(), 1 + b.points.len() + b.bifurcation_markers.len());
        for line in text.lines().skip(1) {
            assert_eq!(line.split(',').count(), 17);
        }
    }

    #[test]
    fn wire_is_unsupported() {
        let p = build_model(&ModelSpec::new("wire").param("I", 0.5).resolution(64)).unwrap();
        let t = compute_eigentriple(&p, c64::new(1.0, 0.0));
        if let Ok(t) = t {
            let s = seed_from_triple(&p, &t).unwrap();
            let e = newton_correct(&p, &s, &NewtonConstraints::default()).unwrap_err();
            assert_eq!(e.code(), "Unsupported");
        }
    }
}
