//! Problem builders and closed-form oracles.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, PI};
use std::sync::Arc;

use num_complex::Complex64 as c64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BoundaryKind, Grid};
use crate::gridfn::GridFunction;
use crate::nonlinearity::{NonlinearityConfig, NonlinearitySpec};
use crate::sparse::SparseOperator;
use crate::symmetry::{operator_commutation_residual, SymmetryOp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    ToyRobin,
    #[serde(rename = "sho6_2d")]
    Sho6,
    #[serde(rename = "gauss9_2d")]
    Gauss9,
    Dnls,
    TwoDelta,
    Wire,
    PerBloch,
}

impl ModelKind {
    pub fn parse(name: &str) -> Result<ModelKind> {
        Ok(match name {
            "toy_robin" => ModelKind::ToyRobin,
            "sho6_2d" => ModelKind::Sho6,
            "gauss9_2d" => ModelKind::Gauss9,
            "dnls" => ModelKind::Dnls,
            "two_delta" => ModelKind::TwoDelta,
            "wire" => ModelKind::Wire,
            "per_bloch" => ModelKind::PerBloch,
            _ => return Err(Error::UnknownModel(name.to_string())),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::ToyRobin => "toy_robin",
            ModelKind::Sho6 => "sho6_2d",
            ModelKind::Gauss9 => "gauss9_2d",
            ModelKind::Dnls => "dnls",
            ModelKind::TwoDelta => "two_delta",
            ModelKind::Wire => "wire",
            ModelKind::PerBloch => "per_bloch",
        }
    }

    fn default_half_width(self) -> f64 {
        match self {
            ModelKind::ToyRobin => FRAC_PI_2,
            ModelKind::Sho6 => 8.0,
            ModelKind::Gauss9 => 13.0,
            ModelKind::Dnls => 0.0,
            ModelKind::TwoDelta => 20.0,
            ModelKind::Wire => 1.0,
            ModelKind::PerBloch => PI,
        }
    }

    fn default_n(self) -> usize {
        match self {
            ModelKind::ToyRobin => 2048,
            ModelKind::Sho6 => 161,
            ModelKind::Gauss9 => 131,
            ModelKind::Dnls => 2,
            ModelKind::TwoDelta => 2001,
            ModelKind::Wire => 511,
            ModelKind::PerBloch => 512,
        }
    }

    /// Symmetries every instance of the model carries.
    fn symmetry_names(self) -> &'static [&'static str] {
        match self {
            ModelKind::Sho6 => &["PT", "P1T", "P2"],
            ModelKind::Gauss9 => &["P1T"],
            ModelKind::Dnls => &["lattice-PT"],
            _ => &["PT"],
        }
    }

    /// Parameters that may be varied by continuation.
    pub fn continuable(self) -> &'static [&'static str] {
        match self {
            ModelKind::ToyRobin => &["alpha"],
            ModelKind::Sho6 | ModelKind::Gauss9 => &["gamma", "v0"],
            ModelKind::Dnls | ModelKind::TwoDelta | ModelKind::PerBloch => &["gamma"],
            ModelKind::Wire => &["I"],
        }
    }
}

/// A real parameter or a complex one written as `[re, im]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Real(f64),
    Complex([f64; 2]),
}

/// Model selection as read from a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub model: String,
    #[serde(default)]
    pub params: BTreeMap<String, ParamValue>,
    /// Nodes per axis (sites per half chain for `dnls` when `N` is absent).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub half_width: Option<f64>,
    /// Offset of the domain centre. Any nonzero offset breaks the reflection
    /// symmetry of the grid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nonlinearity: Option<NonlinearityConfig>,
}

impl ModelSpec {
    pub fn new(model: &str) -> ModelSpec {
        ModelSpec {
            model: model.to_string(),
            params: BTreeMap::new(),
            n: None,
            half_width: None,
            center: None,
            nonlinearity: None,
        }
    }

    pub fn param(mut self, name: &str, value: f64) -> ModelSpec {
        self.params.insert(name.to_string(), ParamValue::Real(value));
        self
    }

    pub fn resolution(mut self, n: usize) -> ModelSpec {
        self.n = Some(n);
        self
    }

    pub fn with_half_width(mut self, r: f64) -> ModelSpec {
        self.half_width = Some(r);
        self
    }

    pub fn kind(&self) -> Result<ModelKind> {
        ModelKind::parse(&self.model)
    }

    pub fn real(&self, name: &str) -> Result<f64> {
        match self.params.get(name) {
            Some(ParamValue::Real(v)) if v.is_finite() => Ok(*v),
            Some(ParamValue::Complex([re, im])) if *im == 0.0 && re.is_finite() => Ok(*re),
            Some(_) => Err(Error::InvalidSpec(format!("parameter `{name}` must be a finite real"))),
            None => Err(Error::InvalidSpec(format!(
                "model `{}` needs parameter `{name}`",
                self.model
            ))),
        }
    }

    fn real_or(&self, name: &str, default: f64) -> Result<f64> {
        if self.params.contains_key(name) {
            self.real(name)
        } else {
            Ok(default)
        }
    }

    pub fn half_width_or_default(&self) -> Result<f64> {
        Ok(self.half_width.unwrap_or(self.kind()?.default_half_width()))
    }
}

/// An assembled problem: operator, grid, nonlinearity and symmetries.
#[derive(Debug, Clone)]
pub struct DiscretizedProblem {
    pub operator: SparseOperator,
    pub grid: Arc<Grid>,
    pub nonlinearity: NonlinearitySpec,
    pub symmetries: Vec<SymmetryOp>,
    pub spec: ModelSpec,
    pub kind: ModelKind,
    /// Node used to fix the gauge of nonlinear solutions.
    pub phase_node: usize,
}

impl DiscretizedProblem {
    /// The first declared antilinear symmetry.
    pub fn primary_antilinear(&self) -> Option<&SymmetryOp> {
        self.symmetries.iter().find(|s| s.is_antilinear())
    }

    pub fn symmetry(&self, name: &str) -> Option<&SymmetryOp> {
        self.symmetries.iter().find(|s| s.name() == name)
    }

    /// Same model with one parameter changed.
    pub fn rebuild_with(&self, name: &str, value: f64) -> Result<DiscretizedProblem> {
        let spec = self.spec.clone().param(name, value);
        let mut p = build_model(&spec)?;
        p.nonlinearity = self.nonlinearity.clone();
        for s in &mut p.symmetries {
            if let Some(old) = self.symmetry(s.name()) {
                s.expected_sign = old.expected_sign;
            }
        }
        Ok(p)
    }
}

pub fn build_model(spec: &ModelSpec) -> Result<DiscretizedProblem> {
    let kind = spec.kind()?;
    if let Some(c) = &spec.center {
        if c.iter().any(|&v| v != 0.0) {
            return Err(Error::NonSymmetricGrid(format!(
                "{} declares reflection symmetries; the domain must be centred",
                kind.name()
            )));
        }
    }
    let r = spec.half_width_or_default()?;
    if kind != ModelKind::Dnls && !(r > 0.0 && r.is_finite()) {
        return Err(Error::InvalidSpec(format!("half_width must be positive, got {r}")));
    }
    let n = spec.n.unwrap_or(kind.default_n());
    if kind != ModelKind::Dnls && n < 16 {
        return Err(Error::InvalidSpec(format!("resolution must be at least 16, got {n}")));
    }
    let (grid, entries, phase_point) = match kind {
        ModelKind::ToyRobin => toy_robin(spec, n, r)?,
        ModelKind::Sho6 => {
            let gamma = spec.real("gamma")?;
            schrodinger_2d(n, r, vec![0.0, 0.0], |x1, x2| {
                let rho2 = x1 * x1 + x2 * x2;
                c64::new(0.5 * rho2, gamma * 2.0 * x1 / (rho2 + 2.0))
            })?
        }
        ModelKind::Gauss9 => {
            let gamma = spec.real("gamma")?;
            let v0 = spec.real_or("v0", 1.0)?;
            let a = spec.real_or("a", 1.5)?;
            schrodinger_2d(n, r, vec![0.0, 2.0], |x1, x2| {
                let e = |s1: f64, s2: f64| (-(x1 - s1).powi(2) - (x2 - s2).powi(2)).exp();
                let (pp, mp, pm, mm) = (e(a, a), e(-a, a), e(a, -a), e(-a, -a));
                c64::new(
                    -3.0 * v0 * (pp + mp) - 2.0 * v0 * (pm + mm),
                    -2.0 * gamma * (pp - mp) - gamma * (pm - mm),
                )
            })?
        }
        ModelKind::Dnls => dnls(spec)?,
        ModelKind::TwoDelta => two_delta(spec, n, r)?,
        ModelKind::Wire => {
            let current = spec.real("I")?;
            let grid = Grid::interior_1d(n, -r, r)?;
            let h = grid.spacing();
            let t = laplacian_1d(&grid, |x| c64::new(0.0, -x * current), h, None);
            (grid, t, vec![0.0])
        }
        ModelKind::PerBloch => {
            let gamma = spec.real("gamma")?;
            let k = spec.real("k")?;
            let km = k.rem_euclid(2.0 * PI);
            if km.min(2.0 * PI - km) < 1e-12 || (km - PI).abs() < 1e-12 {
                return Err(Error::DegenerateParameter(format!(
                    "Bloch phase k = {k} gives double eigenvalues (k must avoid 0 and π)"
                )));
            }
            let grid = Grid::periodic_1d(n, -r, r, k)?;
            let h = grid.spacing();
            let t = laplacian_1d(
                &grid,
                |x| c64::new(-x.cos().powi(2), -gamma * (2.0 * x).sin()),
                h,
                Some(c64::from_polar(1.0, k)),
            );
            (grid, t, vec![0.0])
        }
    };
    let grid = Arc::new(grid);
    let operator = SparseOperator::from_triplets(grid.clone(), entries)?;
    let nonlinearity = match &spec.nonlinearity {
        Some(cfg) => cfg.resolve(grid.len())?,
        None => match kind {
            ModelKind::Dnls => NonlinearitySpec::DnlsCubic,
            ModelKind::Wire => NonlinearitySpec::WireCombo,
            _ => NonlinearitySpec::Cubic,
        },
    };
    let mut symmetries = Vec::new();
    for name in kind.symmetry_names() {
        let op = SymmetryOp::from_grid(&grid, name)?;
        let res = operator_commutation_residual(&op, &operator)?;
        if res > 1e-10 {
            return Err(Error::NonSymmetricGrid(format!(
                "operator fails the {name} commutation gate (residual {res:.3e})"
            )));
        }
        symmetries.push(op);
    }
    let phase_node = grid.nearest_node(&phase_point);
    Ok(DiscretizedProblem {
        operator,
        grid,
        nonlinearity,
        symmetries,
        spec: spec.clone(),
        kind,
        phase_node,
    })
}

type Assembled = (Grid, Vec<(usize, usize, c64)>, Vec<f64>);

/// `-u'' + V u` on a 1D grid with Dirichlet ends, or with the quasi-periodic
/// wrap `u_n = phase u_0` when `wrap` is given.
fn laplacian_1d(
    grid: &Grid,
    potential: impl Fn(f64) -> c64,
    h: f64,
    wrap: Option<c64>,
) -> Vec<(usize, usize, c64)> {
    let n = grid.len();
    let off = c64::new(-1.0 / (h * h), 0.0);
    let mut t = Vec::with_capacity(3 * n);
    for i in 0..n {
        t.push((i, i, c64::new(2.0 / (h * h), 0.0) + potential(grid.node(i)[0])));
        if i > 0 {
            t.push((i, i - 1, off));
        }
        if i + 1 < n {
            t.push((i, i + 1, off));
        }
    }
    if let Some(phase) = wrap {
        t.push((n - 1, 0, off * phase));
        t.push((0, n - 1, off * phase.conj()));
    }
    t
}

fn toy_robin(spec: &ModelSpec, n: usize, r: f64) -> Result<Assembled> {
    let alpha = spec.real("alpha")?;
    let gamma = c64::new(0.0, alpha);
    let grid = Grid::closed_1d(n, -r, r, BoundaryKind::Robin { coefficient: gamma })?;
    let h = grid.spacing();
    let (d, o) = (c64::new(2.0 / (h * h), 0.0), c64::new(-1.0 / (h * h), 0.0));
    let last = n - 1;
    let mut t = Vec::with_capacity(3 * n);
    // Ghost nodes eliminated from u'(±r) + γ u(±r) = 0 by centered differences.
    t.push((0, 0, d - gamma * (2.0 / h)));
    t.push((0, 1, o * 2.0));
    for i in 1..last {
        t.push((i, i - 1, o));
        t.push((i, i, d));
        t.push((i, i + 1, o));
    }
    t.push((last, last - 1, o * 2.0));
    t.push((last, last, d + gamma * (2.0 / h)));
    Ok((grid, t, vec![0.0]))
}

fn schrodinger_2d(
    n: usize,
    r: f64,
    phase_point: Vec<f64>,
    potential: impl Fn(f64, f64) -> c64,
) -> Result<Assembled> {
    let grid = Grid::interior_2d(n, -r, r)?;
    let h = grid.spacing();
    let (d, o) = (c64::new(4.0 / (h * h), 0.0), c64::new(-1.0 / (h * h), 0.0));
    let mut t = Vec::with_capacity(5 * n * n);
    for i in 0..n {
        for j in 0..n {
            let k = i * n + j;
            let x = grid.node(k);
            t.push((k, k, d + potential(x[0], x[1])));
            if i > 0 {
                t.push((k, k - n, o));
            }
            if i + 1 < n {
                t.push((k, k + n, o));
            }
            if j > 0 {
                t.push((k, k - 1, o));
            }
            if j + 1 < n {
                t.push((k, k + 1, o));
            }
        }
    }
    Ok((grid, t, phase_point))
}

fn dnls(spec: &ModelSpec) -> Result<Assembled> {
    let half = match spec.params.get("N") {
        Some(_) => {
            let v = spec.real("N")?;
            if v.fract() != 0.0 || v < 1.0 {
                return Err(Error::InvalidSpec(format!("N must be a positive integer, got {v}")));
            }
            v as usize
        }
        None => spec.n.unwrap_or(ModelKind::Dnls.default_n()),
    };
    if half < 1 {
        return Err(Error::InvalidSpec("dnls needs N >= 1".into()));
    }
    let gamma = spec.real("gamma")?;
    let len = 2 * half;
    let grid = Grid::lattice(len)?;
    let one = c64::new(1.0, 0.0);
    let mut t = Vec::with_capacity(3 * len);
    for i in 0..len {
        // Site n = i + 1 carries iγ(-1)^n.
        let sign = if (i + 1) % 2 == 0 { 1.0 } else { -1.0 };
        t.push((i, i, c64::new(0.0, sign * gamma)));
        if i > 0 {
            t.push((i, i - 1, one));
        }
        if i + 1 < len {
            t.push((i, i + 1, one));
        }
    }
    Ok((grid, t, vec![0.0]))
}

/// `-u'' - (1 - iγ) δ(x - τ) u - (1 + iγ) δ(x + τ) u` with each delta
/// replaced by `1/h` at the nearest node (first-order accurate).
fn two_delta(spec: &ModelSpec, n: usize, r: f64) -> Result<Assembled> {
    let tau = spec.real("tau")?;
    let gamma = spec.real("gamma")?;
    if !(tau > 0.0 && tau < r) {
        return Err(Error::InvalidSpec(format!("tau must lie in (0, {r}), got {tau}")));
    }
    let grid = Grid::interior_1d(n, -r, r)?;
    let h = grid.spacing();
    let plus = grid.nearest_node(&[tau]);
    let minus = grid.reflection("P").map(|p| p[plus]).unwrap_or(grid.nearest_node(&[-tau]));
    let mut t = laplacian_1d(&grid, |_| c64::new(0.0, 0.0), h, None);
    t.push((plus, plus, c64::new(-1.0, gamma) / h));
    t.push((minus, minus, c64::new(-1.0, -gamma) / h));
    Ok((grid, t, vec![0.0]))
}

// ---------------------------------------------------------------------------
// Oracles

fn check_alpha(alpha: f64) -> Result<()> {
    if !alpha.is_finite() || alpha.fract() == 0.0 {
        return Err(Error::DegenerateParameter(format!(
            "alpha = {alpha} is an integer; the Robin spectrum has a double eigenvalue"
        )));
    }
    Ok(())
}

/// `[α², 1, 4, …, n_max²]` for the Robin problem with `γ = iα`.
pub fn toy_exact_spectrum(alpha: f64, n_max: usize) -> Result<Vec<c64>> {
    check_alpha(alpha)?;
    let mut out = vec![c64::new(alpha * alpha, 0.0)];
    out.extend((1..=n_max).map(|k| c64::new((k * k) as f64, 0.0)));
    Ok(out)
}

/// Right eigenfunction `ξ_n` of the Robin problem on `(-π/2, π/2)`.
pub fn toy_xi(alpha: f64, n: usize, x: f64) -> c64 {
    if n == 0 {
        return c64::from_polar(1.0 / PI.sqrt(), -alpha * x);
    }
    let k = n as f64;
    let s = k * (x + FRAC_PI_2);
    let amp = (2.0 / PI).sqrt() * k / (k * k + alpha * alpha).sqrt();
    c64::new(s.cos(), -alpha / k * s.sin()) * amp
}

/// Adjoint eigenfunction `ξ_n*`, scaled so that `⟨ξ_n, ξ_n*⟩ = 1`.
pub fn toy_xi_star(alpha: f64, n: usize, x: f64) -> c64 {
    let scale = if n == 0 {
        alpha * PI / (alpha * PI).sin()
    } else {
        let (k2, a2) = ((n * n) as f64, alpha * alpha);
        (k2 + a2) / (k2 - a2)
    };
    toy_xi(alpha, n, x).conj() * scale
}

/// The exact nonlinear solution `ψ(ε) = ξ_0` of the cubic Robin problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyExactState {
    pub alpha: f64,
}

impl ToyExactState {
    pub fn eval(&self, x: f64) -> c64 {
        toy_xi(self.alpha, 0, x)
    }

    pub fn sample(&self, grid: &Arc<Grid>) -> GridFunction {
        GridFunction::from_fn(grid.clone(), |x| self.eval(x[0]))
    }
}

/// `(α² - ε/π, ξ_0)`.
pub fn toy_exact_nonlinear_pair(alpha: f64, eps: f64) -> Result<(f64, ToyExactState)> {
    check_alpha(alpha)?;
    Ok((alpha * alpha - eps / PI, ToyExactState { alpha }))
}

/// `±(4 cos²(πj/(2N+1)) - γ²)^{1/2}`, `j = 1..N`, sorted by real then
/// imaginary part.
pub fn dnls_exact_spectrum(n: usize, gamma: f64) -> Vec<c64> {
    let mut out = Vec::with_capacity(2 * n);
    for j in 1..=n {
        let c = (PI * j as f64 / (2 * n + 1) as f64).cos();
        let root = c64::new(4.0 * c * c - gamma * gamma, 0.0).sqrt();
        out.push(root);
        out.push(-root);
    }
    out.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    out
}

/// Residual of the bound-state equation in `s = √(-μ)` for the two-delta
/// problem: `((2s - 1)² + γ²)/(1 + γ²) - e^{-4sτ}`.
pub fn twodelta_residual(tau: f64, gamma: f64, s: f64) -> f64 {
    ((2.0 * s - 1.0).powi(2) + gamma * gamma) / (1.0 + gamma * gamma) - (-4.0 * s * tau).exp()
}

/// Negative eigenvalues `μ = -s²` of the two-delta problem, by bisection on
/// `(0, 1/2)` and `(1/2, 1]`.
pub fn twodelta_eigenvalue_roots(tau: f64, gamma: f64) -> Result<Vec<f64>> {
    let g2 = gamma * gamma;
    if !(tau > 0.0) || (1.0 + g2) * tau <= 1.0 || (1.0 + g2) * (-2.0 * tau).exp() <= g2 {
        return Err(Error::NoBoundState(format!(
            "tau = {tau}, gamma = {gamma} violate (1+γ²)τ > 1 and (1+γ²)e^(-2τ) > γ²"
        )));
    }
    let f = |s: f64| twodelta_residual(tau, gamma, s);
    // The residual is positive just above zero: find a point where it is.
    let mut lo = 0.25;
    while f(lo) <= 0.0 {
        lo *= 0.5;
        if lo < 1e-300 {
            return Err(Error::NoBoundState("no sign change near s = 0".into()));
        }
    }
    let bisect = |mut a: f64, mut b: f64| {
        let fa = f(a);
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if m <= a || m >= b {
                break;
            }
            if (f(m) > 0.0) == (fa > 0.0) {
                a = m;
            } else {
                b = m;
            }
        }
        0.5 * (a + b)
    };
    let s1 = bisect(lo, 0.5);
    let s2 = bisect(0.5, 1.0);
    Ok(vec![-s2 * s2, -s1 * s1])
}
