//! Nonlinearities `f(ψ)` and their local data.

use num_complex::Complex64 as c64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Layout;
use crate::gridfn::GridFunction;

/// One term `a(x) ψ^p conj(ψ)^q` of a polynomial nonlinearity.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyTerm {
    pub p: u32,
    pub q: u32,
    /// Coefficient sampled at every node.
    pub coeff: Vec<c64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NonlinearitySpec {
    /// `|ψ|²ψ` pointwise.
    Cubic,
    /// `|ψ_n|²ψ_n` on a lattice.
    DnlsCubic,
    /// `|ψ|²ψ - iψ ∫_0^x Im(ψ conj ψ') ds` on a 1D grid.
    WireCombo,
    /// `Σ a_pq ψ^p conj(ψ)^q`, every term of total degree at least 2.
    Polynomial(Vec<PolyTerm>),
}

impl NonlinearitySpec {
    pub fn polynomial(terms: Vec<PolyTerm>) -> Result<NonlinearitySpec> {
        if let Some(t) = terms.iter().find(|t| t.p + t.q < 2) {
            return Err(Error::InvalidSpec(format!(
                "polynomial term a_{}{} must vanish (total degree below 2)",
                t.p, t.q
            )));
        }
        Ok(NonlinearitySpec::Polynomial(terms))
    }

    pub fn name(&self) -> &'static str {
        match self {
            NonlinearitySpec::Cubic => "cubic",
            NonlinearitySpec::DnlsCubic => "dnls_cubic",
            NonlinearitySpec::WireCombo => "wire_combo",
            NonlinearitySpec::Polynomial(_) => "polynomial",
        }
    }

    /// `q` with `f(aψ) = a^q f(ψ)` for `a > 0`, when it exists.
    pub fn homogeneity_degree(&self) -> Option<f64> {
        match self {
            NonlinearitySpec::Cubic | NonlinearitySpec::DnlsCubic | NonlinearitySpec::WireCombo => Some(3.0),
            NonlinearitySpec::Polynomial(terms) => {
                let d = terms.first()?.p + terms.first()?.q;
                terms.iter().all(|t| t.p + t.q == d).then_some(d as f64)
            }
        }
    }

    /// Pointwise derivatives `(∂f/∂ψ, ∂f/∂conj ψ)` at every node. `None` for
    /// the nonlocal wire nonlinearity.
    pub fn wirtinger_derivatives(&self, psi: &[c64]) -> Option<(Vec<c64>, Vec<c64>)> {
        match self {
            NonlinearitySpec::Cubic | NonlinearitySpec::DnlsCubic => Some((
                psi.iter().map(|v| c64::new(2.0 * v.norm_sqr(), 0.0)).collect(),
                psi.iter().map(|v| v * v).collect(),
            )),
            NonlinearitySpec::WireCombo => None,
            NonlinearitySpec::Polynomial(terms) => {
                let n = psi.len();
                let mut da = vec![c64::new(0.0, 0.0); n];
                let mut db = vec![c64::new(0.0, 0.0); n];
                for t in terms {
                    for i in 0..n {
                        let (z, zb) = (psi[i], psi[i].conj());
                        if t.p > 0 {
                            da[i] += t.coeff[i] * t.p as f64 * z.powu(t.p - 1) * zb.powu(t.q);
                        }
                        if t.q > 0 {
                            db[i] += t.coeff[i] * t.q as f64 * z.powu(t.p) * zb.powu(t.q - 1);
                        }
                    }
                }
                Some((da, db))
            }
        }
    }

    fn check_grid(&self, psi: &GridFunction) -> Result<()> {
        match self {
            NonlinearitySpec::WireCombo if psi.grid().dim() != 1 => Err(Error::KindGridMismatch(
                "wire_combo needs a 1D grid".into(),
            )),
            NonlinearitySpec::Polynomial(terms) => {
                match terms.iter().find(|t| t.coeff.len() != psi.len()) {
                    Some(t) => Err(Error::KindGridMismatch(format!(
                        "coefficient a_{}{} has {} samples for {} nodes",
                        t.p,
                        t.q,
                        t.coeff.len(),
                        psi.len()
                    ))),
                    None => Ok(()),
                }
            }
            _ => Ok(()),
        }
    }
}

/// Config-file form of a nonlinearity: `"cubic"`, `"dnls_cubic"`,
/// `"wire_combo"` or `{"polynomial": [{"p": 2, "q": 1, "coeff": [re, im]}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NonlinearityConfig {
    Cubic,
    DnlsCubic,
    WireCombo,
    Polynomial(Vec<PolyTermConfig>),
}

/// A constant coefficient `coeff`, or node samples `re`/`im`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyTermConfig {
    pub p: u32,
    pub q: u32,
    #[serde(default)]
    pub coeff: Option<[f64; 2]>,
    #[serde(default)]
    pub re: Option<Vec<f64>>,
    #[serde(default)]
    pub im: Option<Vec<f64>>,
}

impl NonlinearityConfig {
    /// Resolves the config on a grid with `nodes` nodes.
    pub fn resolve(&self, nodes: usize) -> Result<NonlinearitySpec> {
        match self {
            NonlinearityConfig::Cubic => Ok(NonlinearitySpec::Cubic),
            NonlinearityConfig::DnlsCubic => Ok(NonlinearitySpec::DnlsCubic),
            NonlinearityConfig::WireCombo => Ok(NonlinearitySpec::WireCombo),
            NonlinearityConfig::Polynomial(terms) => {
                let terms = terms
                    .iter()
                    .map(|t| {
                        let coeff = match (&t.coeff, &t.re, &t.im) {
                            (Some([re, im]), None, None) => vec![c64::new(*re, *im); nodes],
                            (None, Some(re), im) => {
                                let zero = vec![0.0; re.len()];
                                let im = im.as_ref().unwrap_or(&zero);
                                if im.len() != re.len() {
                                    return Err(Error::InvalidSpec(
                                        "coefficient re/im lengths differ".into(),
                                    ));
                                }
                                re.iter().zip(im).map(|(&a, &b)| c64::new(a, b)).collect()
                            }
                            _ => {
                                return Err(Error::InvalidSpec(
                                    "polynomial term needs either `coeff` or `re`/`im`".into(),
                                ))
                            }
                        };
                        Ok(PolyTerm { p: t.p, q: t.q, coeff })
                    })
                    .collect::<Result<Vec<_>>>()?;
                NonlinearitySpec::polynomial(terms)
            }
        }
    }
}

pub fn eval_f(spec: &NonlinearitySpec, psi: &GridFunction) -> Result<GridFunction> {
    spec.check_grid(psi)?;
    let v = psi.values();
    let out = match spec {
        NonlinearitySpec::Cubic | NonlinearitySpec::DnlsCubic => v.iter().map(|z| z * z.norm_sqr()).collect(),
        NonlinearitySpec::Polynomial(terms) => (0..v.len())
            .map(|i| {
                let (z, zb) = (v[i], v[i].conj());
                terms
                    .iter()
                    .fold(c64::new(0.0, 0.0), |acc, t| acc + t.coeff[i] * z.powu(t.p) * zb.powu(t.q))
            })
            .collect(),
        NonlinearitySpec::WireCombo => {
            let current = wire_integral(psi);
            v.iter()
                .zip(current)
                .map(|(z, s)| z * z.norm_sqr() - c64::new(0.0, s) * z)
                .collect()
        }
    };
    Ok(psi.with_values(out))
}

/// `∫_{x_c}^{x_i} Im(ψ conj ψ') ds` with `x_c` the node nearest zero,
/// centered differences and the cumulative trapezoid rule.
fn wire_integral(psi: &GridFunction) -> Vec<f64> {
    let grid = psi.grid();
    let v = psi.values();
    let n = v.len();
    let h = grid.spacing();
    let zero = c64::new(0.0, 0.0);
    // Interior grids carry homogeneous Dirichlet ghosts.
    let ghost = grid.layout() == Layout::Interior1d;
    let density: Vec<f64> = (0..n)
        .map(|i| {
            let d = if n == 1 {
                zero
            } else if i == 0 {
                if ghost {
                    v[1] / (2.0 * h)
                } else {
                    (v[1] - v[0]) / h
                }
            } else if i == n - 1 {
                if ghost {
                    -v[n - 2] / (2.0 * h)
                } else {
                    (v[n - 1] - v[n - 2]) / h
                }
            } else {
                (v[i + 1] - v[i - 1]) / (2.0 * h)
            };
            (v[i] * d.conj()).im
        })
        .collect();
    let c = grid.nearest_node(&[0.0]);
    let mut out = vec![0.0; n];
    for i in c + 1..n {
        out[i] = out[i - 1] + 0.5 * h * (density[i] + density[i - 1]);
    }
    for i in (0..c).rev() {
        out[i] = out[i + 1] - 0.5 * h * (density[i] + density[i + 1]);
    }
    out
}

/// `‖f(aψ) - a^q f(ψ)‖ / ‖f(ψ)‖`.
pub fn homogeneity_check(spec: &NonlinearitySpec, psi: &GridFunction, a: f64) -> Result<f64> {
    let q = spec.homogeneity_degree().ok_or(Error::NotHomogeneous)?;
    if !(a > 0.0) {
        return Err(Error::InvalidSpec(format!("scale factor must be positive, got {a}")));
    }
    let f = eval_f(spec, psi)?;
    let fa = eval_f(spec, &psi.scale(c64::new(a, 0.0)))?;
    let diff = fa.axpy(c64::new(-a.powf(q), 0.0), &f).norm();
    let base = f.norm();
    Ok(if base > 0.0 { diff / base } else { diff })
}

/// Sampled lower bound for the Lipschitz constant of `f` on the ball of
/// `radius` around `center`, in the weighted `L²` norm on both sides.
///
/// Even-numbered pairs have both points on the sphere, the others pair a
/// sphere point with an interior point. Each point is `center + radius t d`
/// with `d` a random unit direction.
pub fn lipschitz_estimate(
    spec: &NonlinearitySpec,
    center: &GridFunction,
    radius: f64,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if !(radius > 0.0) || samples < 2 {
        return Err(Error::InvalidSpec("need radius > 0 and at least 2 samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let point = |rng: &mut ChaCha8Rng, t: f64| -> GridFunction {
        let d = center.with_values(
            (0..center.len())
                .map(|_| c64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5))
                .collect(),
        );
        let nd = d.norm();
        center.axpy(c64::new(radius * t / nd, 0.0), &d)
    };
    let mut best: f64 = 0.0;
    for k in 0..samples {
        let a = point(&mut rng, 1.0);
        let t = if k % 2 == 0 { 1.0 } else { rng.gen::<f64>().sqrt() };
        let b = point(&mut rng, t);
        let dist = a.sub(&b).norm();
        if dist == 0.0 {
            continue;
        }
        let df = eval_f(spec, &a)?.sub(&eval_f(spec, &b)?).norm();
        best = best.max(df / dist);
    }
    Ok(best)
}
