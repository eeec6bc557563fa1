//! Complex grid functions and the weighted inner product.

use std::sync::Arc;

use num_complex::Complex64 as c64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

#[derive(Debug, Clone)]
pub struct GridFunction {
    grid: Arc<Grid>,
    values: Vec<c64>,
}

impl GridFunction {
    pub fn new(grid: Arc<Grid>, values: Vec<c64>) -> Result<GridFunction> {
        if values.len() != grid.len() {
            return Err(Error::DimensionMismatch {
                expected: grid.len(),
                found: values.len(),
            });
        }
        Ok(GridFunction { grid, values })
    }

    pub fn zeros(grid: Arc<Grid>) -> GridFunction {
        let values = vec![c64::new(0.0, 0.0); grid.len()];
        GridFunction { grid, values }
    }

    /// Samples `f` at every node.
    pub fn from_fn(grid: Arc<Grid>, f: impl Fn(&[f64]) -> c64) -> GridFunction {
        let values = grid.nodes().map(f).collect();
        GridFunction { grid, values }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[c64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [c64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<c64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Same grid, new values.
    pub fn with_values(&self, values: Vec<c64>) -> GridFunction {
        assert_eq!(values.len(), self.values.len(), "value count must match grid");
        GridFunction {
            grid: self.grid.clone(),
            values,
        }
    }

    pub fn check_same_grid(&self, other: &GridFunction) -> Result<()> {
        if Arc::ptr_eq(&self.grid, &other.grid) || self.grid.same_as(&other.grid) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "{} nodes vs {} nodes",
                self.len(),
                other.len()
            )))
        }
    }

    /// `⟨self, other⟩ = Σ w_i u_i conj(v_i)`.
    pub fn inner(&self, other: &GridFunction) -> Result<c64> {
        self.check_same_grid(other)?;
        Ok(weighted_dot(self.grid.weights(), &self.values, &other.values))
    }

    pub fn norm(&self) -> f64 {
        weighted_norm(self.grid.weights(), &self.values)
    }

    pub fn scale(&self, a: c64) -> GridFunction {
        self.with_values(self.values.iter().map(|v| v * a).collect())
    }

    /// `self + a * other`.
    pub fn axpy(&self, a: c64, other: &GridFunction) -> GridFunction {
        assert_eq!(self.len(), other.len());
        self.with_values(
            self.values
                .iter()
                .zip(&other.values)
                .map(|(u, v)| u + a * v)
                .collect(),
        )
    }

    pub fn sub(&self, other: &GridFunction) -> GridFunction {
        self.axpy(c64::new(-1.0, 0.0), other)
    }

    pub fn add(&self, other: &GridFunction) -> GridFunction {
        self.axpy(c64::new(1.0, 0.0), other)
    }

    /// Largest pointwise modulus.
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.norm()))
    }

    pub fn to_json(&self) -> GridFunctionJson {
        GridFunctionJson {
            dim: self.grid.dim(),
            nodes: self.grid.nodes().map(|x| x.to_vec()).collect(),
            re: self.values.iter().map(|v| v.re).collect(),
            im: self.values.iter().map(|v| v.im).collect(),
        }
    }

    /// Rebuilds a grid function on `grid`; the stored node coordinates must
    /// match the grid's.
    pub fn from_json(grid: Arc<Grid>, json: &GridFunctionJson) -> Result<GridFunction> {
        if json.dim != grid.dim() || json.nodes.len() != grid.len() {
            return Err(Error::GridMismatch("serialized grid has a different shape".into()));
        }
        if json.re.len() != json.nodes.len() || json.im.len() != json.nodes.len() {
            return Err(Error::DimensionMismatch {
                expected: json.nodes.len(),
                found: json.re.len().min(json.im.len()),
            });
        }
        let tol = 1e-12 * (1.0 + grid.spacing());
        for (a, b) in json.nodes.iter().zip(grid.nodes()) {
            if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| (x - y).abs() > tol) {
                return Err(Error::GridMismatch("serialized node coordinates differ".into()));
            }
        }
        let values = json.re.iter().zip(&json.im).map(|(&re, &im)| c64::new(re, im)).collect();
        GridFunction::new(grid, values)
    }
}

/// Wire format shared with the plotting tools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFunctionJson {
    pub dim: usize,
    pub nodes: Vec<Vec<f64>>,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

pub fn inner_product(u: &GridFunction, v: &GridFunction) -> Result<c64> {
    u.inner(v)
}

pub(crate) fn weighted_dot(w: &[f64], u: &[c64], v: &[c64]) -> c64 {
    w.iter()
        .zip(u.iter().zip(v))
        .fold(c64::new(0.0, 0.0), |acc, (&w, (a, b))| acc + a * b.conj() * w)
}

pub(crate) fn weighted_norm(w: &[f64], u: &[c64]) -> f64 {
    w.iter()
        .zip(u)
        .map(|(&w, a)| w * a.norm_sqr())
        .sum::<f64>()
        .sqrt()
}
