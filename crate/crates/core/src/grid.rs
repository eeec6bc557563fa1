//! Uniform 1D/2D grids with quadrature weights and exact reflection maps.

use std::collections::BTreeMap;

use num_complex::Complex64 as c64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BoundaryKind {
    Dirichlet,
    Robin { coefficient: c64 },
    QuasiPeriodic { k: Vec<f64> },
    Lattice,
}

/// Node layout of a grid. Stored so operators can be assembled without
/// re-deriving the mesh from coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Layout {
    /// Nodes include both endpoints, trapezoid weights.
    Closed1d,
    /// Interior nodes of a homogeneous Dirichlet problem.
    Interior1d,
    /// Cell-centred nodes of a periodic cell, `x_i = lo + (i + 1/2) h`.
    Periodic1d,
    /// Tensor product of two interior 1D layouts, index `i * n + j`.
    Interior2d,
    /// Chain sites with unit weights.
    Lattice,
}

#[derive(Debug, Clone)]
pub struct Grid {
    dim: usize,
    layout: Layout,
    shape: Vec<usize>,
    spacing: f64,
    coords: Vec<f64>,
    weights: Vec<f64>,
    boundary: BoundaryKind,
    reflections: BTreeMap<String, Vec<usize>>,
    measure: f64,
}

impl Grid {
    /// `n` nodes on `[lo, hi]` including both endpoints.
    pub fn closed_1d(n: usize, lo: f64, hi: f64, boundary: BoundaryKind) -> Result<Grid> {
        check_interval(n, 2, lo, hi)?;
        let h = (hi - lo) / (n - 1) as f64;
        let coords: Vec<f64> = (0..n).map(|i| node_1d(lo, hi, h, i, n - 1)).collect();
        let mut weights = vec![h; n];
        weights[0] = 0.5 * h;
        weights[n - 1] = 0.5 * h;
        Ok(Grid::finish(1, Layout::Closed1d, vec![n], h, coords, weights, boundary, hi - lo))
    }

    /// `n` interior nodes of `(lo, hi)`; the boundary values are zero.
    pub fn interior_1d(n: usize, lo: f64, hi: f64) -> Result<Grid> {
        check_interval(n, 1, lo, hi)?;
        let h = (hi - lo) / (n + 1) as f64;
        let coords = (0..n).map(|i| node_1d(lo, hi, h, i + 1, n + 1)).collect();
        let weights = vec![h; n];
        Ok(Grid::finish(
            1,
            Layout::Interior1d,
            vec![n],
            h,
            coords,
            weights,
            BoundaryKind::Dirichlet,
            hi - lo,
        ))
    }

    /// `n` cell-centred nodes of a periodic cell `[lo, hi)` with Bloch phase `k`.
    pub fn periodic_1d(n: usize, lo: f64, hi: f64, k: f64) -> Result<Grid> {
        check_interval(n, 3, lo, hi)?;
        let h = (hi - lo) / n as f64;
        let coords = (0..n)
            .map(|i| {
                let from_lo = lo + (i as f64 + 0.5) * h;
                let from_hi = hi - ((n - i) as f64 - 0.5) * h;
                if 2 * i + 1 < n {
                    from_lo
                } else {
                    from_hi
                }
            })
            .collect();
        let weights = vec![h; n];
        Ok(Grid::finish(
            1,
            Layout::Periodic1d,
            vec![n],
            h,
            coords,
            weights,
            BoundaryKind::QuasiPeriodic { k: vec![k] },
            hi - lo,
        ))
    }

    /// `n × n` interior nodes of the square `(lo, hi)²`.
    pub fn interior_2d(n: usize, lo: f64, hi: f64) -> Result<Grid> {
        check_interval(n, 1, lo, hi)?;
        let h = (hi - lo) / (n + 1) as f64;
        let axis: Vec<f64> = (0..n).map(|i| node_1d(lo, hi, h, i + 1, n + 1)).collect();
        let mut coords = Vec::with_capacity(2 * n * n);
        for &x1 in &axis {
            for &x2 in &axis {
                coords.push(x1);
                coords.push(x2);
            }
        }
        let weights = vec![h * h; n * n];
        let side = hi - lo;
        Ok(Grid::finish(
            2,
            Layout::Interior2d,
            vec![n, n],
            h,
            coords,
            weights,
            BoundaryKind::Dirichlet,
            side * side,
        ))
    }

    /// A chain of `len` sites with unit weights, centred on zero.
    pub fn lattice(len: usize) -> Result<Grid> {
        if len == 0 {
            return Err(Error::InvalidSpec("lattice needs at least one site".into()));
        }
        let c = 0.5 * (len as f64 - 1.0);
        let coords = (0..len).map(|i| i as f64 - c).collect();
        Ok(Grid::finish(
            1,
            Layout::Lattice,
            vec![len],
            1.0,
            coords,
            vec![1.0; len],
            BoundaryKind::Lattice,
            len as f64,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        dim: usize,
        layout: Layout,
        shape: Vec<usize>,
        spacing: f64,
        coords: Vec<f64>,
        weights: Vec<f64>,
        boundary: BoundaryKind,
        measure: f64,
    ) -> Grid {
        let mut grid = Grid {
            dim,
            layout,
            shape,
            spacing,
            coords,
            weights,
            boundary,
            reflections: BTreeMap::new(),
            measure,
        };
        let candidates: Vec<(&str, [f64; 2])> = if dim == 1 {
            vec![("P", [-1.0, 1.0])]
        } else {
            vec![("P", [-1.0, -1.0]), ("P1", [-1.0, 1.0]), ("P2", [1.0, -1.0])]
        };
        for (name, signs) in candidates {
            if let Some(map) = grid.reflection_candidate(signs) {
                grid.reflections.insert(name.to_string(), map);
            }
        }
        grid
    }

    /// Index-arithmetic guess for a reflection, kept only if every node lands
    /// exactly on the reflected coordinate.
    fn reflection_candidate(&self, signs: [f64; 2]) -> Option<Vec<usize>> {
        let n = self.len();
        let map: Vec<usize> = match self.dim {
            1 => (0..n).map(|i| n - 1 - i).collect(),
            _ => {
                let m = self.shape[0];
                (0..n)
                    .map(|idx| {
                        let (i, j) = (idx / m, idx % m);
                        let i2 = if signs[0] < 0.0 { m - 1 - i } else { i };
                        let j2 = if signs[1] < 0.0 { m - 1 - j } else { j };
                        i2 * m + j2
                    })
                    .collect()
            }
        };
        let scale = self
            .coords
            .iter()
            .fold(self.spacing, |acc, x| acc.max(x.abs()));
        let tol = 1e-12 * scale;
        for (i, &j) in map.iter().enumerate() {
            let (a, b) = (self.node(i), self.node(j));
            for d in 0..self.dim {
                if (b[d] - signs[d] * a[d]).abs() > tol {
                    return None;
                }
            }
            if (self.weights[i] - self.weights[j]).abs() > 1e-14 * self.weights[i] {
                return None;
            }
        }
        Some(map)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Nodes per axis.
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Mesh width (1 on lattices).
    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn nodes(&self) -> impl Iterator<Item = &[f64]> {
        self.coords.chunks(self.dim)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn boundary(&self) -> &BoundaryKind {
        &self.boundary
    }

    /// Length or area of the domain (number of sites on a lattice).
    pub fn measure(&self) -> f64 {
        self.measure
    }

    pub fn reflection(&self, name: &str) -> Option<&[usize]> {
        self.reflections.get(name).map(|v| v.as_slice())
    }

    pub fn reflection_names(&self) -> impl Iterator<Item = &str> {
        self.reflections.keys().map(|s| s.as_str())
    }

    /// Index of the node closest to `point` (ties go to the lower index).
    pub fn nearest_node(&self, point: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (i, x) in self.nodes().enumerate() {
            let d: f64 = x.iter().zip(point).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 - 1e-14 {
                best = (d, i);
            }
        }
        best.1
    }

    /// Structural equality: same layout, size, coordinates and weights.
    pub fn same_as(&self, other: &Grid) -> bool {
        std::ptr::eq(self, other)
            || (self.layout == other.layout
                && self.shape == other.shape
                && self.coords == other.coords
                && self.weights == other.weights)
    }
}

fn check_interval(n: usize, min: usize, lo: f64, hi: f64) -> Result<()> {
    if n < min {
        return Err(Error::InvalidSpec(format!("need at least {min} nodes, got {n}")));
    }
    if !(lo.is_finite() && hi.is_finite() && hi > lo) {
        return Err(Error::InvalidSpec(format!("bad interval ({lo}, {hi})")));
    }
    Ok(())
}

/// Node `i` of `intervals` equal cells on `[lo, hi]`, computed from the nearer
/// end so that mirrored nodes are exact negatives on symmetric intervals.
fn node_1d(lo: f64, hi: f64, h: f64, i: usize, intervals: usize) -> f64 {
    if 2 * i < intervals {
        lo + i as f64 * h
    } else if 2 * i == intervals {
        0.5 * (lo + hi)
    } else {
        hi - (intervals - i) as f64 * h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_weights_integrate_constants() {
        let g = Grid::closed_1d(101, -1.5, 1.5, BoundaryKind::Dirichlet).unwrap();
        let s: f64 = g.weights().iter().sum();
        assert!((s - 3.0).abs() < 1e-13);
        assert_eq!(g.node(0)[0], -1.5);
        assert_eq!(g.node(100)[0], 1.5);
    }

    #[test]
    fn reflections_are_exact_involutions() {
        for g in [
            Grid::closed_1d(64, -2.0, 2.0, BoundaryKind::Dirichlet).unwrap(),
            Grid::interior_1d(63, -1.0, 1.0).unwrap(),
            Grid::periodic_1d(50, -3.0, 3.0, 0.3).unwrap(),
            Grid::interior_2d(9, -8.0, 8.0).unwrap(),
            Grid::lattice(6).unwrap(),
        ] {
            assert!(g.reflection("P").is_some());
            for name in g.reflection_names() {
                let p = g.reflection(name).unwrap();
                for (i, &j) in p.iter().enumerate() {
                    assert_eq!(p[j], i);
                }
            }
        }
    }

    #[test]
    fn offset_domain_has_no_reflection() {
        let g = Grid::interior_1d(20, -1.0, 1.5).unwrap();
        assert!(g.reflection("P").is_none());
    }

    #[test]
    fn odd_2d_grid_has_node_at_origin() {
        let g = Grid::interior_2d(11, -8.0, 8.0).unwrap();
        let c = g.nearest_node(&[0.0, 0.0]);
        assert_eq!(g.node(c), &[0.0, 0.0]);
        assert_eq!(g.reflection("P").unwrap()[c], c);
    }
}
