//! Sampled functions on networks and single edges.

use num_complex::Complex64;
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::error::{Error, Result};
use crate::graph::MetricTree;
use crate::grid::NetworkGrid;

/// Scalar abstraction shared by the real and complex solvers.
pub trait Scalar:
    Copy
    + PartialEq
    + std::fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_real(x: f64) -> Self;
    fn scale(self, s: f64) -> Self;
    /// Squared modulus.
    fn abs2(self) -> f64;
    fn conj(self) -> Self;
    fn is_finite_scalar(self) -> bool;
    /// Real part plus optional imaginary part, for CSV emission.
    fn parts(self) -> (f64, Option<f64>);
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_real(x: f64) -> Self {
        x
    }
    fn scale(self, s: f64) -> Self {
        self * s
    }
    fn abs2(self) -> f64 {
        self * self
    }
    fn conj(self) -> Self {
        self
    }
    fn is_finite_scalar(self) -> bool {
        self.is_finite()
    }
    fn parts(self) -> (f64, Option<f64>) {
        (self, None)
    }
}

impl Scalar for Complex64 {
    const ZERO: Self = Complex64::new(0.0, 0.0);
    const ONE: Self = Complex64::new(1.0, 0.0);
    fn from_real(x: f64) -> Self {
        Complex64::new(x, 0.0)
    }
    fn scale(self, s: f64) -> Self {
        self * s
    }
    fn abs2(self) -> f64 {
        self.norm_sqr()
    }
    fn conj(self) -> Self {
        Complex64::conj(&self)
    }
    fn is_finite_scalar(self) -> bool {
        self.re.is_finite() && self.im.is_finite()
    }
    fn parts(self) -> (f64, Option<f64>) {
        (self.re, Some(self.im))
    }
}

/// Uniform samples of a function on one edge, endpoints included.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeField {
    pub length: f64,
    pub samples: Vec<f64>,
}

impl EdgeField {
    pub fn new(length: f64, samples: Vec<f64>) -> Self {
        assert!(samples.len() >= 2, "edge field needs at least two samples");
        Self { length, samples }
    }

    pub fn from_fn(length: f64, n_cells: usize, f: impl Fn(f64) -> f64) -> Self {
        let n = n_cells.max(1);
        let dx = length / n as f64;
        Self::new(length, (0..=n).map(|i| f(i as f64 * dx)).collect())
    }

    pub fn zeros(length: f64, n_cells: usize) -> Self {
        Self::from_fn(length, n_cells, |_| 0.0)
    }

    pub fn dx(&self) -> f64 {
        self.length / (self.samples.len() - 1) as f64
    }

    /// Piecewise-linear value at position `x` (clamped to the edge).
    pub fn eval(&self, x: f64) -> f64 {
        let n = self.samples.len() - 1;
        let s = (x / self.length).clamp(0.0, 1.0) * n as f64;
        let i = (s.floor() as usize).min(n - 1);
        let w = s - i as f64;
        self.samples[i] * (1.0 - w) + self.samples[i + 1] * w
    }

    /// Resample onto `n_cells + 1` uniform points.
    pub fn resample(&self, n_cells: usize) -> EdgeField {
        EdgeField::from_fn(self.length, n_cells, |x| self.eval(x))
    }

    /// Spatial mirror (x -> length - x).
    pub fn mirrored(&self) -> EdgeField {
        let mut samples = self.samples.clone();
        samples.reverse();
        EdgeField::new(self.length, samples)
    }

    /// Trapezoidal L2 norm over the edge.
    pub fn norm_l2(&self) -> f64 {
        let dx = self.dx();
        let n = self.samples.len();
        let mut acc = 0.0;
        for (i, v) in self.samples.iter().enumerate() {
            let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            acc += w * v * v;
        }
        (acc * dx).sqrt()
    }

    pub fn min_abs(&self) -> f64 {
        self.samples.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }
}

/// Per-edge sample vectors aligned with a [`NetworkGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkField<S: Scalar = f64> {
    pub per_edge: Vec<Vec<S>>,
}

impl<S: Scalar> NetworkField<S> {
    pub fn zeros(grid: &NetworkGrid) -> Self {
        Self {
            per_edge: grid.edges.iter().map(|e| vec![S::ZERO; e.m + 1]).collect(),
        }
    }

    /// Sample `f(edge_index, x)` on the grid, `x` in local edge coordinates.
    pub fn from_fn(grid: &NetworkGrid, f: impl Fn(usize, f64) -> S) -> Self {
        Self {
            per_edge: grid
                .edges
                .iter()
                .enumerate()
                .map(|(ei, e)| (0..=e.m).map(|i| f(ei, i as f64 * e.dx)).collect())
                .collect(),
        }
    }

    pub fn matches(&self, grid: &NetworkGrid) -> bool {
        self.per_edge.len() == grid.edges.len()
            && self
                .per_edge
                .iter()
                .zip(&grid.edges)
                .all(|(v, e)| v.len() == e.m + 1)
    }

    pub fn check_shape(&self, grid: &NetworkGrid, what: &str) -> Result<()> {
        if self.matches(grid) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!("{what} is not aligned with the grid")))
        }
    }

    /// Value at the endpoint of `edge` sitting at `node`.
    pub fn at_node(&self, tree: &MetricTree, edge: usize, node: usize) -> S {
        let v = &self.per_edge[edge];
        match tree.edge_end(edge, node).expect("incident") {
            crate::graph::EdgeEnd::Start => v[0],
            crate::graph::EdgeEnd::End => v[v.len() - 1],
        }
    }

    /// Largest mismatch of endpoint samples across each internal node.
    pub fn continuity_gap(&self, tree: &MetricTree) -> f64 {
        let mut gap: f64 = 0.0;
        for node in tree.internal_nodes() {
            let vals: Vec<S> = tree
                .incident_edges(node)
                .iter()
                .map(|&e| self.at_node(tree, e, node))
                .collect();
            for w in vals.windows(2) {
                gap = gap.max((w[0] - w[1]).abs2().sqrt());
            }
        }
        gap
    }

    pub fn max_abs(&self) -> f64 {
        self.per_edge
            .iter()
            .flatten()
            .fold(0.0f64, |m, v| m.max(v.abs2().sqrt()))
    }

    pub fn is_finite(&self) -> bool {
        self.per_edge.iter().flatten().all(|v| v.is_finite_scalar())
    }
}

impl NetworkField<f64> {
    /// Interpolate per-edge sample tables (e.g. potential lines from a
    /// network file) onto the grid. Missing edges default to zero.
    pub fn from_edge_samples(
        grid: &NetworkGrid,
        tree: &MetricTree,
        samples: &std::collections::BTreeMap<String, Vec<f64>>,
    ) -> Self {
        Self {
            per_edge: grid
                .edges
                .iter()
                .enumerate()
                .map(|(ei, ge)| {
                    let id = &tree.edges()[ei].id;
                    match samples.get(id) {
                        Some(vals) => {
                            let ef = EdgeField::new(tree.edges()[ei].length, vals.clone());
                            (0..=ge.m).map(|i| ef.eval(i as f64 * ge.dx)).collect()
                        }
                        None => vec![0.0; ge.m + 1],
                    }
                })
                .collect(),
        }
    }

    pub fn to_complex(&self) -> NetworkField<Complex64> {
        NetworkField {
            per_edge: self
                .per_edge
                .iter()
                .map(|v| v.iter().map(|&x| Complex64::new(x, 0.0)).collect())
                .collect(),
        }
    }
}

/// Boundary condition at one external node.
#[derive(Debug, Clone)]
pub enum BoundaryCondition<S: Scalar> {
    /// Prescribed value series, one sample per time level (steps + 1).
    Dirichlet(Vec<S>),
    /// Homogeneous Neumann (reflecting end).
    NeumannZero,
}

/// Boundary data for every external node of a tree.
#[derive(Debug, Clone)]
pub struct BoundaryData<S: Scalar = f64> {
    map: std::collections::BTreeMap<String, BoundaryCondition<S>>,
}

impl<S: Scalar> BoundaryData<S> {
    pub fn new() -> Self {
        Self { map: std::collections::BTreeMap::new() }
    }

    pub fn set(&mut self, node: &str, bc: BoundaryCondition<S>) {
        self.map.insert(node.to_string(), bc);
    }

    pub fn get(&self, node: &str) -> Option<&BoundaryCondition<S>> {
        self.map.get(node)
    }

    /// Homogeneous Dirichlet data at every external node.
    pub fn zero_dirichlet(tree: &MetricTree, steps: usize) -> Self {
        let mut b = Self::new();
        for n in tree.external_nodes() {
            b.set(&tree.nodes()[n].id, BoundaryCondition::Dirichlet(vec![S::ZERO; steps + 1]));
        }
        b
    }

    /// Zero Neumann at every external node.
    pub fn neumann_all(tree: &MetricTree) -> Self {
        let mut b = Self::new();
        for n in tree.external_nodes() {
            b.set(&tree.nodes()[n].id, BoundaryCondition::NeumannZero);
        }
        b
    }

    /// Dirichlet data sampled from `f(node_id, t)`.
    pub fn dirichlet_from_fn(
        tree: &MetricTree,
        steps: usize,
        dt: f64,
        f: impl Fn(&str, f64) -> S,
    ) -> Self {
        let mut b = Self::new();
        for n in tree.external_nodes() {
            let id = &tree.nodes()[n].id;
            b.set(id, BoundaryCondition::Dirichlet((0..=steps).map(|k| f(id, k as f64 * dt)).collect()));
        }
        b
    }

    pub fn validate(&self, tree: &MetricTree, steps: usize) -> Result<()> {
        for n in tree.external_nodes() {
            let id = &tree.nodes()[n].id;
            match self.map.get(id) {
                None => return Err(Error::MissingBoundary(id.clone())),
                Some(BoundaryCondition::Dirichlet(series)) if series.len() != steps + 1 => {
                    return Err(Error::ShapeMismatch(format!(
                        "boundary series at `{id}` has {} samples, expected {}",
                        series.len(),
                        steps + 1
                    )));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

impl<S: Scalar> Default for BoundaryData<S> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EquationKind {
    Wave,
    Heat,
    Schrodinger,
}

/// Time-indexed solution snapshots at t_k = k dt.
#[derive(Debug, Clone)]
pub struct SolutionField<S: Scalar = f64> {
    pub equation: EquationKind,
    pub grid: NetworkGrid,
    pub snapshots: Vec<NetworkField<S>>,
}

impl<S: Scalar> SolutionField<S> {
    pub fn steps(&self) -> usize {
        self.snapshots.len() - 1
    }

    pub fn dt(&self) -> f64 {
        self.grid.dt
    }

    pub fn snapshot(&self, k: usize) -> Result<&NetworkField<S>> {
        self.snapshots
            .get(k)
            .ok_or(Error::IndexOutOfRange { index: k, len: self.snapshots.len() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edge_field_eval_interpolates() {
        let f = EdgeField::new(2.0, vec![0.0, 1.0, 4.0]);
        assert_eq!(f.eval(0.0), 0.0);
        assert_eq!(f.eval(1.0), 1.0);
        assert!((f.eval(0.5) - 0.5).abs() < 1e-15);
        assert!((f.eval(1.5) - 2.5).abs() < 1e-15);
        assert_eq!(f.eval(2.0), 4.0);
        assert_eq!(f.eval(3.0), 4.0); // clamped
    }

    #[test]
    fn edge_field_mirror() {
        let f = EdgeField::new(1.0, vec![0.0, 1.0, 2.0]);
        assert_eq!(f.mirrored().samples, vec![2.0, 1.0, 0.0]);
    }
}
