//! Space-time discretization of a network.

use crate::error::{Error, Result};
use crate::graph::MetricTree;

pub const DEFAULT_CFL: f64 = 0.8;
/// Default spatial resolution divisor: target dx = (shortest edge) / 40.
pub const DEFAULT_CELLS_PER_MIN_EDGE: f64 = 40.0;

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeGrid {
    /// Cell count; the edge carries m + 1 samples including both endpoints.
    pub m: usize,
    pub dx: f64,
}

/// Uniform-in-time grid with per-edge spatial resolution. Endpoint samples
/// of edges meeting at a node represent the same nodal value.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGrid {
    pub edges: Vec<EdgeGrid>,
    pub dt: f64,
    /// Number of time steps; the horizon is `steps * dt`.
    pub steps: usize,
    pub cfl: f64,
}

impl NetworkGrid {
    pub fn horizon(&self) -> f64 {
        self.steps as f64 * self.dt
    }

    pub fn min_dx(&self) -> f64 {
        self.edges.iter().map(|e| e.dx).fold(f64::INFINITY, f64::min)
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.steps).map(|k| k as f64 * self.dt)
    }
}

/// Build a grid: `m_j = max(4, round(len_j / target_dx))`, a shared time
/// step `dt = cfl * min_j dx_j`, and the horizon snapped to a whole number
/// of steps.
pub fn discretize(g: &MetricTree, target_dx: f64, cfl: f64, horizon: f64) -> Result<NetworkGrid> {
    if !(target_dx.is_finite() && target_dx > 0.0) {
        return Err(Error::ShapeMismatch(format!("target dx must be positive, got {target_dx}")));
    }
    if !(cfl > 0.0 && cfl <= 1.0) {
        return Err(Error::CflViolation { edge: "<grid>".into(), ratio: cfl });
    }
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::ShapeMismatch(format!("horizon must be positive, got {horizon}")));
    }
    let edges: Vec<EdgeGrid> = g
        .edges()
        .iter()
        .map(|e| {
            let m = ((e.length / target_dx).round() as usize).max(4);
            EdgeGrid { m, dx: e.length / m as f64 }
        })
        .collect();
    let min_dx = edges.iter().map(|e| e.dx).fold(f64::INFINITY, f64::min);
    let dt = cfl * min_dx;
    let steps = (horizon / dt).round().max(1.0) as usize;
    Ok(NetworkGrid { edges, dt, steps, cfl })
}

/// [`discretize`] with the default resolution and CFL number.
pub fn discretize_default(g: &MetricTree, horizon: f64) -> Result<NetworkGrid> {
    let min_len = g.edges().iter().map(|e| e.length).fold(f64::INFINITY, f64::min);
    discretize(g, min_len / DEFAULT_CELLS_PER_MIN_EDGE, DEFAULT_CFL, horizon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{benchmark_tree, parse_network};

    #[test]
    fn single_edge_arithmetic() {
        let g = parse_network("node A external\nnode B external\nedge e0 A B 1.0\n").unwrap();
        let grid = discretize(&g, 0.1, 0.8, 1.0).unwrap();
        assert_eq!(grid.edges[0].m, 10);
        assert!((grid.edges[0].dx - 0.1).abs() < 1e-15);
        assert!((grid.dt - 0.08).abs() < 1e-15);
    }

    #[test]
    fn min_edge_governs_dt() {
        let g = benchmark_tree();
        let grid = discretize(&g, 0.05, 0.8, 2.0).unwrap();
        // Shortest edge is e7 with length 0.6 -> m = 12, dx = 0.05 exactly.
        let min_dx = grid.min_dx();
        let e7 = g.edge_idx("e7").unwrap();
        assert!((grid.edges[e7].dx - min_dx).abs() < 1e-12);
        assert!((grid.dt - 0.8 * min_dx).abs() < 1e-15);
        // Recheck by hand over all edges.
        let by_hand = g
            .edges()
            .iter()
            .map(|e| {
                let m = ((e.length / 0.05).round() as usize).max(4);
                e.length / m as f64
            })
            .fold(f64::INFINITY, f64::min);
        assert!((min_dx - by_hand).abs() < 1e-15);
    }

    #[test]
    fn coarse_target_clamps_to_four_cells() {
        let g = parse_network("node A external\nnode B external\nedge e0 A B 0.2\n").unwrap();
        let grid = discretize(&g, 10.0, 0.8, 1.0).unwrap();
        assert_eq!(grid.edges[0].m, 4);
    }

    #[test]
    fn horizon_snaps_to_steps() {
        let g = parse_network("node A external\nnode B external\nedge e0 A B 1.0\n").unwrap();
        let grid = discretize(&g, 0.1, 0.8, 1.0).unwrap();
        assert_eq!(grid.steps, 12); // 1.0 / 0.08 snaps to the nearest step count
        assert!((grid.horizon() - 0.96).abs() < 1e-12);
        let exact = discretize(&g, 0.1, 0.5, 1.0).unwrap();
        assert_eq!(exact.steps, 20);
        assert!((exact.horizon() - 1.0).abs() < 1e-12);
    }
}
