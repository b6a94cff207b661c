//! Implicit-Euler heat solver with reflecting external ends.
//!
//! External nodes always carry the homogeneous Neumann condition, so the
//! total heat content is a discrete invariant when the potential vanishes.

use crate::error::{Error, Result};
use crate::field::{BoundaryData, EquationKind, NetworkField, SolutionField};
use crate::graph::MetricTree;
use crate::grid::NetworkGrid;
use crate::implicit::ImplicitSystem;

pub fn solve_heat(
    tree: &MetricTree,
    grid: &NetworkGrid,
    p: &NetworkField<f64>,
    u0: &NetworkField<f64>,
) -> Result<SolutionField<f64>> {
    let violations = crate::graph::validate_tree(tree);
    if !violations.is_empty() {
        let msgs: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        return Err(Error::InvalidTree(msgs.join("; ")));
    }
    u0.check_shape(grid, "initial data")?;
    let gap = u0.continuity_gap(tree);
    if gap > 1e-9 * (1.0 + u0.max_abs()) {
        return Err(Error::ShapeMismatch(format!(
            "initial data discontinuous at internal nodes (gap {gap:.3e})"
        )));
    }

    // No Dirichlet nodes: every node value is an unknown.
    let boundary: BoundaryData<f64> = BoundaryData::neumann_all(tree);
    let dt = grid.dt;
    let system = ImplicitSystem::new(tree, grid, p, &boundary, 1.0 / dt, 1.0, 1.0 / dt, 0.0)?;

    let known_next = vec![None; tree.node_count()];
    let mut snapshots = Vec::with_capacity(grid.steps + 1);
    snapshots.push(u0.clone());
    for _ in 0..grid.steps {
        let next = system.step(tree, snapshots.last().unwrap(), &known_next)?;
        snapshots.push(next);
    }
    Ok(SolutionField { equation: EquationKind::Heat, grid: grid.clone(), snapshots })
}

/// Total heat content: the trapezoidal integral of the field over the
/// network (identical to the solver's lumped cell masses).
pub fn total_heat(field: &NetworkField<f64>, grid: &NetworkGrid) -> f64 {
    field
        .per_edge
        .iter()
        .zip(&grid.edges)
        .map(|(v, e)| {
            let inner: f64 = v[1..e.m].iter().sum();
            (0.5 * (v[0] + v[e.m]) + inner) * e.dx
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{parse_network, MetricTree, NodeKind};
    use crate::grid::discretize;

    fn single_edge() -> MetricTree {
        parse_network("node A external\nnode B external\nedge e0 A B 1.0\n").unwrap()
    }

    fn star3() -> MetricTree {
        MetricTree::new(
            vec![
                ("P".into(), NodeKind::Internal),
                ("Q1".into(), NodeKind::External),
                ("Q2".into(), NodeKind::External),
                ("Q3".into(), NodeKind::External),
            ],
            vec![
                ("e1".into(), "Q1".into(), "P".into(), 1.0),
                ("e2".into(), "Q2".into(), "P".into(), 0.8),
                ("e3".into(), "Q3".into(), "P".into(), 1.3),
            ],
        )
        .unwrap()
    }

    #[test]
    fn uniform_state_is_equilibrium() {
        let tree = single_edge();
        let grid = discretize(&tree, 0.05, 0.8, 1.0).unwrap();
        let p = NetworkField::zeros(&grid);
        let u0 = NetworkField::from_fn(&grid, |_, _| 1.0);
        let sol = solve_heat(&tree, &grid, &p, &u0).unwrap();
        for snap in &sol.snapshots {
            for v in snap.per_edge.iter().flatten() {
                assert!((v - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_potential_decays_like_ode() {
        let tree = single_edge();
        let c = 1.0;
        let mut grid = discretize(&tree, 0.05, 0.8, 1.0).unwrap();
        grid.dt = 1e-3;
        grid.steps = 1000;
        let p = NetworkField::from_fn(&grid, |_, _| c);
        let u0 = NetworkField::from_fn(&grid, |_, _| 1.0);
        let sol = solve_heat(&tree, &grid, &p, &u0).unwrap();
        let expected = (-c).exp();
        let got = sol.snapshots.last().unwrap().per_edge[0][3];
        assert!(
            ((got - expected) / expected).abs() <= 1e-3,
            "got {got}, expected {expected}"
        );
    }

    #[test]
    fn star_conserves_total_heat() {
        let tree = star3();
        let grid = discretize(&tree, 0.02, 0.8, 0.5).unwrap();
        let p = NetworkField::zeros(&grid);
        // Bump supported inside edge 1, exactly zero at the node.
        let u0 = NetworkField::from_fn(&grid, |e, x| {
            if e == 0 && x > 0.1 && x < 0.8 {
                ((x - 0.1) * (0.8 - x)).powi(2) * 100.0
            } else {
                0.0
            }
        });
        let sol = solve_heat(&tree, &grid, &p, &u0).unwrap();
        let m0 = total_heat(&sol.snapshots[0], &grid);
        for (k, snap) in sol.snapshots.iter().enumerate() {
            let m = total_heat(snap, &grid);
            assert!(
                ((m - m0) / m0).abs() < 1e-10,
                "step {k}: mass {m} vs {m0}"
            );
        }
    }

    #[test]
    fn comparison_principle_keeps_positivity() {
        let tree = star3();
        let grid = discretize(&tree, 0.05, 0.8, 1.0).unwrap();
        let p = NetworkField::from_fn(&grid, |_, x| 0.5 + 0.5 * x);
        let u0 = NetworkField::from_fn(&grid, |e, x| {
            if e == 1 && x > 0.2 && x < 0.7 {
                ((x - 0.2) * (0.7 - x)).powi(2) * 200.0
            } else {
                0.0
            }
        });
        let sol = solve_heat(&tree, &grid, &p, &u0).unwrap();
        for snap in &sol.snapshots {
            for v in snap.per_edge.iter().flatten() {
                assert!(*v >= -1e-8, "negative value {v}");
            }
        }
    }
}
