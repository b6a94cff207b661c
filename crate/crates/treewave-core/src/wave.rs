//! Explicit leapfrog solver for the wave equation on a tree network,
//! with continuity and flux balance enforced at internal nodes.
//!
//! The interior update is the standard second-order scheme
//! `u^{k+1} = 2u^k - u^{k-1} + dt^2 (u_xx - p u + g)`. After each interior
//! sweep the common value at every internal node is obtained by solving the
//! scalar equation that makes the one-sided second-order outward derivatives
//! of the incident edges sum to zero; continuity is then exact by
//! construction. The first step uses a Taylor expansion consistent with the
//! initial velocity so the scheme stays globally second order.

use crate::error::{Error, Result};
use crate::field::{BoundaryCondition, BoundaryData, EquationKind, NetworkField, SolutionField};
use crate::graph::{EdgeEnd, MetricTree};
use crate::grid::NetworkGrid;

/// Optional space-time forcing, sampled as `(edge index, point index, step)`.
pub type SourceFn<'a> = &'a dyn Fn(usize, usize, usize) -> f64;

/// Per-node coupling table, precomputed once per solve.
struct NodeStencil {
    /// (edge index, endpoint index, near index, far index, dx).
    ends: Vec<(usize, usize, usize, usize, f64)>,
    /// Sum of 3/(2 dx_e) over incident edges.
    diag: f64,
}

fn node_stencils(tree: &MetricTree, grid: &NetworkGrid) -> Vec<NodeStencil> {
    tree.internal_nodes()
        .map(|node| {
            let ends: Vec<_> = tree
                .incident_edges(node)
                .iter()
                .map(|&ei| {
                    let m = grid.edges[ei].m;
                    let dx = grid.edges[ei].dx;
                    match tree.edge_end(ei, node).expect("incident") {
                        EdgeEnd::Start => (ei, 0, 1, 2, dx),
                        EdgeEnd::End => (ei, m, m - 1, m - 2, dx),
                    }
                })
                .collect();
            let diag = ends.iter().map(|&(_, _, _, _, dx)| 1.5 / dx).sum();
            NodeStencil { ends, diag }
        })
        .collect()
}

/// Enforce continuity + flux balance at every internal node of `field`,
/// given that all interior points already hold the new time level.
fn apply_node_solve(field: &mut NetworkField<f64>, stencils: &[NodeStencil]) {
    for st in stencils {
        let mut rhs = 0.0;
        for &(ei, _, near, far, dx) in &st.ends {
            let v = &field.per_edge[ei];
            rhs += (4.0 * v[near] - v[far]) / (2.0 * dx);
        }
        let value = rhs / st.diag;
        for &(ei, end, _, _, _) in &st.ends {
            field.per_edge[ei][end] = value;
        }
    }
}

struct ExternalEnd {
    edge: usize,
    /// Endpoint index (0 or m).
    idx: usize,
    /// Nearest interior index.
    near: usize,
    dx: f64,
    node_id: String,
}

fn external_ends(tree: &MetricTree, grid: &NetworkGrid) -> Vec<ExternalEnd> {
    tree.external_nodes()
        .map(|node| {
            let ei = tree.incident_edges(node)[0];
            let m = grid.edges[ei].m;
            let (idx, near) = match tree.edge_end(ei, node).expect("incident") {
                EdgeEnd::Start => (0, 1),
                EdgeEnd::End => (m, m - 1),
            };
            ExternalEnd { edge: ei, idx, near, dx: grid.edges[ei].dx, node_id: tree.nodes()[node].id.clone() }
        })
        .collect()
}

fn check_valid_tree(tree: &MetricTree) -> Result<()> {
    let violations = crate::graph::validate_tree(tree);
    if violations.is_empty() {
        Ok(())
    } else {
        let msgs: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        Err(Error::InvalidTree(msgs.join("; ")))
    }
}

fn check_cfl(tree: &MetricTree, grid: &NetworkGrid) -> Result<()> {
    for (ei, eg) in grid.edges.iter().enumerate() {
        let ratio = grid.dt / eg.dx;
        if ratio > 1.0 + 1e-12 {
            return Err(Error::CflViolation { edge: tree.edges()[ei].id.clone(), ratio });
        }
    }
    Ok(())
}

/// Solve the wave system on the network.
///
/// `boundary` must provide a condition for every external node; Dirichlet
/// series need `grid.steps + 1` samples and must match the initial data at
/// t = 0 to 1e-8. `source` is an optional forcing sampled on the grid.
pub fn solve_wave(
    tree: &MetricTree,
    grid: &NetworkGrid,
    p: &NetworkField<f64>,
    u0: &NetworkField<f64>,
    u1: &NetworkField<f64>,
    boundary: &BoundaryData<f64>,
    source: Option<SourceFn>,
) -> Result<SolutionField<f64>> {
    check_valid_tree(tree)?;
    check_cfl(tree, grid)?;
    p.check_shape(grid, "potential")?;
    u0.check_shape(grid, "initial position")?;
    u1.check_shape(grid, "initial velocity")?;
    boundary.validate(tree, grid.steps)?;

    let cont_gap = u0.continuity_gap(tree);
    if cont_gap > 1e-9 * (1.0 + u0.max_abs()) {
        return Err(Error::ShapeMismatch(format!(
            "initial position discontinuous at internal nodes (gap {cont_gap:.3e})"
        )));
    }

    let externals = external_ends(tree, grid);
    for ext in &externals {
        if let Some(BoundaryCondition::Dirichlet(series)) = boundary.get(&ext.node_id) {
            let gap = (series[0] - u0.per_edge[ext.edge][ext.idx]).abs();
            if gap > 1e-8 {
                return Err(Error::IncompatibleBoundary { node: ext.node_id.clone(), gap });
            }
        }
    }

    let stencils = node_stencils(tree, grid);
    let dt = grid.dt;
    let dt2 = dt * dt;
    let g_at = |e: usize, i: usize, k: usize| source.map_or(0.0, |f| f(e, i, k));

    let mut snapshots = Vec::with_capacity(grid.steps + 1);
    snapshots.push(u0.clone());

    // Taylor start: u^1 = u0 + dt u1 + dt^2/2 (u0_xx - p u0 + g^0).
    let mut first = NetworkField::zeros(grid);
    for (ei, eg) in grid.edges.iter().enumerate() {
        let dx2 = eg.dx * eg.dx;
        let v0 = &u0.per_edge[ei];
        let v1 = &u1.per_edge[ei];
        let pe = &p.per_edge[ei];
        let out = &mut first.per_edge[ei];
        for i in 1..eg.m {
            let lap = (v0[i + 1] - 2.0 * v0[i] + v0[i - 1]) / dx2;
            out[i] = v0[i] + dt * v1[i] + 0.5 * dt2 * (lap - pe[i] * v0[i] + g_at(ei, i, 0));
        }
    }
    for ext in &externals {
        match boundary.get(&ext.node_id).expect("validated") {
            BoundaryCondition::Dirichlet(series) => {
                first.per_edge[ext.edge][ext.idx] = series[1];
            }
            BoundaryCondition::NeumannZero => {
                let dx2 = ext.dx * ext.dx;
                let v0 = &u0.per_edge[ext.edge];
                let v1 = &u1.per_edge[ext.edge];
                let lap = (2.0 * v0[ext.near] - 2.0 * v0[ext.idx]) / dx2;
                let pe = p.per_edge[ext.edge][ext.idx];
                first.per_edge[ext.edge][ext.idx] = v0[ext.idx]
                    + dt * v1[ext.idx]
                    + 0.5 * dt2 * (lap - pe * v0[ext.idx] + g_at(ext.edge, ext.idx, 0));
            }
        }
    }
    apply_node_solve(&mut first, &stencils);
    snapshots.push(first);

    for k in 1..grid.steps {
        let mut next = NetworkField::zeros(grid);
        {
            let curr = &snapshots[k];
            let prev = &snapshots[k - 1];
            for (ei, eg) in grid.edges.iter().enumerate() {
                let dx2 = eg.dx * eg.dx;
                let vc = &curr.per_edge[ei];
                let vp = &prev.per_edge[ei];
                let pe = &p.per_edge[ei];
                let out = &mut next.per_edge[ei];
                for i in 1..eg.m {
                    let lap = (vc[i + 1] - 2.0 * vc[i] + vc[i - 1]) / dx2;
                    out[i] =
                        2.0 * vc[i] - vp[i] + dt2 * (lap - pe[i] * vc[i] + g_at(ei, i, k));
                }
            }
            for ext in &externals {
                match boundary.get(&ext.node_id).expect("validated") {
                    BoundaryCondition::Dirichlet(series) => {
                        next.per_edge[ext.edge][ext.idx] = series[k + 1];
                    }
                    BoundaryCondition::NeumannZero => {
                        let dx2 = ext.dx * ext.dx;
                        let vc = &curr.per_edge[ext.edge];
                        let vp = &prev.per_edge[ext.edge];
                        let lap = (2.0 * vc[ext.near] - 2.0 * vc[ext.idx]) / dx2;
                        let pe = p.per_edge[ext.edge][ext.idx];
                        next.per_edge[ext.edge][ext.idx] = 2.0 * vc[ext.idx] - vp[ext.idx]
                            + dt2 * (lap - pe * vc[ext.idx] + g_at(ext.edge, ext.idx, k));
                    }
                }
            }
        }
        apply_node_solve(&mut next, &stencils);
        snapshots.push(next);
    }

    Ok(SolutionField { equation: EquationKind::Wave, grid: grid.clone(), snapshots })
}

/// Discrete energy `||u_t||^2 + ||u_x||^2` at time index `k`, with the time
/// derivative by centered differences (so `1 <= k <= steps - 1`).
pub fn energy(sol: &SolutionField<f64>, k: usize) -> Result<f64> {
    if k == 0 || k + 1 >= sol.snapshots.len() {
        return Err(Error::IndexOutOfRange { index: k, len: sol.snapshots.len() });
    }
    let grid = &sol.grid;
    let two_dt = 2.0 * grid.dt;
    let next = &sol.snapshots[k + 1];
    let prev = &sol.snapshots[k - 1];
    let curr = &sol.snapshots[k];
    let mut total = 0.0;
    for (ei, eg) in grid.edges.iter().enumerate() {
        let dx = eg.dx;
        let m = eg.m;
        let vn = &next.per_edge[ei];
        let vp = &prev.per_edge[ei];
        let vc = &curr.per_edge[ei];
        let ux = |i: usize| -> f64 {
            if i == 0 {
                (-3.0 * vc[0] + 4.0 * vc[1] - vc[2]) / (2.0 * dx)
            } else if i == m {
                (3.0 * vc[m] - 4.0 * vc[m - 1] + vc[m - 2]) / (2.0 * dx)
            } else {
                (vc[i + 1] - vc[i - 1]) / (2.0 * dx)
            }
        };
        for i in 0..=m {
            let ut = (vn[i] - vp[i]) / two_dt;
            let density = ut * ut + ux(i) * ux(i);
            let w = if i == 0 || i == m { 0.5 } else { 1.0 };
            total += w * density * dx;
        }
    }
    Ok(total)
}

/// Energy at every admissible time index, as `(t, E)` pairs.
pub fn energy_series(sol: &SolutionField<f64>) -> Vec<(f64, f64)> {
    (1..sol.steps())
        .map(|k| (k as f64 * sol.grid.dt, energy(sol, k).expect("in range")))
        .collect()
}
