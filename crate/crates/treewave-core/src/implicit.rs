//! Shared machinery for the implicit one-step schemes (heat, Schrödinger).
//!
//! Space is discretized in conservation form: interior cells of volume dx,
//! vertex cells pooling half a cell from every incident edge. Continuity is
//! built in (one unknown per node) and the vertex row is the flux balance,
//! so the discrete mass matrix / stiffness pair is symmetric: implicit Euler
//! conserves heat content exactly and Crank-Nicolson is unitary in the
//! discrete L2 norm.
//!
//! Each step solves `(al M + bl A) u^{k+1} = (ar M + br A) u^k + boundary`,
//! where `M` is the lumped volume matrix and `A = K + diag(V p)` combines
//! the flux stiffness and the potential. The solve eliminates every edge
//! interior through a cached tridiagonal factorization and finishes with one
//! small dense system on the node values; the tree ordering keeps all of it
//! fill-in free.

use crate::error::{Error, Result};
use crate::field::{BoundaryCondition, BoundaryData, NetworkField, Scalar};
use crate::graph::MetricTree;
use crate::grid::NetworkGrid;

/// Tridiagonal LU with constant off-diagonal, reusable across steps.
struct TriFactor<S: Scalar> {
    off: S,
    diag: Vec<S>,
    sub: Vec<S>,
}

impl<S: Scalar> TriFactor<S> {
    fn new(diag_in: Vec<S>, off: S, context: &str) -> Result<Self> {
        let n = diag_in.len();
        let mut diag = diag_in;
        let mut sub = vec![S::ZERO; n];
        for i in 1..n {
            let prev = diag[i - 1];
            if prev.abs2() < 1e-300 {
                return Err(Error::SingularSystem(context.to_string()));
            }
            let l = off / prev;
            sub[i] = l;
            diag[i] = diag[i] - l * off;
        }
        if let Some(last) = diag.last() {
            if last.abs2() < 1e-300 {
                return Err(Error::SingularSystem(context.to_string()));
            }
        }
        Ok(Self { off, diag, sub })
    }

    fn solve(&self, rhs: &[S]) -> Vec<S> {
        let n = rhs.len();
        let mut y = vec![S::ZERO; n];
        for i in 0..n {
            y[i] = rhs[i] - if i > 0 { self.sub[i] * y[i - 1] } else { S::ZERO };
        }
        let mut x = vec![S::ZERO; n];
        for i in (0..n).rev() {
            let upper = if i + 1 < n { self.off * x[i + 1] } else { S::ZERO };
            x[i] = (y[i] - upper) / self.diag[i];
        }
        x
    }
}

/// Dense LU with partial pivoting for the node system.
struct DenseLu<S: Scalar> {
    n: usize,
    lu: Vec<S>,
    perm: Vec<usize>,
}

impl<S: Scalar> DenseLu<S> {
    fn new(mut a: Vec<S>, n: usize, node_names: &[String]) -> Result<Self> {
        let mut perm: Vec<usize> = (0..n).collect();
        for col in 0..n {
            let mut pivot = col;
            let mut best = a[col * n + col].abs2();
            for row in col + 1..n {
                let v = a[row * n + col].abs2();
                if v > best {
                    best = v;
                    pivot = row;
                }
            }
            if best < 1e-300 {
                return Err(Error::SingularSystem(node_names[perm[col]].clone()));
            }
            if pivot != col {
                for j in 0..n {
                    a.swap(col * n + j, pivot * n + j);
                }
                perm.swap(col, pivot);
            }
            let d = a[col * n + col];
            for row in col + 1..n {
                let l = a[row * n + col] / d;
                a[row * n + col] = l;
                for j in col + 1..n {
                    let sub = l * a[col * n + j];
                    a[row * n + j] = a[row * n + j] - sub;
                }
            }
        }
        Ok(Self { n, lu: a, perm })
    }

    fn solve(&self, rhs: &[S]) -> Vec<S> {
        let n = self.n;
        let mut y = vec![S::ZERO; n];
        for i in 0..n {
            let mut v = rhs[self.perm[i]];
            for j in 0..i {
                v = v - self.lu[i * n + j] * y[j];
            }
            y[i] = v;
        }
        for i in (0..n).rev() {
            let mut v = y[i];
            for j in i + 1..n {
                v = v - self.lu[i * n + j] * y[j];
            }
            y[i] = v / self.lu[i * n + i];
        }
        y
    }
}

/// Where a node's value comes from during a step.
#[derive(Clone, Copy)]
enum NodeRole {
    /// Solved as part of the node system (internal nodes, Neumann ends).
    Unknown(usize),
    /// Prescribed Dirichlet series.
    Known,
}

struct EdgeData {
    m: usize,
    dx: f64,
    start_node: usize,
    end_node: usize,
}

pub struct ImplicitSystem<S: Scalar> {
    edges: Vec<EdgeData>,
    roles: Vec<NodeRole>,
    unknown_nodes: Vec<usize>,
    /// Node volumes (sum of incident half cells).
    node_volume: Vec<f64>,
    /// Potential at each node in FV form: sum of (dx_e/2) p_e(node).
    node_pot: Vec<f64>,
    p: NetworkField<f64>,
    ar: S,
    br: S,
    bl: S,
    factors: Vec<TriFactor<S>>,
    /// Interior response to a unit start-node value (negated contribution).
    xi: Vec<Vec<S>>,
    /// Interior response to a unit end-node value.
    eta: Vec<Vec<S>>,
    node_lu: Option<DenseLu<S>>,
}

impl<S: Scalar> ImplicitSystem<S> {
    /// Assemble and factor the step operator. `al, bl` weight the left-hand
    /// side, `ar, br` the right-hand side. Nodes listed in `boundary` with a
    /// Dirichlet condition are eliminated; all other nodes are unknowns.
    pub fn new(
        tree: &MetricTree,
        grid: &NetworkGrid,
        p: &NetworkField<f64>,
        boundary: &BoundaryData<S>,
        al: S,
        bl: S,
        ar: S,
        br: S,
    ) -> Result<Self> {
        p.check_shape(grid, "potential")?;
        let edges: Vec<EdgeData> = tree
            .edges()
            .iter()
            .enumerate()
            .map(|(ei, e)| EdgeData {
                m: grid.edges[ei].m,
                dx: grid.edges[ei].dx,
                start_node: e.from,
                end_node: e.to,
            })
            .collect();

        let n_nodes = tree.node_count();
        let mut node_volume = vec![0.0; n_nodes];
        let mut node_pot = vec![0.0; n_nodes];
        for (ei, ed) in edges.iter().enumerate() {
            let pe = &p.per_edge[ei];
            node_volume[ed.start_node] += 0.5 * ed.dx;
            node_volume[ed.end_node] += 0.5 * ed.dx;
            node_pot[ed.start_node] += 0.5 * ed.dx * pe[0];
            node_pot[ed.end_node] += 0.5 * ed.dx * pe[ed.m];
        }

        let mut roles = vec![NodeRole::Unknown(usize::MAX); n_nodes];
        let mut unknown_nodes = Vec::new();
        for node in 0..n_nodes {
            let id = &tree.nodes()[node].id;
            let known = matches!(boundary.get(id), Some(BoundaryCondition::Dirichlet(_)));
            if known {
                roles[node] = NodeRole::Known;
            } else {
                roles[node] = NodeRole::Unknown(unknown_nodes.len());
                unknown_nodes.push(node);
            }
        }

        // Interior factorizations and unit responses.
        let mut factors = Vec::with_capacity(edges.len());
        let mut xi = Vec::with_capacity(edges.len());
        let mut eta = Vec::with_capacity(edges.len());
        for (ei, ed) in edges.iter().enumerate() {
            let pe = &p.per_edge[ei];
            let n_int = ed.m - 1;
            let diag: Vec<S> = (1..ed.m)
                .map(|i| {
                    al.scale(ed.dx) + bl * S::from_real(2.0 / ed.dx + ed.dx * pe[i])
                })
                .collect();
            let off = bl * S::from_real(-1.0 / ed.dx);
            let fact = TriFactor::new(diag, off, &tree.edges()[ei].id)?;
            let mut e1 = vec![S::ZERO; n_int];
            e1[0] = off;
            let mut em = vec![S::ZERO; n_int];
            em[n_int - 1] = off;
            xi.push(fact.solve(&e1));
            eta.push(fact.solve(&em));
            factors.push(fact);
        }

        // Node system: L_PP U_P + sum_e q_e u_near = rhs, with u_near
        // expanded through the interior responses.
        let nu = unknown_nodes.len();
        let node_lu = if nu > 0 {
            let mut a = vec![S::ZERO; nu * nu];
            for (row, &node) in unknown_nodes.iter().enumerate() {
                let mut diag = al.scale(node_volume[node])
                    + bl * S::from_real(node_pot[node]);
                for &ei in tree.incident_edges(node) {
                    let ed = &edges[ei];
                    diag = diag + bl * S::from_real(1.0 / ed.dx);
                    let q = bl * S::from_real(-1.0 / ed.dx);
                    let at_start = ed.start_node == node;
                    let near = if at_start { 0 } else { ed.m - 2 };
                    let (own, other) = if at_start {
                        (&xi[ei], &eta[ei])
                    } else {
                        (&eta[ei], &xi[ei])
                    };
                    // u_near = phi[near] - U_P own[near] - U_other other[near]
                    diag = diag - q * own[near];
                    let other_node = if at_start { ed.end_node } else { ed.start_node };
                    if let NodeRole::Unknown(col) = roles[other_node] {
                        a[row * nu + col] = a[row * nu + col] - q * other[near];
                    }
                }
                a[row * nu + row] = a[row * nu + row] + diag;
            }
            let names: Vec<String> = unknown_nodes
                .iter()
                .map(|&n| tree.nodes()[n].id.clone())
                .collect();
            Some(DenseLu::new(a, nu, &names)?)
        } else {
            None
        };

        Ok(Self {
            edges,
            roles,
            unknown_nodes,
            node_volume,
            node_pot,
            p: p.clone(),
            ar,
            br,
            bl,
            factors,
            xi,
            eta,
            node_lu,
        })
    }

    fn node_value(&self, field: &NetworkField<S>, node: usize, incident_edge: usize) -> S {
        let ed = &self.edges[incident_edge];
        if ed.start_node == node {
            field.per_edge[incident_edge][0]
        } else {
            field.per_edge[incident_edge][ed.m]
        }
    }

    /// Advance one step. `known_next[node]` must hold the Dirichlet value at
    /// the new time level for every known node.
    pub fn step(
        &self,
        tree: &MetricTree,
        u: &NetworkField<S>,
        known_next: &[Option<S>],
    ) -> Result<NetworkField<S>> {
        // y = ar M u + br A u over all rows.
        let mut rhs_int: Vec<Vec<S>> = Vec::with_capacity(self.edges.len());
        for (ei, ed) in self.edges.iter().enumerate() {
            let v = &u.per_edge[ei];
            let pe = &self.p.per_edge[ei];
            let mut rows = Vec::with_capacity(ed.m - 1);
            for i in 1..ed.m {
                let mass = self.ar.scale(ed.dx) * v[i];
                let stiff = S::from_real(2.0 / ed.dx + ed.dx * pe[i]) * v[i]
                    - (v[i - 1] + v[i + 1]).scale(1.0 / ed.dx);
                rows.push(mass + self.br * stiff);
            }
            rhs_int.push(rows);
        }

        let nu = self.unknown_nodes.len();
        let mut rhs_node = vec![S::ZERO; nu];
        for (row, &node) in self.unknown_nodes.iter().enumerate() {
            let any_edge = tree.incident_edges(node)[0];
            let u_p = self.node_value(u, node, any_edge);
            let mut y = self.ar.scale(self.node_volume[node]) * u_p
                + self.br * S::from_real(self.node_pot[node]) * u_p;
            for &ei in tree.incident_edges(node) {
                let ed = &self.edges[ei];
                let near_full = if ed.start_node == node { 1 } else { ed.m - 1 };
                let u_near = u.per_edge[ei][near_full];
                y = y + self.br * (u_p - u_near).scale(1.0 / ed.dx);
            }
            rhs_node[row] = y;
        }

        // Dirichlet couplings move to the right-hand side.
        for (ei, ed) in self.edges.iter().enumerate() {
            for (node, int_row) in [(ed.start_node, 0), (ed.end_node, ed.m - 2)] {
                if matches!(self.roles[node], NodeRole::Known) {
                    let h = known_next[node].expect("known node has a next value");
                    let q = self.bl * S::from_real(-1.0 / ed.dx);
                    rhs_int[ei][int_row] = rhs_int[ei][int_row] - q * h;
                }
            }
        }

        // Interior elimination.
        let phi: Vec<Vec<S>> = (0..self.edges.len())
            .map(|ei| self.factors[ei].solve(&rhs_int[ei]))
            .collect();

        // Node system right-hand side.
        for (row, &node) in self.unknown_nodes.iter().enumerate() {
            for &ei in tree.incident_edges(node) {
                let ed = &self.edges[ei];
                let at_start = ed.start_node == node;
                let near = if at_start { 0 } else { ed.m - 2 };
                let q = self.bl * S::from_real(-1.0 / ed.dx);
                rhs_node[row] = rhs_node[row] - q * phi[ei][near];
                let other_node = if at_start { ed.end_node } else { ed.start_node };
                if matches!(self.roles[other_node], NodeRole::Known) {
                    let other = if at_start { &self.eta[ei] } else { &self.xi[ei] };
                    let h = known_next[other_node].expect("known node has a next value");
                    rhs_node[row] = rhs_node[row] + q * (other[near] * h);
                }
            }
        }

        let node_values = match &self.node_lu {
            Some(lu) => lu.solve(&rhs_node),
            None => Vec::new(),
        };

        let mut value_at = vec![S::ZERO; self.roles.len()];
        for (node, role) in self.roles.iter().enumerate() {
            value_at[node] = match role {
                NodeRole::Unknown(idx) => node_values[*idx],
                NodeRole::Known => known_next[node].expect("known node has a next value"),
            };
        }

        // Reconstruct interiors and endpoints.
        let mut out = NetworkField {
            per_edge: self.edges.iter().map(|ed| vec![S::ZERO; ed.m + 1]).collect(),
        };
        for (ei, ed) in self.edges.iter().enumerate() {
            let alpha = value_at[ed.start_node];
            let beta = value_at[ed.end_node];
            let v = &mut out.per_edge[ei];
            v[0] = alpha;
            v[ed.m] = beta;
            for i in 1..ed.m {
                v[i] = phi[ei][i - 1] - alpha * self.xi[ei][i - 1] - beta * self.eta[ei][i - 1];
            }
            if v.iter().any(|x| !x.is_finite_scalar()) {
                return Err(Error::SingularSystem(tree.edges()[ei].id.clone()));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::parse_network;
    use crate::grid::discretize;

    #[test]
    fn tridiagonal_factor_solves() {
        // Solve a simple diagonally dominant system and check by residual.
        let diag: Vec<f64> = vec![4.0, 5.0, 6.0, 5.0];
        let off = -1.0;
        let f = TriFactor::new(diag.clone(), off, "t").unwrap();
        let rhs = vec![1.0, 2.0, 3.0, 4.0];
        let x = f.solve(&rhs);
        for i in 0..4 {
            let mut r = diag[i] * x[i];
            if i > 0 {
                r += off * x[i - 1];
            }
            if i < 3 {
                r += off * x[i + 1];
            }
            assert!((r - rhs[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn dense_lu_solves_with_pivoting() {
        // First pivot is zero, forcing a row swap.
        let a = vec![0.0, 2.0, 1.0, 1.0, 1.0, 3.0, 2.0, 0.0, 1.0];
        let lu = DenseLu::new(a.clone(), 3, &["a".into(), "b".into(), "c".into()]).unwrap();
        let x = lu.solve(&[5.0, 10.0, 7.0]);
        for i in 0..3 {
            let r: f64 = (0..3).map(|j| a[i * 3 + j] * x[j]).sum();
            assert!((r - [5.0, 10.0, 7.0][i]).abs() < 1e-12, "row {i}: {r}");
        }
    }

    #[test]
    fn singular_node_system_reports_node() {
        let g = parse_network("node A external\nnode B external\nedge e0 A B 1.0\n").unwrap();
        let grid = discretize(&g, 0.25, 0.8, 1.0).unwrap();
        // A huge negative potential makes the operator indefinite enough to
        // produce a (near-)singular vertex block only in pathological setups;
        // instead check the explicit singular path of the dense solver.
        let names = vec!["A".to_string()];
        assert!(matches!(
            DenseLu::<f64>::new(vec![0.0], 1, &names),
            Err(Error::SingularSystem(n)) if n == "A"
        ));
        let _ = (g, grid);
    }
}
