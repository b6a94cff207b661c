//! Time series of nodal values and normal derivatives, plus node-coupling
//! consistency diagnostics.

use crate::error::{Error, Result};
use crate::field::{Scalar, SolutionField};
use crate::graph::{EdgeEnd, MetricTree};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceKind {
    Dirichlet,
    /// Spatial derivative signed outward from the edge at the node.
    NeumannOutward,
}

/// Uniformly sampled time series attached to a (node, edge) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord<S: Scalar = f64> {
    pub node: String,
    pub edge: String,
    pub kind: TraceKind,
    /// Time of the first sample (0 except for derived series).
    pub t0: f64,
    pub dt: f64,
    pub samples: Vec<S>,
}

impl<S: Scalar> TraceRecord<S> {
    pub fn new(node: &str, edge: &str, kind: TraceKind, dt: f64, samples: Vec<S>) -> Self {
        assert!(dt > 0.0, "trace needs a positive time step");
        Self { node: node.into(), edge: edge.into(), kind, t0: 0.0, dt, samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Duration covered by the samples.
    pub fn span(&self) -> f64 {
        (self.samples.len().saturating_sub(1)) as f64 * self.dt
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    /// Linear interpolation at absolute time `t`, clamped to the record.
    pub fn eval(&self, t: f64) -> S {
        let n = self.samples.len();
        if n == 1 {
            return self.samples[0];
        }
        let s = ((t - self.t0) / self.dt).clamp(0.0, (n - 1) as f64);
        let i = (s.floor() as usize).min(n - 2);
        let w = s - i as f64;
        self.samples[i].scale(1.0 - w) + self.samples[i + 1].scale(w)
    }

    /// Resample onto a new uniform grid starting at t = 0.
    pub fn resample(&self, dt: f64, count: usize) -> TraceRecord<S> {
        let samples = (0..count).map(|k| self.eval(k as f64 * dt)).collect();
        TraceRecord { node: self.node.clone(), edge: self.edge.clone(), kind: self.kind, t0: 0.0, dt, samples }
    }

    pub fn max_abs(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, v| m.max(v.abs2().sqrt()))
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> TraceRecord<S> {
        TraceRecord { samples: self.samples.iter().map(|&v| f(v)).collect(), ..self.clone() }
    }

    /// Repeated binomial (1/4, 1/2, 1/4) smoothing: attenuates content
    /// near the sampling scale while leaving well-resolved signal intact.
    pub fn smoothed(&self, passes: usize) -> TraceRecord<S> {
        let mut v = self.samples.clone();
        let n = v.len();
        if n < 3 {
            return self.clone();
        }
        for _ in 0..passes {
            let mut out = v.clone();
            for i in 1..n - 1 {
                out[i] = v[i].scale(0.5) + (v[i - 1] + v[i + 1]).scale(0.25);
            }
            v = out;
        }
        TraceRecord { samples: v, ..self.clone() }
    }

    /// Pointwise difference; shapes must agree.
    pub fn diff(&self, other: &TraceRecord<S>) -> Result<TraceRecord<S>> {
        if self.samples.len() != other.samples.len() || (self.dt - other.dt).abs() > 1e-12 {
            return Err(Error::ShapeMismatch("trace grids differ".into()));
        }
        Ok(TraceRecord {
            samples: self
                .samples
                .iter()
                .zip(&other.samples)
                .map(|(&a, &b)| a - b)
                .collect(),
            ..self.clone()
        })
    }
}

/// One-sided second-order spatial derivative at an edge endpoint, signed
/// outward from the edge.
fn outward_derivative<S: Scalar>(v: &[S], end: EdgeEnd, dx: f64) -> S {
    let m = v.len() - 1;
    match end {
        // Outward at x = 0 is -d/dx.
        EdgeEnd::Start => (v[0].scale(3.0) - v[1].scale(4.0) + v[2]).scale(1.0 / (2.0 * dx)),
        EdgeEnd::End => (v[m].scale(3.0) - v[m - 1].scale(4.0) + v[m - 2]).scale(1.0 / (2.0 * dx)),
    }
}

/// Third-order one-sided variant, used as an independent probe of the node
/// coupling (it does not match the stencil the solvers enforce).
fn outward_derivative_probe<S: Scalar>(v: &[S], end: EdgeEnd, dx: f64) -> S {
    let m = v.len() - 1;
    match end {
        EdgeEnd::Start => (v[0].scale(11.0) - v[1].scale(18.0) + v[2].scale(9.0) - v[3].scale(2.0))
            .scale(1.0 / (6.0 * dx)),
        EdgeEnd::End => (v[m].scale(11.0) - v[m - 1].scale(18.0) + v[m - 2].scale(9.0)
            - v[m - 3].scale(2.0))
        .scale(1.0 / (6.0 * dx)),
    }
}

/// Extract a nodal time series from a solution. For `NeumannOutward` the
/// derivative is one-sided second order, signed out of the edge.
pub fn extract_trace<S: Scalar>(
    sol: &SolutionField<S>,
    tree: &MetricTree,
    node_id: &str,
    kind: TraceKind,
    edge_id: &str,
) -> Result<TraceRecord<S>> {
    let node = tree.node_idx(node_id)?;
    let edge = tree.edge_idx(edge_id)?;
    let end = tree.edge_end(edge, node)?;
    let dx = sol.grid.edges[edge].dx;
    let samples: Vec<S> = sol
        .snapshots
        .iter()
        .map(|snap| {
            let v = &snap.per_edge[edge];
            match kind {
                TraceKind::Dirichlet => match end {
                    EdgeEnd::Start => v[0],
                    EdgeEnd::End => v[v.len() - 1],
                },
                TraceKind::NeumannOutward => outward_derivative(v, end, dx),
            }
        })
        .collect();
    Ok(TraceRecord::new(node_id, edge_id, kind, sol.grid.dt, samples))
}

/// Per-internal-node time series of `|sum of outward derivatives|`, using
/// the same one-sided stencil as the node enforcement (the wave solver makes
/// this vanish to rounding; the implicit solvers leave an O(dx) footprint).
pub fn kirchhoff_residual<S: Scalar>(
    sol: &SolutionField<S>,
    tree: &MetricTree,
) -> Vec<(String, TraceRecord<f64>)> {
    kirchhoff_residual_impl(sol, tree, outward_derivative)
}

/// Kirchhoff residual measured with a third-order stencil. This is an
/// independent probe: it converges to zero at the true discretization rate
/// instead of reproducing the solver's own node equation.
pub fn kirchhoff_residual_probe<S: Scalar>(
    sol: &SolutionField<S>,
    tree: &MetricTree,
) -> Vec<(String, TraceRecord<f64>)> {
    kirchhoff_residual_impl(sol, tree, outward_derivative_probe)
}

fn kirchhoff_residual_impl<S: Scalar>(
    sol: &SolutionField<S>,
    tree: &MetricTree,
    deriv: fn(&[S], EdgeEnd, f64) -> S,
) -> Vec<(String, TraceRecord<f64>)> {
    tree.internal_nodes()
        .map(|node| {
            let ends: Vec<(usize, EdgeEnd, f64)> = tree
                .incident_edges(node)
                .iter()
                .map(|&ei| (ei, tree.edge_end(ei, node).expect("incident"), sol.grid.edges[ei].dx))
                .collect();
            // Snapshot 0 is the supplied initial datum, which owes the node
            // coupling nothing; the residual starts at the first computed
            // level.
            let samples: Vec<f64> = sol
                .snapshots
                .iter()
                .skip(1)
                .map(|snap| {
                    let mut sum = S::ZERO;
                    for &(ei, end, dx) in &ends {
                        sum = sum + deriv(&snap.per_edge[ei], end, dx);
                    }
                    sum.abs2().sqrt()
                })
                .collect();
            let id = tree.nodes()[node].id.clone();
            let mut tr =
                TraceRecord::new(&id, "", TraceKind::NeumannOutward, sol.grid.dt, samples);
            tr.t0 = sol.grid.dt;
            (id, tr)
        })
        .collect()
}

/// Largest mismatch of incident endpoint samples over all internal nodes
/// and all time levels.
pub fn continuity_residual<S: Scalar>(sol: &SolutionField<S>, tree: &MetricTree) -> f64 {
    sol.snapshots
        .iter()
        .map(|snap| snap.continuity_gap(tree))
        .fold(0.0, f64::max)
}

/// Write aligned traces as CSV: time first, one column per series (complex
/// samples emit `_re`/`_im` column pairs), 17 significant digits.
pub fn write_traces_csv<S: Scalar, W: std::io::Write>(
    out: &mut W,
    names: &[String],
    traces: &[&TraceRecord<S>],
) -> Result<()> {
    assert_eq!(names.len(), traces.len());
    let first = traces.first().expect("at least one trace");
    for tr in traces {
        if tr.samples.len() != first.samples.len() || (tr.dt - first.dt).abs() > 1e-12 {
            return Err(Error::ShapeMismatch("traces are not on a common time grid".into()));
        }
    }
    let mut header = vec!["t".to_string()];
    for (name, tr) in names.iter().zip(traces) {
        match tr.samples.first().map(|s| s.parts()) {
            Some((_, Some(_))) => {
                header.push(format!("{name}_re"));
                header.push(format!("{name}_im"));
            }
            _ => header.push(name.clone()),
        }
    }
    writeln!(out, "{}", header.join(","))?;
    for k in 0..first.samples.len() {
        let mut row = vec![crate::report::format_float(first.time(k))];
        for tr in traces {
            let (re, im) = tr.samples[k].parts();
            row.push(crate::report::format_float(re));
            if let Some(im) = im {
                row.push(crate::report::format_float(im));
            }
        }
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

/// Parse a CSV produced by [`write_traces_csv`] (real columns only).
/// Returns the column names and one series per column; the time column must
/// be uniform.
pub fn read_traces_csv(text: &str) -> Result<(f64, Vec<String>, Vec<Vec<f64>>)> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Parse { line: 1, msg: "empty CSV".into() })?;
    let names: Vec<String> = header.split(',').skip(1).map(|s| s.trim().to_string()).collect();
    let mut times = Vec::new();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let t: f64 = fields
            .next()
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| Error::Parse { line: lineno + 1, msg: "bad time value".into() })?;
        times.push(t);
        for col in columns.iter_mut() {
            let v: f64 = fields
                .next()
                .ok_or_else(|| Error::Parse { line: lineno + 1, msg: "missing column".into() })?
                .trim()
                .parse()
                .map_err(|_| Error::Parse { line: lineno + 1, msg: "bad value".into() })?;
            col.push(v);
        }
    }
    if times.len() < 2 {
        return Err(Error::Parse { line: 1, msg: "need at least two rows".into() });
    }
    let dt = times[1] - times[0];
    for w in times.windows(2) {
        if ((w[1] - w[0]) - dt).abs() > 1e-9 * dt.abs().max(1.0) {
            return Err(Error::Parse { line: 1, msg: "time column is not uniform".into() });
        }
    }
    Ok((dt, names, columns))
}
