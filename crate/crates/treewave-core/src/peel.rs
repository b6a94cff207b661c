//! Staged recovery of per-edge potentials from boundary traces at all but
//! one external node.
//!
//! The driver walks the leaf-removal schedule: every current leaf edge is
//! recovered from the Cauchy pair at its leaf-side node, the data is pushed
//! across the edge, and once an internal node has only one undetermined
//! incident edge the continuity/flux balance hands that edge its own pair.
//! The observation window shrinks by the march cone at every transfer,
//! which the global horizon rule budgets for.
//!
//! Staged estimates see each edge from one side only, which leaves the last
//! few cells before each interior node weakly determined. A global
//! Gauss-Newton polish over the whole network (each Jacobian column is one
//! forward solve with a hat-function source) therefore refines the staged
//! result against all measured traces at once.

use std::collections::BTreeMap;

use crate::edge_inverse::{
    edge_transfer, recover_edge_potential, EdgeInverseProblem, InverseConfig,
    RecoveryDiagnostics,
};
use crate::error::{Error, Result};
use crate::field::{BoundaryData, EdgeField, NetworkField, SolutionField};
use crate::graph::{peel_schedule, EdgeEnd, MetricTree};
use crate::grid::{discretize, NetworkGrid};
use crate::measure::{norm_h1_time, norm_l2_time};
use crate::parallel::map_indexed;
use crate::trace::{extract_trace, TraceKind, TraceRecord};
use crate::wave::solve_wave;

/// Boundary measurements driving a reconstruction: outward-normal traces at
/// the measured external nodes, the prescribed Dirichlet record at every
/// external node, and the initial data per edge.
#[derive(Debug, Clone)]
pub struct Measurements {
    /// Outward Neumann trace per measured external node.
    pub neumann: BTreeMap<String, TraceRecord<f64>>,
    /// Prescribed Dirichlet series per external node (measured or not).
    pub dirichlet: BTreeMap<String, TraceRecord<f64>>,
    /// Initial position per edge id, in the edge's own orientation.
    pub u0: BTreeMap<String, EdgeField>,
    /// Initial velocity per edge id.
    pub u1: BTreeMap<String, EdgeField>,
}

impl Measurements {
    pub fn validate(&self, tree: &MetricTree, excluded: &str) -> Result<()> {
        for node in tree.external_nodes() {
            let id = &tree.nodes()[node].id;
            if !self.dirichlet.contains_key(id) {
                return Err(Error::MissingMeasurement(format!("dirichlet at {id}")));
            }
            if id != excluded && !self.neumann.contains_key(id) {
                return Err(Error::MissingMeasurement(format!("neumann at {id}")));
            }
        }
        for edge in tree.edges() {
            if !self.u0.contains_key(&edge.id) || !self.u1.contains_key(&edge.id) {
                return Err(Error::MissingMeasurement(format!("initial data on {}", edge.id)));
            }
        }
        Ok(())
    }

    /// Common observation window of the boundary records.
    pub fn window(&self) -> f64 {
        self.dirichlet
            .values()
            .chain(self.neumann.values())
            .map(|tr| tr.span())
            .fold(f64::INFINITY, f64::min)
    }
}

/// Boundary and initial data for a synthetic measurement run: a flat
/// initial state (keeping |u0| well away from zero) and per-node multitone
/// Dirichlet drives that start compatibly.
#[derive(Debug, Clone)]
pub struct DriveSpec {
    pub base: f64,
    pub tone_amp: f64,
}

impl Default for DriveSpec {
    fn default() -> Self {
        Self { base: 1.0, tone_amp: 0.4 }
    }
}

impl DriveSpec {
    pub fn u0(&self, _edge: usize, _x: f64) -> f64 {
        self.base
    }

    /// (1 - cos) tones keep h(0) and h'(0) compatible with the flat initial
    /// state; the frequencies vary per node so the tree is probed from
    /// every side differently.
    pub fn boundary_value(&self, node_index: usize, t: f64) -> f64 {
        let w1 = 2.0 + 0.7 * (node_index % 5) as f64;
        let w2 = 4.3 + 1.1 * (node_index % 3) as f64;
        self.base
            + self.tone_amp * (0.6 * (1.0 - (w1 * t).cos()) + 0.4 * (1.0 - (w2 * t).cos()))
    }

    pub fn boundary_data(&self, tree: &MetricTree, grid: &NetworkGrid) -> BoundaryData<f64> {
        BoundaryData::dirichlet_from_fn(tree, grid.steps, grid.dt, |node, t| {
            let idx = tree.node_idx(node).expect("external node");
            self.boundary_value(idx, t)
        })
    }
}

/// Interpolate per-edge sample tables onto a grid, defaulting to zero.
pub fn potential_field(
    tree: &MetricTree,
    grid: &NetworkGrid,
    potential: &BTreeMap<String, EdgeField>,
) -> NetworkField<f64> {
    NetworkField {
        per_edge: tree
            .edges()
            .iter()
            .enumerate()
            .map(|(ei, edge)| {
                let m = grid.edges[ei].m;
                match potential.get(&edge.id) {
                    Some(f) => (0..=m).map(|i| f.eval(i as f64 * grid.edges[ei].dx)).collect(),
                    None => vec![0.0; m + 1],
                }
            })
            .collect(),
    }
}

/// Forward-solve the tree with a known potential and record the traces a
/// reconstruction would see. The grid should be finer than any inversion
/// grid used later.
pub fn synthesize_measurements(
    tree: &MetricTree,
    grid: &NetworkGrid,
    potential: &BTreeMap<String, EdgeField>,
    drive: &DriveSpec,
    excluded: &str,
) -> Result<Measurements> {
    tree.node_idx(excluded)?;
    let p = potential_field(tree, grid, potential);
    let u0 = NetworkField::from_fn(grid, |e, x| drive.u0(e, x));
    let u1 = NetworkField::zeros(grid);
    let boundary = drive.boundary_data(tree, grid);
    let sol = solve_wave(tree, grid, &p, &u0, &u1, &boundary, None)?;

    let mut neumann = BTreeMap::new();
    let mut dirichlet = BTreeMap::new();
    for node in tree.external_nodes() {
        let id = tree.nodes()[node].id.clone();
        let edge = tree.incident_edges(node)[0];
        let edge_id = tree.edges()[edge].id.clone();
        if id != excluded {
            neumann.insert(
                id.clone(),
                extract_trace(&sol, tree, &id, TraceKind::NeumannOutward, &edge_id)?,
            );
        }
        dirichlet
            .insert(id.clone(), extract_trace(&sol, tree, &id, TraceKind::Dirichlet, &edge_id)?);
    }

    let mut u0_map = BTreeMap::new();
    let mut u1_map = BTreeMap::new();
    for (ei, edge) in tree.edges().iter().enumerate() {
        u0_map.insert(edge.id.clone(), EdgeField::new(edge.length, u0.per_edge[ei].clone()));
        u1_map.insert(edge.id.clone(), EdgeField::new(edge.length, u1.per_edge[ei].clone()));
    }
    Ok(Measurements { neumann, dirichlet, u0: u0_map, u1: u1_map })
}

/// Global observation horizon: 2.5 times the round trip to the deepest
/// node from the excluded one, so every stage retains a window longer than
/// twice its edge.
pub fn horizon_for(tree: &MetricTree, excluded: &str) -> Result<f64> {
    let node = tree.node_idx(excluded)?;
    Ok(5.0 * tree.depth_from(node))
}

/// Cauchy data known at a node for one incident edge, in global
/// orientation (Neumann signed outward from the edge at that node).
#[derive(Debug, Clone)]
struct NodeData {
    dirichlet: TraceRecord<f64>,
    neumann_outward: TraceRecord<f64>,
    low_confidence: bool,
}

/// Working state of the staged reduction.
pub struct PeelState<'a> {
    pub tree: &'a MetricTree,
    /// Edges not yet recovered (the current reduced graph).
    pub remaining: Vec<bool>,
    /// Recovered potential per edge id, global orientation.
    pub recovered: BTreeMap<String, EdgeField>,
    /// Known Cauchy data keyed by (node index, edge index).
    data: BTreeMap<(usize, usize), NodeData>,
    /// Largest Dirichlet spread seen at each transfer node.
    pub consistency: BTreeMap<String, f64>,
    /// Averaged Dirichlet record per internal node, filled by transfers.
    node_dirichlet: BTreeMap<usize, TraceRecord<f64>>,
    pub stage: usize,
}

/// Continuity/flux transfer at an internal node: with every incident edge
/// but one carrying far-end data, the remaining edge inherits the common
/// Dirichlet value (averaged; the spread is recorded) and the negated sum
/// of the outward derivatives.
pub fn node_transfer(
    state: &PeelState,
    node: usize,
) -> Result<(TraceRecord<f64>, TraceRecord<f64>, f64, bool)> {
    let tree = state.tree;
    let incident = tree.incident_edges(node);
    let unresolved: Vec<usize> =
        incident.iter().copied().filter(|&e| state.remaining[e]).collect();
    if unresolved.len() != 1 {
        return Err(Error::AmbiguousTransfer {
            node: tree.nodes()[node].id.clone(),
            count: unresolved.len(),
        });
    }
    let mut entries = Vec::new();
    for &e in incident {
        if e == unresolved[0] {
            continue;
        }
        let data = state.data.get(&(node, e)).ok_or_else(|| {
            Error::MissingMeasurement(format!(
                "transferred data at {} via {}",
                tree.nodes()[node].id,
                tree.edges()[e].id
            ))
        })?;
        entries.push(data);
    }

    // Common time grid: the finest dt over the shortest span.
    let dt = entries.iter().map(|d| d.dirichlet.dt).fold(f64::INFINITY, f64::min);
    let span = entries.iter().map(|d| d.dirichlet.span()).fold(f64::INFINITY, f64::min);
    let count = (span / dt).floor() as usize + 1;
    let low_confidence = entries.iter().any(|d| d.low_confidence);

    let resampled: Vec<(TraceRecord<f64>, TraceRecord<f64>)> = entries
        .iter()
        .map(|d| (d.dirichlet.resample(dt, count), d.neumann_outward.resample(dt, count)))
        .collect();

    let mut dir = vec![0.0; count];
    let mut neu = vec![0.0; count];
    let mut spread: f64 = 0.0;
    for k in 0..count {
        let vals: Vec<f64> = resampled.iter().map(|(d, _)| d.samples[k]).collect();
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        spread = spread.max(hi - lo);
        dir[k] = vals.iter().sum::<f64>() / vals.len() as f64;
        neu[k] = -resampled.iter().map(|(_, n)| n.samples[k]).sum::<f64>();
    }
    let id = tree.nodes()[node].id.clone();
    Ok((
        TraceRecord::new(&id, "", TraceKind::Dirichlet, dt, dir),
        TraceRecord::new(&id, "", TraceKind::NeumannOutward, dt, neu),
        spread,
        low_confidence,
    ))
}

#[derive(Debug, Clone)]
pub struct EdgeReport {
    pub edge: String,
    pub stage: usize,
    pub window: f64,
    pub final_j: f64,
    pub iterations: usize,
    pub converged: bool,
    pub low_confidence: bool,
    /// Relative L2 error against the supplied truth, when available.
    pub rel_error: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct PeelReport {
    pub stages: usize,
    pub edges: Vec<EdgeReport>,
    /// Largest Dirichlet spread seen at each transfer node.
    pub consistency: BTreeMap<String, f64>,
    /// Relative L2(network) error against the truth, when available.
    pub total_rel_error: Option<f64>,
    pub polish_passes: usize,
    /// Polish objective at the start and after every accepted pass.
    pub polish_objective: Vec<f64>,
}

/// Options beyond the per-edge solver settings.
#[derive(Debug, Clone)]
pub struct PeelOptions {
    pub inverse: InverseConfig,
    /// Admissible potential bound M.
    pub bound: f64,
    /// Global Gauss-Newton passes over the whole network after the staged
    /// sweep (0 disables polishing).
    pub polish_passes: usize,
    /// Cells per shortest edge in the polish forward solves.
    pub polish_divisor: f64,
    /// Minimum relative objective reduction a polish pass must deliver;
    /// below this the pass is chasing its own discretization floor and
    /// polishing stops.
    pub polish_min_gain: f64,
    /// Binomial smoothing passes applied to transferred traces (march
    /// noise sits near the grid scale; the physical signal does not).
    pub transfer_smoothing: usize,
    /// Re-recover every edge with far-end records once the transfers have
    /// filled in the interior node values. Helps when the records are very
    /// accurate, but trusts them as exact data, so it is off by default.
    pub refine_sweep: bool,
    pub threads: Option<usize>,
}

impl Default for PeelOptions {
    fn default() -> Self {
        // Noiseless reconstructions want almost no pull toward the zero
        // prior; noisy runs override alpha from the command line.
        let mut inverse = InverseConfig::default();
        inverse.alpha = Some(1e-8);
        Self {
            inverse,
            bound: 3.0,
            polish_passes: 4,
            polish_divisor: 100.0,
            polish_min_gain: 0.2,
            transfer_smoothing: 0,
            refine_sweep: false,
            threads: None,
        }
    }
}

type EdgeJob = (usize, usize, usize, NodeData);

/// Reconstruct every edge potential from the measurements, walking the
/// leaf-removal schedule and finishing with the global polish. Returns the
/// per-edge potentials (global orientation) and a report. Deterministic
/// for fixed options.
pub fn peel_tree(
    tree: &MetricTree,
    meas: &Measurements,
    excluded: &str,
    opts: &PeelOptions,
    truth: Option<&BTreeMap<String, EdgeField>>,
) -> Result<(BTreeMap<String, EdgeField>, PeelReport)> {
    let violations = crate::graph::validate_tree(tree);
    if !violations.is_empty() {
        let msgs: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        return Err(Error::InvalidTree(msgs.join("; ")));
    }
    meas.validate(tree, excluded)?;
    let plan = peel_schedule(tree, excluded)?;
    let excluded_idx = tree.node_idx(excluded)?;

    let mut state = PeelState {
        tree,
        remaining: vec![true; tree.edge_count()],
        recovered: BTreeMap::new(),
        data: BTreeMap::new(),
        consistency: BTreeMap::new(),
        node_dirichlet: BTreeMap::new(),
        stage: 0,
    };

    // Seed the measured external nodes.
    for node in tree.external_nodes() {
        if node == excluded_idx {
            continue;
        }
        let id = &tree.nodes()[node].id;
        let edge = tree.incident_edges(node)[0];
        state.data.insert(
            (node, edge),
            NodeData {
                dirichlet: meas.dirichlet[id].clone(),
                neumann_outward: meas.neumann[id].clone(),
                low_confidence: false,
            },
        );
    }

    let mut reports: Vec<EdgeReport> = Vec::new();
    let threads = crate::parallel::resolve_threads(opts.threads);

    for (stage_idx, stage) in plan.stages.iter().enumerate() {
        state.stage = stage_idx + 1;

        let mut jobs: Vec<EdgeJob> = Vec::new();
        for peel_edge in stage {
            let e = tree.edge_idx(&peel_edge.edge)?;
            let leaf = tree.node_idx(&peel_edge.leaf_side)?;
            let interior = tree.node_idx(&peel_edge.interior_side)?;
            let data = state
                .data
                .get(&(leaf, e))
                .ok_or_else(|| {
                    Error::MissingMeasurement(format!(
                        "Cauchy data for {} at {}",
                        peel_edge.edge, peel_edge.leaf_side
                    ))
                })?
                .clone();
            jobs.push((e, leaf, interior, data));
        }

        let results = map_indexed(&jobs, threads, |_, job| {
            recover_one_edge(tree, meas, excluded_idx, job, opts)
        });

        for ((e, _leaf, interior, data), result) in jobs.iter().zip(results) {
            let (p_hat, diag, far_d, far_n) = result?;
            let edge_id = tree.edges()[*e].id.clone();
            let low = data.low_confidence || !diag.converged;
            reports.push(EdgeReport {
                edge: edge_id.clone(),
                stage: state.stage,
                window: data.dirichlet.span(),
                final_j: diag.final_j,
                iterations: diag.iterations.len(),
                converged: diag.converged,
                low_confidence: low,
                rel_error: None,
            });
            state.recovered.insert(edge_id, p_hat);
            state.remaining[*e] = false;
            state.data.insert(
                (*interior, *e),
                NodeData { dirichlet: far_d, neumann_outward: far_n, low_confidence: low },
            );
        }

        // Transfers at nodes that now hold data on all but one edge.
        for node in tree.internal_nodes() {
            let unresolved: Vec<usize> = tree
                .incident_edges(node)
                .iter()
                .copied()
                .filter(|&e| state.remaining[e])
                .collect();
            if unresolved.len() != 1 || state.data.contains_key(&(node, unresolved[0])) {
                continue;
            }
            let (dir, neu, spread, low) = node_transfer(&state, node)?;
            state.consistency.insert(tree.nodes()[node].id.clone(), spread);
            state.node_dirichlet.insert(node, dir.clone());
            state.data.insert(
                (node, unresolved[0]),
                NodeData { dirichlet: dir, neumann_outward: neu, low_confidence: low },
            );
        }
    }

    assert!(
        state.remaining.iter().all(|r| !r),
        "schedule left an edge unrecovered; trees cannot do that"
    );

    // Refinement sweep: by now every interior node carries a Dirichlet
    // record, so each edge can be re-recovered with far-end data — the
    // configuration that resolves the last cells before the unobserved
    // end. The leaf-side data is unchanged.
    if opts.refine_sweep {
        let mut jobs: Vec<(EdgeJob, TraceRecord<f64>)> = Vec::new();
        for stage in &plan.stages {
            for peel_edge in stage {
                let e = tree.edge_idx(&peel_edge.edge)?;
                let leaf = tree.node_idx(&peel_edge.leaf_side)?;
                let interior = tree.node_idx(&peel_edge.interior_side)?;
                let data = state.data[&(leaf, e)].clone();
                let far = if interior == excluded_idx {
                    meas.dirichlet[&tree.nodes()[interior].id].clone()
                } else {
                    state.node_dirichlet[&interior].clone()
                };
                jobs.push(((e, leaf, interior, data), far));
            }
        }
        let results = map_indexed(&jobs, threads, |_, (job, far)| {
            recover_one_edge_with_far(tree, meas, job, far, opts)
        });
        for ((job, _), result) in jobs.iter().zip(results) {
            let (p_hat, diag) = result?;
            let edge_id = tree.edges()[job.0].id.clone();
            if let Some(report) = reports.iter_mut().find(|r| r.edge == edge_id) {
                report.final_j = diag.final_j;
                report.iterations += diag.iterations.len();
                report.converged = diag.converged;
            }
            state.recovered.insert(edge_id, p_hat);
        }
    }

    let mut potentials = state.recovered;
    let (polish_passes, polish_objective) = if opts.polish_passes > 0 {
        polish_network(tree, meas, excluded, &mut potentials, opts)?
    } else {
        (0, Vec::new())
    };

    // Error accounting against the truth, when supplied.
    let mut total_rel = None;
    if let Some(truth) = truth {
        let mut num = 0.0;
        let mut den = 0.0;
        for report in reports.iter_mut() {
            let t = &truth[&report.edge];
            let p = &potentials[&report.edge];
            let m = p.samples.len() - 1;
            let t_res = t.resample(m);
            let diff = EdgeField::new(
                p.length,
                p.samples.iter().zip(&t_res.samples).map(|(a, b)| a - b).collect(),
            );
            let err = diff.norm_l2();
            let scale = t_res.norm_l2();
            report.rel_error = Some(err / scale.max(1e-30));
            num += err * err;
            den += scale * scale;
        }
        total_rel = Some((num / den.max(1e-300)).sqrt());
    }

    Ok((
        potentials,
        PeelReport {
            stages: plan.stages.len(),
            edges: reports,
            consistency: state.consistency,
            total_rel_error: total_rel,
            polish_passes,
            polish_objective,
        },
    ))
}

/// Recover one staged edge and compute its far-end Cauchy pair.
fn recover_one_edge(
    tree: &MetricTree,
    meas: &Measurements,
    excluded_idx: usize,
    job: &EdgeJob,
    opts: &PeelOptions,
) -> Result<(EdgeField, RecoveryDiagnostics, TraceRecord<f64>, TraceRecord<f64>)> {
    let (e, leaf, interior, data) = job;
    let edge = &tree.edges()[*e];
    let mirrored = matches!(tree.edge_end(*e, *leaf)?, EdgeEnd::End);

    // Canonical frame: known end at x = 0, so d/dx = -(outward).
    let neumann_local = data.neumann_outward.map(|v| -v);
    let mut u0 = meas.u0[&edge.id].clone();
    let mut u1 = meas.u1[&edge.id].clone();
    if mirrored {
        u0 = u0.mirrored();
        u1 = u1.mirrored();
    }
    // A far-end Dirichlet record exists when the interior side is the
    // excluded external node: its boundary data is prescribed.
    let far = (*interior == excluded_idx).then(|| {
        meas.dirichlet[&tree.nodes()[*interior].id]
            .resample(data.dirichlet.dt, data.dirichlet.len())
    });
    let lower = u0.min_abs();
    let prob = EdgeInverseProblem::new(
        &edge.id,
        edge.length,
        data.dirichlet.clone(),
        neumann_local,
        far,
        u0,
        u1,
        lower.max(1e-9),
        opts.bound,
    )?;
    let (p_local, diag) = recover_edge_potential(&prob, &opts.inverse)?;
    let sim_cells = (p_local.samples.len() - 1) * opts.inverse.sim_refine.max(1);
    let (far_d_raw, far_n_raw) = edge_transfer(&p_local, &prob, sim_cells)?;
    let mut far_d = far_d_raw.smoothed(opts.transfer_smoothing);
    let mut far_n = far_n_raw.smoothed(opts.transfer_smoothing);
    let interior_id = tree.nodes()[*interior].id.clone();
    far_d.node = interior_id.clone();
    // Outward at the march's far end is +d/dx in the canonical frame,
    // which is outward from the edge at the interior node.
    far_n.node = interior_id;
    let p_global = if mirrored { p_local.mirrored() } else { p_local };
    Ok((p_global, diag, far_d, far_n))
}

/// Re-recover one edge with a far-end Dirichlet record available.
fn recover_one_edge_with_far(
    tree: &MetricTree,
    meas: &Measurements,
    job: &EdgeJob,
    far: &TraceRecord<f64>,
    opts: &PeelOptions,
) -> Result<(EdgeField, RecoveryDiagnostics)> {
    let (e, leaf, _interior, data) = job;
    let edge = &tree.edges()[*e];
    let mirrored = matches!(tree.edge_end(*e, *leaf)?, EdgeEnd::End);
    let neumann_local = data.neumann_outward.map(|v| -v);
    let mut u0 = meas.u0[&edge.id].clone();
    let mut u1 = meas.u1[&edge.id].clone();
    if mirrored {
        u0 = u0.mirrored();
        u1 = u1.mirrored();
    }
    // The far record may live on a shorter window than the leaf data; the
    // problem window is their overlap. March noise in a transferred record
    // sits near the grid scale, where a Dirichlet boundary error excites
    // an outsized Neumann response, so the record is low-passed first.
    let far = far.smoothed(opts.transfer_smoothing);
    let window = data.dirichlet.span().min(far.span());
    let dt = data.dirichlet.dt;
    let count = (window / dt).floor() as usize + 1;
    let lower = u0.min_abs();
    let prob = EdgeInverseProblem::new(
        &edge.id,
        edge.length,
        data.dirichlet.resample(dt, count),
        neumann_local.resample(dt, count),
        Some(far.resample(dt, count)),
        u0,
        u1,
        lower.max(1e-9),
        opts.bound,
    )?;
    let (p_local, diag) = recover_edge_potential(&prob, &opts.inverse)?;
    let p_global = if mirrored { p_local.mirrored() } else { p_local };
    Ok((p_global, diag))
}

const MU_SCALE: f64 = 1e-3;
const LAMBDA0: f64 = 1.0;

/// Global Gauss-Newton refinement of the staged estimate: minimize the sum
/// of squared mismatches of all measured outward traces over every edge
/// dof. Each Jacobian column is one tangent forward solve driven by a
/// hat-function source. Returns the number of accepted passes.
fn polish_network(
    tree: &MetricTree,
    meas: &Measurements,
    excluded: &str,
    potentials: &mut BTreeMap<String, EdgeField>,
    opts: &PeelOptions,
) -> Result<(usize, Vec<f64>)> {
    let min_len = tree.edges().iter().map(|e| e.length).fold(f64::INFINITY, f64::min);
    let window = meas.window() * 0.999;
    let grid =
        discretize(tree, min_len / opts.polish_divisor, crate::grid::DEFAULT_CFL, window)?;
    let excluded_idx = tree.node_idx(excluded)?;

    let measured: Vec<(String, String)> = tree
        .external_nodes()
        .filter(|&n| n != excluded_idx)
        .map(|n| {
            let edge = tree.incident_edges(n)[0];
            (tree.nodes()[n].id.clone(), tree.edges()[edge].id.clone())
        })
        .collect();

    let u0 = NetworkField::from_fn(&grid, |ei, x| meas.u0[&tree.edges()[ei].id].eval(x));
    let u1 = NetworkField::from_fn(&grid, |ei, x| meas.u1[&tree.edges()[ei].id].eval(x));
    let boundary = BoundaryData::dirichlet_from_fn(tree, grid.steps, grid.dt, |node, t| {
        meas.dirichlet[node].eval(t)
    });

    let weights: Vec<f64> = (0..=grid.steps)
        .map(|k| {
            let w = if k == 0 || k == grid.steps { 0.5 } else { 1.0 };
            (w * grid.dt).sqrt()
        })
        .collect();
    let data_resampled: BTreeMap<String, TraceRecord<f64>> = measured
        .iter()
        .map(|(id, _)| (id.clone(), meas.neumann[id].resample(grid.dt, grid.steps + 1)))
        .collect();

    // Square-root-weighted outward traces stacked over the measured nodes.
    let stacked_trace = |sol: &SolutionField<f64>| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(measured.len() * (grid.steps + 1));
        for (id, edge_id) in &measured {
            let tr = extract_trace(sol, tree, id, TraceKind::NeumannOutward, edge_id)?;
            for (k, v) in tr.samples.iter().enumerate() {
                out.push(weights[k] * v);
            }
        }
        Ok(out)
    };
    let stacked_data: Vec<f64> = measured
        .iter()
        .flat_map(|(id, _)| {
            let data = &data_resampled[id];
            data.samples
                .iter()
                .enumerate()
                .map(|(k, v)| weights[k] * v)
                .collect::<Vec<f64>>()
        })
        .collect();

    // Dof layout: each edge keeps its staged sampling.
    let layout: Vec<(usize, usize)> = tree
        .edges()
        .iter()
        .enumerate()
        .map(|(ei, e)| (ei, potentials[&e.id].samples.len() - 1))
        .collect();
    let dof_meta: Vec<(usize, usize)> = layout
        .iter()
        .flat_map(|&(ei, m)| (0..=m).map(move |i| (ei, i)))
        .collect();
    let n_dofs = dof_meta.len();
    let threads = crate::parallel::resolve_threads(opts.threads);

    let forward = |pots: &BTreeMap<String, EdgeField>| -> Result<(SolutionField<f64>, Vec<f64>, f64)> {
        let p_net = potential_field(tree, &grid, pots);
        let sol = solve_wave(tree, &grid, &p_net, &u0, &u1, &boundary, None)?;
        let trace = stacked_trace(&sol)?;
        let r: Vec<f64> = trace.iter().zip(&stacked_data).map(|(a, b)| a - b).collect();
        let j = 0.5 * r.iter().map(|v| v * v).sum::<f64>();
        if !j.is_finite() {
            return Err(Error::NonFinite { iter: 0 });
        }
        Ok((sol, r, j))
    };

    let (mut base_sol, mut r, mut j) = forward(potentials)?;
    let mut lambda = LAMBDA0;
    let mut accepted_passes = 0;
    let mut objective = vec![j];
    // The staged estimate anchors the directions the traces barely see.
    let anchor: Vec<f64> = layout
        .iter()
        .flat_map(|&(ei, _)| potentials[&tree.edges()[ei].id].samples.clone())
        .collect();

    for _pass in 0..opts.polish_passes {
        let p_net = potential_field(tree, &grid, potentials);
        let zero = NetworkField::zeros(&grid);
        let zero_b = BoundaryData::zero_dirichlet(tree, grid.steps);
        let base_ref = &base_sol;
        let columns = map_indexed(&dof_meta, threads, |_, &(ei, dof)| -> Result<Vec<f64>> {
            let m_e = layout[ei].1;
            let mut hat = vec![0.0; m_e + 1];
            hat[dof] = 1.0;
            let hat_field = EdgeField::new(tree.edges()[ei].length, hat);
            let dx_e = grid.edges[ei].dx;
            // Tangent field: same operator, zero data, source -hat * u.
            let src = move |e: usize, i: usize, k: usize| -> f64 {
                if e != ei {
                    0.0
                } else {
                    -hat_field.eval(i as f64 * dx_e) * base_ref.snapshots[k].per_edge[e][i]
                }
            };
            let tangent = solve_wave(tree, &grid, &p_net, &zero, &zero, &zero_b, Some(&src))?;
            stacked_trace(&tangent)
        });
        let mut jac: Vec<Vec<f64>> = Vec::with_capacity(n_dofs);
        for col in columns {
            jac.push(col?);
        }

        // Normal equations with Levenberg damping.
        let mut h = vec![0.0; n_dofs * n_dofs];
        let mut g = vec![0.0; n_dofs];
        for a in 0..n_dofs {
            g[a] = jac[a].iter().zip(&r).map(|(ja, ri)| ja * ri).sum();
            for b in a..n_dofs {
                let v: f64 = jac[a].iter().zip(&jac[b]).map(|(x, y)| x * y).sum();
                h[a * n_dofs + b] = v;
                h[b * n_dofs + a] = v;
            }
        }
        let diag_scale =
            (0..n_dofs).map(|a| h[a * n_dofs + a]).fold(0.0f64, f64::max).max(1e-30);
        // Anchor stiffness: well below the data curvature of the directions
        // the traces determine, far above rounding for the rest.
        let mu = MU_SCALE * diag_scale;
        let current: Vec<f64> = layout
            .iter()
            .flat_map(|&(ei, _)| potentials[&tree.edges()[ei].id].samples.clone())
            .collect();
        for a in 0..n_dofs {
            h[a * n_dofs + a] += mu;
            g[a] += mu * (current[a] - anchor[a]);
        }

        let mut improved = false;
        for _try in 0..8 {
            let mut h_damped = h.clone();
            for a in 0..n_dofs {
                // Blended Marquardt damping: relative to each dof's own
                // curvature with an absolute floor.
                h_damped[a * n_dofs + a] +=
                    lambda * (h[a * n_dofs + a] + 1e-3 * diag_scale);
            }
            let rhs: Vec<f64> = g.iter().map(|v| -v).collect();
            let Some(delta) = crate::edge_inverse::solve_dense(h_damped, rhs) else {
                lambda *= 30.0;
                continue;
            };
            let step_inf = delta.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if step_inf > 1.0 {
                lambda *= 30.0;
                continue;
            }
            let mut trial = potentials.clone();
            let mut cursor = 0;
            for &(ei, m_e) in &layout {
                let id = &tree.edges()[ei].id;
                let field = trial.get_mut(id).expect("edge present");
                for i in 0..=m_e {
                    field.samples[i] =
                        (field.samples[i] + delta[cursor + i]).clamp(-opts.bound, opts.bound);
                }
                cursor += m_e + 1;
            }
            match forward(&trial) {
                Ok((sol_new, r_new, j_new)) if j_new <= (1.0 - opts.polish_min_gain) * j => {
                    *potentials = trial;
                    base_sol = sol_new;
                    r = r_new;
                    j = j_new;
                    objective.push(j);
                    lambda = (lambda / 3.0).max(1e-10);
                    improved = true;
                    accepted_passes += 1;
                    break;
                }
                Ok(_) | Err(Error::NonFinite { .. }) => {
                    lambda *= 30.0;
                }
                Err(e) => return Err(e),
            }
        }
        if !improved {
            break;
        }
    }
    Ok((accepted_passes, objective))
}

#[derive(Debug, Clone)]
pub struct NodeMismatch {
    pub node: String,
    pub l2: f64,
    pub h1: f64,
    pub data_l2: f64,
    /// Set when the measured trace is too small for the mismatch to mean
    /// anything.
    pub degenerate: bool,
}

/// A-posteriori check of a recovered potential: forward-solve the network
/// with it and compare the outward traces at the measured nodes.
pub fn residual_certificate(
    tree: &MetricTree,
    meas: &Measurements,
    excluded: &str,
    potentials: &BTreeMap<String, EdgeField>,
    divisor: f64,
) -> Result<Vec<NodeMismatch>> {
    let min_len = tree.edges().iter().map(|e| e.length).fold(f64::INFINITY, f64::min);
    let window = meas.window() * 0.999;
    let grid = discretize(tree, min_len / divisor, crate::grid::DEFAULT_CFL, window)?;
    let excluded_idx = tree.node_idx(excluded)?;
    let p_net = potential_field(tree, &grid, potentials);
    let u0 = NetworkField::from_fn(&grid, |ei, x| meas.u0[&tree.edges()[ei].id].eval(x));
    let u1 = NetworkField::from_fn(&grid, |ei, x| meas.u1[&tree.edges()[ei].id].eval(x));
    let boundary = BoundaryData::dirichlet_from_fn(tree, grid.steps, grid.dt, |node, t| {
        meas.dirichlet[node].eval(t)
    });
    let sol = solve_wave(tree, &grid, &p_net, &u0, &u1, &boundary, None)?;

    let mut out = Vec::new();
    for node in tree.external_nodes() {
        if node == excluded_idx {
            continue;
        }
        let id = tree.nodes()[node].id.clone();
        let edge_id = tree.edges()[tree.incident_edges(node)[0]].id.clone();
        let sim = extract_trace(&sol, tree, &id, TraceKind::NeumannOutward, &edge_id)?;
        let data = meas.neumann[&id].resample(grid.dt, grid.steps + 1);
        let diff = sim.diff(&data)?;
        let data_l2 = norm_l2_time(&data);
        out.push(NodeMismatch {
            node: id,
            l2: norm_l2_time(&diff),
            h1: norm_h1_time(&diff),
            data_l2,
            degenerate: data_l2 < 1e-12,
        });
    }
    Ok(out)
}
