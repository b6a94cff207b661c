//! Experiment drivers measuring the empirical constants behind the energy,
//! trace, observability and stability estimates, plus the uniqueness
//! cross-checks between the three equations.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::field::{BoundaryData, EdgeField, NetworkField};
use crate::graph::MetricTree;
use crate::grid::{discretize_default, NetworkGrid};
use crate::heat::solve_heat;
use crate::measure::{gaussian_vector, norm_h1_time, norm_l2_space, norm_l2_time, NoiseSpec};
use crate::parallel::map_indexed;
use crate::report::{format_float, graph_hash, CsvBlock, Report};
use crate::schrodinger::solve_schrodinger;
use crate::trace::{extract_trace, TraceKind};
use crate::wave::{energy, solve_wave, SourceFn};

/// Random smooth potential: a low-order Fourier series with decaying
/// coefficients, clipped into [-bound, bound]. Deterministic per seed.
pub fn random_smooth_potential(length: f64, cells: usize, seed: u64, bound: f64) -> EdgeField {
    let coef = gaussian_vector(seed, 7);
    let amp = 0.5 * bound;
    EdgeField::from_fn(length, cells, |x| {
        let s = x / length;
        let mut v = 0.7 * amp * coef[0];
        for n in 1..=3usize {
            let decay = amp / (1.0 + (n * n) as f64);
            v += decay * coef[2 * n - 1] * (n as f64 * std::f64::consts::PI * s).sin();
            v += decay * coef[2 * n] * (n as f64 * std::f64::consts::PI * s).cos();
        }
        v.clamp(-bound, bound)
    })
}

/// Per-edge random smooth potentials for a whole tree.
pub fn random_network_potential(
    tree: &MetricTree,
    cells: usize,
    seed: u64,
    bound: f64,
) -> std::collections::BTreeMap<String, EdgeField> {
    tree.edges()
        .iter()
        .enumerate()
        .map(|(ei, e)| {
            let s = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(ei as u64);
            (e.id.clone(), random_smooth_potential(e.length, cells, s, bound))
        })
        .collect()
}

/// Initial state for stability runs: 1 + 0.1 sin(pi x / len) per edge, so
/// the nodes stay continuous and |u0| >= 0.9 everywhere.
pub fn stability_initial(grid: &NetworkGrid, tree: &MetricTree) -> NetworkField<f64> {
    NetworkField::from_fn(grid, |ei, x| {
        let len = tree.edges()[ei].length;
        1.0 + 0.1 * (std::f64::consts::PI * x / len).sin()
    })
}

fn measured_nodes(tree: &MetricTree, excluded: usize) -> Vec<(String, String)> {
    tree.external_nodes()
        .filter(|&n| n != excluded)
        .map(|n| {
            let edge = tree.incident_edges(n)[0];
            (tree.nodes()[n].id.clone(), tree.edges()[edge].id.clone())
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Observability
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ObservabilityRun {
    pub member: usize,
    pub horizon: f64,
    /// ||a||^2 over the network.
    pub numerator: f64,
    /// Sum of squared L2 trace norms over the measured nodes.
    pub denominator: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone)]
pub struct ObservabilityOutcome {
    pub runs: Vec<ObservabilityRun>,
    /// (horizon, max ratio) per requested horizon — the empirical constant.
    pub constants: Vec<(f64, f64)>,
    /// Ensemble members dropped because the initial velocity vanished.
    pub dropped: Vec<usize>,
}

/// Measure the empirical observability constant: the system starts at rest
/// with velocity `a` and homogeneous Dirichlet ends, and the ratio of
/// ||a||^2 to the measured trace energies is maximized over the ensemble.
pub fn run_observability(
    tree: &MetricTree,
    potential: &std::collections::BTreeMap<String, EdgeField>,
    ensemble: &[Box<dyn Fn(usize, f64) -> f64 + Sync>],
    horizons: &[f64],
    excluded: &str,
    threads: Option<usize>,
) -> Result<ObservabilityOutcome> {
    let excluded_idx = tree.node_idx(excluded)?;
    let measured = measured_nodes(tree, excluded_idx);
    let threads = crate::parallel::resolve_threads(threads);

    let mut runs = Vec::new();
    let mut dropped = Vec::new();
    let mut constants = Vec::new();
    for &horizon in horizons {
        let grid = discretize_default(tree, horizon)?;
        let p = crate::peel::potential_field(tree, &grid, potential);
        let jobs: Vec<usize> = (0..ensemble.len()).collect();
        let results =
            map_indexed(&jobs, threads, |_, &member| -> Result<Option<ObservabilityRun>> {
                let a = NetworkField::from_fn(&grid, |e, x| ensemble[member](e, x));
                let numerator = norm_l2_space(&a, &grid).powi(2);
                if numerator < 1e-14 {
                    return Ok(None);
                }
                let zero = NetworkField::zeros(&grid);
                let boundary = BoundaryData::zero_dirichlet(tree, grid.steps);
                let sol = solve_wave(tree, &grid, &p, &zero, &a, &boundary, None)?;
                let mut denominator = 0.0;
                for (node, edge) in &measured {
                    let tr = extract_trace(&sol, tree, node, TraceKind::NeumannOutward, edge)?;
                    denominator += norm_l2_time(&tr).powi(2);
                }
                Ok(Some(ObservabilityRun {
                    member,
                    horizon,
                    numerator,
                    denominator,
                    ratio: numerator / denominator.max(1e-300),
                }))
            });
        let mut max_ratio: f64 = 0.0;
        for (member, result) in jobs.iter().zip(results) {
            match result? {
                Some(run) => {
                    max_ratio = max_ratio.max(run.ratio);
                    runs.push(run);
                }
                None => dropped.push(*member),
            }
        }
        constants.push((horizon, max_ratio));
    }
    dropped.sort_unstable();
    dropped.dedup();
    Ok(ObservabilityOutcome { runs, constants, dropped })
}

impl ObservabilityOutcome {
    pub fn to_report(&self, tree: &MetricTree, seed_note: &str) -> Report {
        let mut r = Report::new("observability");
        r.set("graph-hash", &graph_hash(tree));
        r.set("seed", seed_note);
        let mut block =
            CsvBlock::new("runs", &["member", "horizon", "numerator", "denominator", "ratio"]);
        for run in &self.runs {
            block.push(vec![
                run.member as f64,
                run.horizon,
                run.numerator,
                run.denominator,
                run.ratio,
            ]);
        }
        r.blocks.push(block);
        let mut agg = CsvBlock::new("constants", &["horizon", "max_ratio"]);
        for &(t, c) in &self.constants {
            agg.push(vec![t, c]);
        }
        r.blocks.push(agg);
        r
    }
}

// ---------------------------------------------------------------------------
// Stability
// ---------------------------------------------------------------------------

type PotentialPair =
    (std::collections::BTreeMap<String, EdgeField>, std::collections::BTreeMap<String, EdgeField>);

/// One potential pair in a stability ensemble.
#[derive(Debug, Clone)]
pub struct StabilityRun {
    pub member: usize,
    /// ||q - p|| over the network.
    pub numerator: f64,
    /// Sum over measured nodes of the H1 norms of the trace differences.
    pub denominator_h1: f64,
    /// Same with L2 norms, reported alongside.
    pub denominator_l2: f64,
    pub ratio: f64,
    /// Set when the denominator vanishes (p = q).
    pub degenerate: bool,
}

#[derive(Debug, Clone)]
pub struct StabilityOutcome {
    pub runs: Vec<StabilityRun>,
    pub max_ratio: f64,
    /// Relative mismatch of the velocity-difference field against its
    /// forced + free split, measured at the boundary (first pair only).
    pub split_consistency: Option<f64>,
}

/// Empirical Lipschitz-stability ratios for an ensemble of potential
/// pairs: forward-solve both, compare the measured traces, and relate the
/// potential distance to the trace distance.
pub fn run_stability(
    tree: &MetricTree,
    pairs: &[PotentialPair],
    horizon: f64,
    excluded: &str,
    noise: Option<NoiseSpec>,
    with_split: bool,
    threads: Option<usize>,
) -> Result<StabilityOutcome> {
    let excluded_idx = tree.node_idx(excluded)?;
    let measured = measured_nodes(tree, excluded_idx);
    let grid = discretize_default(tree, horizon)?;
    let u0 = stability_initial(&grid, tree);
    let u1 = NetworkField::zeros(&grid);
    let boundary = BoundaryData::dirichlet_from_fn(tree, grid.steps, grid.dt, |_, _| 1.0);
    let threads_n = crate::parallel::resolve_threads(threads);

    let jobs: Vec<usize> = (0..pairs.len()).collect();
    let results = map_indexed(&jobs, threads_n, |_, &member| -> Result<StabilityRun> {
        let (p_map, q_map) = &pairs[member];
        let p = crate::peel::potential_field(tree, &grid, p_map);
        let q = crate::peel::potential_field(tree, &grid, q_map);
        let sol_p = solve_wave(tree, &grid, &p, &u0, &u1, &boundary, None)?;
        let sol_q = solve_wave(tree, &grid, &q, &u0, &u1, &boundary, None)?;
        let diff_field = NetworkField {
            per_edge: q
                .per_edge
                .iter()
                .zip(&p.per_edge)
                .map(|(qv, pv)| qv.iter().zip(pv).map(|(a, b)| a - b).collect())
                .collect(),
        };
        let numerator = norm_l2_space(&diff_field, &grid);
        let mut den_h1 = 0.0;
        let mut den_l2 = 0.0;
        for (node, edge) in &measured {
            let mut tp = extract_trace(&sol_p, tree, node, TraceKind::NeumannOutward, edge)?;
            let mut tq = extract_trace(&sol_q, tree, node, TraceKind::NeumannOutward, edge)?;
            if let Some(spec) = &noise {
                let salt = (member as u64) << 8;
                tp = crate::measure::add_noise(&tp, &NoiseSpec::new(spec.level, spec.seed ^ salt));
                tq = crate::measure::add_noise(
                    &tq,
                    &NoiseSpec::new(spec.level, spec.seed ^ salt ^ 0xffff),
                );
            }
            let d = tp.diff(&tq)?;
            den_h1 += norm_h1_time(&d);
            den_l2 += norm_l2_time(&d);
        }
        let degenerate = den_h1 < 1e-12;
        Ok(StabilityRun {
            member,
            numerator,
            denominator_h1: den_h1,
            denominator_l2: den_l2,
            ratio: if degenerate { f64::NAN } else { numerator / den_h1 },
            degenerate,
        })
    });
    let mut runs = Vec::new();
    for r in results {
        runs.push(r?);
    }
    let max_ratio = runs
        .iter()
        .filter(|r| !r.degenerate)
        .map(|r| r.ratio)
        .fold(0.0f64, f64::max);

    let split_consistency = if with_split && !pairs.is_empty() {
        Some(split_diagnostic(tree, &grid, &pairs[0], &u0, &u1, &boundary, &measured)?)
    } else {
        None
    };

    Ok(StabilityOutcome { runs, max_ratio, split_consistency })
}

/// The velocity difference y of two runs splits into a forced part driven
/// by (q - p) du/dt and a free part carrying the initial velocity
/// (q - p) u0. Returns the relative mismatch of the measured traces of y
/// against the sum of the parts.
fn split_diagnostic(
    tree: &MetricTree,
    grid: &NetworkGrid,
    pair: &PotentialPair,
    u0: &NetworkField<f64>,
    u1: &NetworkField<f64>,
    boundary: &BoundaryData<f64>,
    measured: &[(String, String)],
) -> Result<f64> {
    let p = crate::peel::potential_field(tree, grid, &pair.0);
    let q = crate::peel::potential_field(tree, grid, &pair.1);
    let sol_p = solve_wave(tree, grid, &p, u0, u1, boundary, None)?;
    let sol_q = solve_wave(tree, grid, &q, u0, u1, boundary, None)?;

    // Forced part: potential q, zero data, source (q - p) du[p]/dt.
    let dt = grid.dt;
    let steps = grid.steps;
    let snaps = &sol_p.snapshots;
    let dudt = move |e: usize, i: usize, k: usize| -> f64 {
        if k == 0 {
            (snaps[1].per_edge[e][i] - snaps[0].per_edge[e][i]) / dt
        } else if k >= steps {
            (snaps[steps].per_edge[e][i] - snaps[steps - 1].per_edge[e][i]) / dt
        } else {
            (snaps[k + 1].per_edge[e][i] - snaps[k - 1].per_edge[e][i]) / (2.0 * dt)
        }
    };
    let qp: Vec<Vec<f64>> = q
        .per_edge
        .iter()
        .zip(&p.per_edge)
        .map(|(qv, pv)| qv.iter().zip(pv).map(|(a, b)| a - b).collect())
        .collect();
    let forced_src = |e: usize, i: usize, k: usize| -> f64 { qp[e][i] * dudt(e, i, k) };
    let zero = NetworkField::zeros(grid);
    let zero_b = BoundaryData::zero_dirichlet(tree, grid.steps);
    let psi = solve_wave(tree, grid, &q, &zero, &zero, &zero_b, Some(&forced_src))?;

    // Free part: initial velocity (q - p) u0.
    let free_v = NetworkField {
        per_edge: qp
            .iter()
            .zip(&u0.per_edge)
            .map(|(d, u)| d.iter().zip(u).map(|(a, b)| a * b).collect())
            .collect(),
    };
    let phi = solve_wave(tree, grid, &q, &zero, &free_v, &zero_b, None)?;

    let mut num = 0.0;
    let mut den = 0.0;
    for (node, edge) in measured {
        let tp = extract_trace(&sol_p, tree, node, TraceKind::NeumannOutward, edge)?;
        let tq = extract_trace(&sol_q, tree, node, TraceKind::NeumannOutward, edge)?;
        let y = crate::measure::derivative_time(&tp.diff(&tq)?);
        let tpsi = extract_trace(&psi, tree, node, TraceKind::NeumannOutward, edge)?;
        let tphi = extract_trace(&phi, tree, node, TraceKind::NeumannOutward, edge)?;
        for k in 1..y.len().saturating_sub(1) {
            let combined = tpsi.samples[k] + tphi.samples[k];
            num += (y.samples[k] - combined).powi(2);
            den += y.samples[k].powi(2);
        }
    }
    Ok((num / den.max(1e-300)).sqrt())
}

impl StabilityOutcome {
    pub fn to_report(&self, tree: &MetricTree, seed_note: &str) -> Report {
        let mut r = Report::new("stability");
        r.set("graph-hash", &graph_hash(tree));
        r.set("seed", seed_note);
        let mut block = CsvBlock::new(
            "runs",
            &["member", "numerator", "denominator_h1", "denominator_l2", "ratio", "degenerate"],
        );
        for run in &self.runs {
            block.push(vec![
                run.member as f64,
                run.numerator,
                run.denominator_h1,
                run.denominator_l2,
                if run.degenerate { f64::NAN } else { run.ratio },
                if run.degenerate { 1.0 } else { 0.0 },
            ]);
        }
        r.blocks.push(block);
        r.set_float("max-ratio", self.max_ratio);
        if let Some(split) = self.split_consistency {
            r.set_float("split-consistency", split);
        }
        r
    }
}

// ---------------------------------------------------------------------------
// Uniqueness cross-check
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct UniquenessOutcome {
    /// Largest measured wave Neumann-trace difference.
    pub wave: f64,
    /// Largest measured heat Dirichlet-trace difference.
    pub heat: f64,
    /// Largest measured Schrödinger Neumann-trace difference.
    pub schrodinger: f64,
    pub potential_distance: f64,
    pub tolerance: f64,
    pub consistent_with_equal: bool,
}

/// Compare the boundary signatures of two potentials under all three
/// equations: identical potentials must produce identical traces, and any
/// difference beyond tolerance certifies distinct potentials.
pub fn run_uniqueness_check(
    tree: &MetricTree,
    p_map: &std::collections::BTreeMap<String, EdgeField>,
    q_map: &std::collections::BTreeMap<String, EdgeField>,
    horizon: f64,
    excluded: &str,
    tolerance: f64,
) -> Result<UniquenessOutcome> {
    let excluded_idx = tree.node_idx(excluded)?;
    let measured = measured_nodes(tree, excluded_idx);
    let grid = discretize_default(tree, horizon)?;
    let p = crate::peel::potential_field(tree, &grid, p_map);
    let q = crate::peel::potential_field(tree, &grid, q_map);

    let u0 = NetworkField::from_fn(&grid, |_, _| 1.0);
    let u1 = NetworkField::zeros(&grid);
    let boundary = BoundaryData::dirichlet_from_fn(tree, grid.steps, grid.dt, |_, _| 1.0);

    let wave_p = solve_wave(tree, &grid, &p, &u0, &u1, &boundary, None)?;
    let wave_q = solve_wave(tree, &grid, &q, &u0, &u1, &boundary, None)?;
    let heat_p = solve_heat(tree, &grid, &p, &u0)?;
    let heat_q = solve_heat(tree, &grid, &q, &u0)?;
    let u0c = u0.to_complex();
    let boundary_c: BoundaryData<Complex64> =
        BoundaryData::dirichlet_from_fn(tree, grid.steps, grid.dt, |_, _| Complex64::new(1.0, 0.0));
    let sch_p = solve_schrodinger(tree, &grid, &p, &u0c, &boundary_c)?;
    let sch_q = solve_schrodinger(tree, &grid, &q, &u0c, &boundary_c)?;

    let mut wave = 0.0f64;
    let mut heat = 0.0f64;
    let mut schrodinger = 0.0f64;
    for (node, edge) in &measured {
        let wp = extract_trace(&wave_p, tree, node, TraceKind::NeumannOutward, edge)?;
        let wq = extract_trace(&wave_q, tree, node, TraceKind::NeumannOutward, edge)?;
        wave = wave.max(wp.diff(&wq)?.max_abs());
        let hp = extract_trace(&heat_p, tree, node, TraceKind::Dirichlet, edge)?;
        let hq = extract_trace(&heat_q, tree, node, TraceKind::Dirichlet, edge)?;
        heat = heat.max(hp.diff(&hq)?.max_abs());
        let sp = extract_trace(&sch_p, tree, node, TraceKind::NeumannOutward, edge)?;
        let sq = extract_trace(&sch_q, tree, node, TraceKind::NeumannOutward, edge)?;
        schrodinger = schrodinger.max(sp.diff(&sq)?.max_abs());
    }

    let diff = NetworkField {
        per_edge: q
            .per_edge
            .iter()
            .zip(&p.per_edge)
            .map(|(qv, pv)| qv.iter().zip(pv).map(|(a, b)| a - b).collect())
            .collect(),
    };
    let potential_distance = norm_l2_space(&diff, &grid);

    Ok(UniquenessOutcome {
        wave,
        heat,
        schrodinger,
        potential_distance,
        tolerance,
        consistent_with_equal: wave <= tolerance && heat <= tolerance && schrodinger <= tolerance,
    })
}

impl UniquenessOutcome {
    pub fn to_report(&self, tree: &MetricTree) -> Report {
        let mut r = Report::new("uniqueness");
        r.set("graph-hash", &graph_hash(tree));
        r.set_float("wave-max-diff", self.wave);
        r.set_float("heat-max-diff", self.heat);
        r.set_float("schrodinger-max-diff", self.schrodinger);
        r.set_float("potential-distance", self.potential_distance);
        r.set_float("tolerance", self.tolerance);
        r.set(
            "verdict",
            if self.consistent_with_equal { "consistent-with-equal" } else { "distinct" },
        );
        r
    }
}

// ---------------------------------------------------------------------------
// Energy and trace estimates
// ---------------------------------------------------------------------------

/// Inputs for the trace and energy bound measurements: homogeneous
/// Dirichlet ends, initial data vanishing at the boundary, optional
/// forcing.
pub struct EstimateInputs<'a> {
    pub tree: &'a MetricTree,
    pub potential: &'a std::collections::BTreeMap<String, EdgeField>,
    pub u0: &'a dyn Fn(usize, f64) -> f64,
    pub u1: &'a dyn Fn(usize, f64) -> f64,
    pub source: Option<SourceFn<'a>>,
}

pub struct EstimateOutcome {
    pub trace_ratio: f64,
    pub energy_ratio: f64,
    pub denominator: f64,
}

/// Empirical constants for the boundary-trace and energy bounds: the
/// squared trace sum over all external nodes and the peak energy, both
/// relative to ||u0||_H1^2 + ||u1||^2 + ||g||_{L1 L2}^2.
pub fn estimate_constants(
    inputs: &EstimateInputs,
    target_dx: f64,
    horizon: f64,
) -> Result<EstimateOutcome> {
    let tree = inputs.tree;
    let grid = crate::grid::discretize(tree, target_dx, crate::grid::DEFAULT_CFL, horizon)?;
    let p = crate::peel::potential_field(tree, &grid, inputs.potential);
    let u0 = NetworkField::from_fn(&grid, |e, x| (inputs.u0)(e, x));
    let u1 = NetworkField::from_fn(&grid, |e, x| (inputs.u1)(e, x));
    let boundary = BoundaryData::zero_dirichlet(tree, grid.steps);
    let sol = solve_wave(tree, &grid, &p, &u0, &u1, &boundary, inputs.source)?;

    let mut trace_sum = 0.0;
    for node in tree.external_nodes() {
        let id = &tree.nodes()[node].id;
        let edge = &tree.edges()[tree.incident_edges(node)[0]].id;
        let tr = extract_trace(&sol, tree, id, TraceKind::NeumannOutward, edge)?;
        trace_sum += norm_l2_time(&tr).powi(2);
    }

    let mut source_norm = 0.0;
    if let Some(g) = inputs.source {
        // L1 in time of the spatial L2 norms by the trapezoidal rule.
        for k in 0..=grid.steps {
            let field = NetworkField {
                per_edge: grid
                    .edges
                    .iter()
                    .enumerate()
                    .map(|(e, eg)| (0..=eg.m).map(|i| g(e, i, k)).collect())
                    .collect(),
            };
            let w = if k == 0 || k == grid.steps { 0.5 } else { 1.0 };
            source_norm += w * grid.dt * norm_l2_space(&field, &grid);
        }
    }

    let denominator = crate::measure::norm_h10_space(&u0, &grid).powi(2)
        + norm_l2_space(&u1, &grid).powi(2)
        + source_norm.powi(2);
    if denominator < 1e-300 {
        return Err(Error::EmptyEnsemble);
    }

    let mut peak_energy: f64 = 0.0;
    for k in 1..grid.steps {
        peak_energy = peak_energy.max(energy(&sol, k)?);
    }

    Ok(EstimateOutcome {
        trace_ratio: trace_sum / denominator,
        energy_ratio: peak_energy / denominator,
        denominator,
    })
}

/// Sine-mode initial velocities 1..=count for observability ensembles.
pub fn eigenmode_ensemble(count: usize, len: f64) -> Vec<Box<dyn Fn(usize, f64) -> f64 + Sync>> {
    (1..=count)
        .map(|n| {
            let k = n as f64 * std::f64::consts::PI / len;
            Box::new(move |_e: usize, x: f64| (k * x).sin())
                as Box<dyn Fn(usize, f64) -> f64 + Sync>
        })
        .collect()
}

/// A bump supported strictly inside [a, b] in local edge coordinates.
pub fn mollifier_bump(a: f64, b: f64) -> impl Fn(f64) -> f64 {
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    move |x: f64| {
        let s = (x - mid) / half;
        if s.abs() < 1.0 {
            (-1.0 / (1.0 - s * s)).exp()
        } else {
            0.0
        }
    }
}

/// Format a list of (horizon, constant) pairs for log lines.
pub fn format_constants(constants: &[(f64, f64)]) -> String {
    constants
        .iter()
        .map(|(t, c)| format!("T={}: {}", t, format_float(*c)))
        .collect::<Vec<_>>()
        .join(", ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::parse_network;
    use std::collections::BTreeMap;
    use std::f64::consts::PI;

    fn single_edge() -> MetricTree {
        parse_network("node A external\nnode B external\nedge e0 A B 1.0\n").unwrap()
    }

    #[test]
    fn observability_eigenmodes_single_edge() {
        let tree = single_edge();
        let ensemble = eigenmode_ensemble(5, 1.0);
        let out =
            run_observability(&tree, &BTreeMap::new(), &ensemble, &[3.0], "A", Some(1)).unwrap();
        assert_eq!(out.runs.len(), 5);
        assert!(out.dropped.is_empty());
        // Continuum value of every ratio is 1/3; ratios must be finite and
        // within a factor two of one another.
        let ratios: Vec<f64> = out.runs.iter().map(|r| r.ratio).collect();
        let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = ratios.iter().cloned().fold(0.0f64, f64::max);
        assert!(hi <= 2.0 * lo, "ratios spread too wide: {ratios:?}");
        assert!((out.constants[0].1 - 1.0 / 3.0).abs() < 0.05, "constant {}", out.constants[0].1);
    }

    #[test]
    fn observability_blind_before_arrival() {
        let tree = single_edge();
        // Energy near the unmeasured end; measured at A (x = 0). With
        // T = 0.5 nothing reaches the sensor.
        let bump = mollifier_bump(0.65, 0.95);
        let ensemble: Vec<Box<dyn Fn(usize, f64) -> f64 + Sync>> =
            vec![Box::new(move |_e, x| bump(x))];
        let out =
            run_observability(&tree, &BTreeMap::new(), &ensemble, &[0.5, 3.0], "B", Some(1))
                .unwrap();
        let short = out.constants[0].1;
        let long = out.constants[1].1;
        assert!(short > 10.0 * long, "short {short} vs long {long}");
    }

    #[test]
    fn observability_drops_zero_members() {
        let tree = single_edge();
        let ensemble: Vec<Box<dyn Fn(usize, f64) -> f64 + Sync>> =
            vec![Box::new(|_, _| 0.0), Box::new(|_, x| (PI * x).sin())];
        let out =
            run_observability(&tree, &BTreeMap::new(), &ensemble, &[3.0], "A", Some(1)).unwrap();
        assert_eq!(out.dropped, vec![0]);
        assert_eq!(out.runs.len(), 1);
    }

    #[test]
    fn stability_constant_potential_shifts() {
        let tree = single_edge();
        let pairs: Vec<PotentialPair> = [0.1, 0.2, 0.4]
            .iter()
            .map(|&delta| {
                let mut p = BTreeMap::new();
                p.insert("e0".to_string(), EdgeField::from_fn(1.0, 10, |_| 1.0));
                let mut q = BTreeMap::new();
                q.insert("e0".to_string(), EdgeField::from_fn(1.0, 10, move |_| 1.0 + delta));
                (p, q)
            })
            .collect();
        let out = run_stability(&tree, &pairs, 3.0, "B", None, true, Some(1)).unwrap();
        let ratios: Vec<f64> = out.runs.iter().map(|r| r.ratio).collect();
        let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = ratios.iter().cloned().fold(0.0f64, f64::max);
        assert!(hi / lo < 1.2, "near-linear regime violated: {ratios:?}");
        // The superposition split reproduces the velocity difference.
        assert!(out.split_consistency.unwrap() < 0.1);
    }

    #[test]
    fn stability_flags_equal_pairs() {
        let tree = single_edge();
        let mut p = BTreeMap::new();
        p.insert("e0".to_string(), EdgeField::from_fn(1.0, 10, |x| 0.5 + x));
        let pairs = vec![(p.clone(), p)];
        let out = run_stability(&tree, &pairs, 3.0, "B", None, false, Some(1)).unwrap();
        assert!(out.runs[0].degenerate);
        assert!(out.runs[0].numerator < 1e-10);
        assert!(out.runs[0].denominator_h1 < 1e-10);
    }

    #[test]
    fn uniqueness_echo_for_equal_potentials() {
        let tree = single_edge();
        let mut p = BTreeMap::new();
        p.insert("e0".to_string(), EdgeField::from_fn(1.0, 30, |x| 0.5 + (2.0 * x).sin()));
        let out = run_uniqueness_check(&tree, &p, &p.clone(), 3.0, "B", 1e-10).unwrap();
        assert!(out.consistent_with_equal);
        assert!(out.wave <= 1e-10 && out.heat <= 1e-10 && out.schrodinger <= 1e-10);
    }

    #[test]
    fn random_potentials_respect_bound() {
        for seed in 0..20 {
            let p = random_smooth_potential(1.3, 50, seed, 3.0);
            assert!(p.samples.iter().all(|v| v.abs() <= 3.0));
        }
        // Determinism.
        let a = random_smooth_potential(1.0, 40, 7, 3.0);
        let b = random_smooth_potential(1.0, 40, 7, 3.0);
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn estimate_constants_are_finite() {
        let tree = single_edge();
        let inputs = EstimateInputs {
            tree: &tree,
            potential: &BTreeMap::new(),
            u0: &|_, x| (PI * x).sin(),
            u1: &|_, x| 0.3 * (2.0 * PI * x).sin(),
            source: None,
        };
        let out = estimate_constants(&inputs, 0.01, 2.0).unwrap();
        assert!(out.trace_ratio.is_finite() && out.trace_ratio > 0.0);
        assert!(out.energy_ratio.is_finite() && out.energy_ratio > 0.0);
    }
}
