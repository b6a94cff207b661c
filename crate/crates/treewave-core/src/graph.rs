//! Tree-shaped metric networks: construction, parsing, validation and
//! the staged leaf-removal schedule used by the reconstruction pipeline.
//!
//! A network is a finite graph whose edges carry positive lengths. External
//! nodes have degree 1 and are where boundary data lives; internal nodes
//! couple the incident edges. Only trees (connected, acyclic) are accepted
//! by the solvers; `validate_tree` reports everything that is wrong with a
//! graph instead of failing on the first defect.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Internal,
    External,
}

#[derive(Debug, Clone)]
pub struct Node {
    pub id: String,
    pub kind: NodeKind,
}

/// Oriented segment. `from` is the initial node, `to` the terminal node;
/// the local coordinate runs from 0 at `from` to `length` at `to`.
#[derive(Debug, Clone)]
pub struct Edge {
    pub id: String,
    pub from: usize,
    pub to: usize,
    pub length: f64,
}

/// Which endpoint of an edge a node sits at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeEnd {
    Start,
    End,
}

#[derive(Debug, Clone)]
pub struct MetricTree {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    node_index: BTreeMap<String, usize>,
    edge_index: BTreeMap<String, usize>,
    /// Edge indices incident to each node.
    incident: Vec<Vec<usize>>,
}

impl MetricTree {
    /// Build a network from raw parts. Only structural defects are errors
    /// here (duplicate ids, dangling endpoints, non-positive lengths);
    /// graph-shape defects are reported by [`validate_tree`].
    pub fn new(
        nodes: Vec<(String, NodeKind)>,
        edges: Vec<(String, String, String, f64)>,
    ) -> Result<Self> {
        let mut node_index = BTreeMap::new();
        let mut node_list = Vec::with_capacity(nodes.len());
        for (id, kind) in nodes {
            if node_index.insert(id.clone(), node_list.len()).is_some() {
                return Err(Error::InvalidTree(format!("duplicate node id `{id}`")));
            }
            node_list.push(Node { id, kind });
        }
        let mut edge_index = BTreeMap::new();
        let mut edge_list = Vec::with_capacity(edges.len());
        let mut incident = vec![Vec::new(); node_list.len()];
        for (id, from, to, length) in edges {
            if edge_index.contains_key(&id) || node_index.contains_key(&id) {
                return Err(Error::InvalidTree(format!("duplicate id `{id}`")));
            }
            let from = *node_index
                .get(&from)
                .ok_or_else(|| Error::UnknownNode(from.clone()))?;
            let to = *node_index
                .get(&to)
                .ok_or_else(|| Error::UnknownNode(to.clone()))?;
            if !(length.is_finite() && length > 0.0) {
                return Err(Error::InvalidTree(format!(
                    "edge `{id}` has non-positive length {length}"
                )));
            }
            let idx = edge_list.len();
            edge_index.insert(id.clone(), idx);
            incident[from].push(idx);
            incident[to].push(idx);
            edge_list.push(Edge { id, from, to, length });
        }
        Ok(Self {
            nodes: node_list,
            edges: edge_list,
            node_index,
            edge_index,
            incident,
        })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn node_idx(&self, id: &str) -> Result<usize> {
        self.node_index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownNode(id.to_string()))
    }

    pub fn edge_idx(&self, id: &str) -> Result<usize> {
        self.edge_index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownEdge(id.to_string()))
    }

    pub fn degree(&self, node: usize) -> usize {
        self.incident[node].len()
    }

    pub fn incident_edges(&self, node: usize) -> &[usize] {
        &self.incident[node]
    }

    pub fn is_external(&self, node: usize) -> bool {
        self.nodes[node].kind == NodeKind::External
    }

    pub fn external_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.nodes.len()).filter(|&n| self.is_external(n))
    }

    pub fn internal_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.nodes.len()).filter(|&n| !self.is_external(n))
    }

    pub fn external_count(&self) -> usize {
        self.external_nodes().count()
    }

    pub fn internal_count(&self) -> usize {
        self.internal_nodes().count()
    }

    /// Which end of `edge` the node sits at.
    pub fn edge_end(&self, edge: usize, node: usize) -> Result<EdgeEnd> {
        let e = &self.edges[edge];
        if e.from == node {
            Ok(EdgeEnd::Start)
        } else if e.to == node {
            Ok(EdgeEnd::End)
        } else {
            Err(Error::NotIncident {
                edge: e.id.clone(),
                node: self.nodes[node].id.clone(),
            })
        }
    }

    /// The endpoint of `edge` opposite to `node`.
    pub fn other_end(&self, edge: usize, node: usize) -> usize {
        let e = &self.edges[edge];
        if e.from == node {
            e.to
        } else {
            e.from
        }
    }

    pub fn total_length(&self) -> f64 {
        self.edges.iter().map(|e| e.length).sum()
    }

    /// Metric distance from `node` to every node (tree assumed connected).
    pub fn distances_from(&self, node: usize) -> Vec<f64> {
        let mut dist = vec![f64::INFINITY; self.nodes.len()];
        dist[node] = 0.0;
        let mut queue = VecDeque::new();
        queue.push_back(node);
        while let Some(n) = queue.pop_front() {
            for &ei in &self.incident[n] {
                let other = self.other_end(ei, n);
                let d = dist[n] + self.edges[ei].length;
                if d < dist[other] {
                    dist[other] = d;
                    queue.push_back(other);
                }
            }
        }
        dist
    }

    /// Largest metric distance from `node` to any other node.
    pub fn depth_from(&self, node: usize) -> f64 {
        self.distances_from(node)
            .into_iter()
            .filter(|d| d.is_finite())
            .fold(0.0, f64::max)
    }

    /// Canonical text form in the network file grammar. Nodes and edges are
    /// emitted sorted by id so the output is stable.
    pub fn serialize(&self, potentials: &BTreeMap<String, Vec<f64>>) -> String {
        let mut out = String::new();
        for (id, &idx) in &self.node_index {
            let kind = match self.nodes[idx].kind {
                NodeKind::Internal => "internal",
                NodeKind::External => "external",
            };
            out.push_str(&format!("node {id} {kind}\n"));
        }
        for (id, &idx) in &self.edge_index {
            let e = &self.edges[idx];
            out.push_str(&format!(
                "edge {id} {} {} {}\n",
                self.nodes[e.from].id,
                self.nodes[e.to].id,
                crate::report::format_float(e.length)
            ));
        }
        for (eid, samples) in potentials {
            out.push_str(&format!("potential {eid} {}", samples.len()));
            for v in samples {
                out.push(' ');
                out.push_str(&crate::report::format_float(*v));
            }
            out.push('\n');
        }
        out
    }
}

/// A defect found by [`validate_tree`]. Violations are data, not failures.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NotConnected { component_nodes: Vec<String> },
    CycleDetected { edges: Vec<String> },
    ExternalDegree { node: String, degree: usize },
    InternalDegree { node: String, degree: usize },
    NoEdges,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NotConnected { component_nodes } => {
                write!(f, "not connected: component {{{}}} is isolated", component_nodes.join(", "))
            }
            Violation::CycleDetected { edges } => {
                write!(f, "cycle detected: edges {{{}}}", edges.join(", "))
            }
            Violation::ExternalDegree { node, degree } => {
                write!(f, "external node `{node}` has degree {degree}, expected 1")
            }
            Violation::InternalDegree { node, degree } => {
                write!(f, "internal node `{node}` has degree {degree}, expected >= 2")
            }
            Violation::NoEdges => write!(f, "network has no edges"),
        }
    }
}

/// Check every structural invariant of a tree network and return the list
/// of violations (empty means valid).
pub fn validate_tree(g: &MetricTree) -> Vec<Violation> {
    let mut violations = Vec::new();
    if g.edges.is_empty() {
        violations.push(Violation::NoEdges);
        return violations;
    }

    for (idx, node) in g.nodes.iter().enumerate() {
        let deg = g.degree(idx);
        match node.kind {
            NodeKind::External if deg != 1 => violations.push(Violation::ExternalDegree {
                node: node.id.clone(),
                degree: deg,
            }),
            NodeKind::Internal if deg < 2 => violations.push(Violation::InternalDegree {
                node: node.id.clone(),
                degree: deg,
            }),
            _ => {}
        }
    }

    // Connectivity by BFS from node 0.
    let mut seen = vec![false; g.node_count()];
    let mut queue = VecDeque::new();
    seen[0] = true;
    queue.push_back(0usize);
    while let Some(n) = queue.pop_front() {
        for &ei in g.incident_edges(n) {
            let other = g.other_end(ei, n);
            if !seen[other] {
                seen[other] = true;
                queue.push_back(other);
            }
        }
    }
    if seen.iter().any(|&s| !s) {
        let component: Vec<String> = g
            .nodes
            .iter()
            .enumerate()
            .filter(|(i, _)| !seen[*i])
            .map(|(_, n)| n.id.clone())
            .collect();
        violations.push(Violation::NotConnected { component_nodes: component });
    }

    if let Some(cycle) = find_cycle(g) {
        violations.push(Violation::CycleDetected { edges: cycle });
    }

    violations
}

/// DFS back-edge search; returns the edge ids of one cycle if present.
fn find_cycle(g: &MetricTree) -> Option<Vec<String>> {
    let n = g.node_count();
    let mut visited = vec![false; n];
    // (node, incoming edge) stack entries; parent map for cycle extraction.
    let mut parent: Vec<Option<(usize, usize)>> = vec![None; n];
    for start in 0..n {
        if visited[start] {
            continue;
        }
        let mut stack = vec![(start, usize::MAX)];
        visited[start] = true;
        while let Some((node, via)) = stack.pop() {
            for &ei in g.incident_edges(node) {
                if ei == via {
                    continue;
                }
                let other = g.other_end(ei, node);
                if other == node {
                    // Self-loop.
                    return Some(vec![g.edges()[ei].id.clone()]);
                }
                if visited[other] {
                    // Back edge: walk both endpoints up to their common ancestor.
                    return Some(extract_cycle(g, &parent, node, other, ei));
                }
                visited[other] = true;
                parent[other] = Some((node, ei));
                stack.push((other, ei));
            }
        }
    }
    None
}

fn extract_cycle(
    g: &MetricTree,
    parent: &[Option<(usize, usize)>],
    a: usize,
    b: usize,
    closing: usize,
) -> Vec<String> {
    let path_to_root = |mut n: usize| -> Vec<(usize, usize)> {
        let mut path = Vec::new();
        while let Some((p, e)) = parent[n] {
            path.push((n, e));
            n = p;
        }
        path
    };
    let pa = path_to_root(a);
    let pb = path_to_root(b);
    let on_a: std::collections::BTreeSet<usize> = pa.iter().map(|&(n, _)| n).collect();
    // Edges from b up to the first node also on a's root path (or the root).
    let mut edges = vec![closing];
    let mut junction = None;
    for &(n, e) in &pb {
        if on_a.contains(&n) {
            junction = Some(n);
            break;
        }
        edges.push(e);
    }
    for &(n, e) in &pa {
        edges.push(e);
        if Some(n) == junction {
            break;
        }
        if junction.is_none() && n == pb.last().map(|&(n, _)| n).unwrap_or(usize::MAX) {
            break;
        }
    }
    let mut ids: Vec<String> = edges.iter().map(|&e| g.edges()[e].id.clone()).collect();
    ids.sort();
    ids.dedup();
    ids
}

/// One edge removal in a peel stage: the edge is peeled from its
/// `leaf_side` node toward `interior_side`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeelEdge {
    pub edge: String,
    pub leaf_side: String,
    pub interior_side: String,
}

/// The staged reduction of a tree. Every edge appears in exactly one stage;
/// the final stage empties the graph.
#[derive(Debug, Clone)]
pub struct PeelPlan {
    pub excluded: String,
    pub stages: Vec<Vec<PeelEdge>>,
}

impl PeelPlan {
    pub fn edge_count(&self) -> usize {
        self.stages.iter().map(|s| s.len()).sum()
    }
}

/// Compute the peel schedule: repeatedly remove every edge whose leaf-side
/// endpoint is a degree-1 node of the current reduced graph other than
/// `excluded`. Within a stage edges are ordered by ascending id.
pub fn peel_schedule(g: &MetricTree, excluded: &str) -> Result<PeelPlan> {
    let excluded_idx = g.node_idx(excluded)?;
    if !g.is_external(excluded_idx) {
        return Err(Error::NotExternal(excluded.to_string()));
    }

    let mut degree: Vec<usize> = (0..g.node_count()).map(|n| g.degree(n)).collect();
    let mut alive = vec![true; g.edge_count()];
    let mut remaining = g.edge_count();
    let mut stages = Vec::new();

    while remaining > 0 {
        // (edge id, edge idx, leaf node) for every currently peelable edge.
        let mut stage: Vec<(String, usize, usize)> = Vec::new();
        for (ei, edge) in g.edges().iter().enumerate() {
            if !alive[ei] {
                continue;
            }
            let leaf = if degree[edge.from] == 1 && edge.from != excluded_idx {
                Some(edge.from)
            } else if degree[edge.to] == 1 && edge.to != excluded_idx {
                Some(edge.to)
            } else {
                None
            };
            if let Some(leaf) = leaf {
                stage.push((edge.id.clone(), ei, leaf));
            }
        }
        // Trees always expose at least one non-excluded leaf.
        assert!(
            !stage.is_empty(),
            "no peelable edge left with {remaining} remaining; graph contains a cycle"
        );
        stage.sort_by(|a, b| a.0.cmp(&b.0));
        let mut out = Vec::with_capacity(stage.len());
        for (id, ei, leaf) in stage {
            if !alive[ei] {
                continue;
            }
            alive[ei] = false;
            remaining -= 1;
            let other = g.other_end(ei, leaf);
            degree[leaf] -= 1;
            degree[other] -= 1;
            out.push(PeelEdge {
                edge: id,
                leaf_side: g.nodes()[leaf].id.clone(),
                interior_side: g.nodes()[other].id.clone(),
            });
        }
        stages.push(out);
    }

    Ok(PeelPlan {
        excluded: excluded.to_string(),
        stages,
    })
}

/// Parse the line-oriented network grammar, keeping any `potential` lines.
///
/// ```text
/// node <id> internal|external
/// edge <id> <from-id> <to-id> <length>
/// potential <edge-id> <n> <v0> ... <v(n-1)>
/// ```
pub fn parse_network_file(text: &str) -> Result<(MetricTree, BTreeMap<String, Vec<f64>>)> {
    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    // (line, edge id, samples); resolved against edge ids after the tree builds.
    let mut potentials_raw: Vec<(usize, String, Vec<f64>)> = Vec::new();

    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let tok: Vec<&str> = content.split_whitespace().collect();
        let err = |msg: String| Error::Parse { line, msg };
        match tok[0] {
            "node" => {
                if tok.len() != 3 {
                    return Err(err(format!("expected `node <id> internal|external`, got {} tokens", tok.len())));
                }
                let kind = match tok[2] {
                    "internal" => NodeKind::Internal,
                    "external" => NodeKind::External,
                    other => return Err(err(format!("unknown node kind `{other}`"))),
                };
                nodes.push((tok[1].to_string(), kind, line));
            }
            "edge" => {
                if tok.len() != 5 {
                    return Err(err(format!("expected `edge <id> <from> <to> <length>`, got {} tokens", tok.len())));
                }
                let length: f64 = tok[4]
                    .parse()
                    .map_err(|_| err(format!("bad length `{}`", tok[4])))?;
                if !(length.is_finite() && length > 0.0) {
                    return Err(err(format!("non-positive length {length} for edge `{}`", tok[1])));
                }
                edges.push((tok[1].to_string(), tok[2].to_string(), tok[3].to_string(), length, line));
            }
            "potential" => {
                if tok.len() < 3 {
                    return Err(err("expected `potential <edge-id> <n> <v...>`".into()));
                }
                let n: usize = tok[2]
                    .parse()
                    .map_err(|_| err(format!("bad sample count `{}`", tok[2])))?;
                if n < 2 {
                    return Err(err(format!("potential needs at least 2 samples, got {n}")));
                }
                if tok.len() != 3 + n {
                    return Err(err(format!("expected {n} samples, got {}", tok.len() - 3)));
                }
                let mut vals = Vec::with_capacity(n);
                for t in &tok[3..] {
                    let v: f64 = t.parse().map_err(|_| err(format!("bad sample `{t}`")))?;
                    if !v.is_finite() {
                        return Err(err(format!("non-finite sample `{t}`")));
                    }
                    vals.push(v);
                }
                potentials_raw.push((line, tok[1].to_string(), vals));
            }
            other => return Err(err(format!("unknown directive `{other}`"))),
        }
    }

    // Duplicate/dangling checks with line attribution.
    let mut seen = std::collections::BTreeSet::new();
    for (id, _, line) in &nodes {
        if !seen.insert(id.clone()) {
            return Err(Error::Parse { line: *line, msg: format!("duplicate id `{id}`") });
        }
    }
    for (id, from, to, _, line) in &edges {
        if !seen.insert(id.clone()) {
            return Err(Error::Parse { line: *line, msg: format!("duplicate id `{id}`") });
        }
        for endpoint in [from, to] {
            if !nodes.iter().any(|(n, _, _)| n == endpoint) {
                return Err(Error::Parse {
                    line: *line,
                    msg: format!("edge `{id}` references undeclared node `{endpoint}`"),
                });
            }
        }
    }

    let tree = MetricTree::new(
        nodes.into_iter().map(|(id, k, _)| (id, k)).collect(),
        edges.into_iter().map(|(id, f, t, l, _)| (id, f, t, l)).collect(),
    )?;

    let mut potentials = BTreeMap::new();
    for (line, eid, vals) in potentials_raw {
        if tree.edge_idx(&eid).is_err() {
            return Err(Error::Parse {
                line,
                msg: format!("potential references undeclared edge `{eid}`"),
            });
        }
        potentials.insert(eid, vals);
    }
    Ok((tree, potentials))
}

/// Parse a network file, discarding any potential lines.
pub fn parse_network(text: &str) -> Result<MetricTree> {
    parse_network_file(text).map(|(tree, _)| tree)
}

/// The ten-edge benchmark tree: four internal nodes P1..P4, seven external
/// nodes Q1..Q7, with Q7 hanging off the root side.
pub fn benchmark_tree() -> MetricTree {
    let nodes = vec![
        ("Q1", NodeKind::External),
        ("Q2", NodeKind::External),
        ("Q3", NodeKind::External),
        ("Q4", NodeKind::External),
        ("Q5", NodeKind::External),
        ("Q6", NodeKind::External),
        ("Q7", NodeKind::External),
        ("P1", NodeKind::Internal),
        ("P2", NodeKind::Internal),
        ("P3", NodeKind::Internal),
        ("P4", NodeKind::Internal),
    ];
    let edges = vec![
        ("e0", "Q7", "P1", 1.0),
        ("e1", "P1", "P2", 0.8),
        ("e2", "P2", "Q1", 0.9),
        ("e3", "P2", "Q2", 1.1),
        ("e4", "P2", "Q3", 0.7),
        ("e5", "P1", "P3", 1.2),
        ("e6", "P3", "Q4", 0.8),
        ("e7", "P3", "P4", 0.6),
        ("e8", "P4", "Q5", 1.0),
        ("e9", "P4", "Q6", 0.9),
    ];
    MetricTree::new(
        nodes.into_iter().map(|(i, k)| (i.to_string(), k)).collect(),
        edges
            .into_iter()
            .map(|(i, f, t, l)| (i.to_string(), f.to_string(), t.to_string(), l))
            .collect(),
    )
    .expect("benchmark tree is well formed")
}

/// Deterministic random tree with `n_edges` edges: nodes are attached one at
/// a time to a uniformly chosen existing node, lengths drawn from
/// [0.3, 1.5]. Node kinds follow the final degrees.
pub fn random_tree(seed: u64, n_edges: usize) -> MetricTree {
    use rand_core::{RngCore, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n_edges = n_edges.max(1);
    let n_nodes = n_edges + 1;
    let mut attach = Vec::with_capacity(n_edges);
    let mut lengths = Vec::with_capacity(n_edges);
    for k in 1..n_nodes {
        attach.push((rng.next_u64() % k as u64) as usize);
        let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        lengths.push(0.3 + 1.2 * u);
    }
    let mut degree = vec![0usize; n_nodes];
    for (k, &a) in attach.iter().enumerate() {
        degree[a] += 1;
        degree[k + 1] += 1;
    }
    let nodes: Vec<(String, NodeKind)> = (0..n_nodes)
        .map(|n| {
            let kind = if degree[n] == 1 { NodeKind::External } else { NodeKind::Internal };
            (format!("n{n}"), kind)
        })
        .collect();
    let edges: Vec<(String, String, String, f64)> = attach
        .iter()
        .enumerate()
        .map(|(k, &a)| (format!("e{k}"), format!("n{a}"), format!("n{}", k + 1), lengths[k]))
        .collect();
    MetricTree::new(nodes, edges).expect("generated tree is well formed")
}

#[cfg(test)]
mod tests {
    use super::*;

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
                ("e2".into(), "Q2".into(), "P".into(), 1.0),
                ("e3".into(), "Q3".into(), "P".into(), 1.0),
            ],
        )
        .unwrap()
    }

    #[test]
    fn benchmark_tree_counts() {
        let g = benchmark_tree();
        assert_eq!(g.edge_count(), 10);
        assert_eq!(g.edge_count() - 1, 9); // N segments convention
        assert_eq!(g.internal_count(), 4);
        assert_eq!(g.external_count(), 7);
        assert!(validate_tree(&g).is_empty());
    }

    #[test]
    fn parse_minimal_tree() {
        let text = "# smallest tree\nnode A external\nnode B external\nedge e0 A B 1.0\n";
        let g = parse_network(text).unwrap();
        assert_eq!(g.edge_count(), 1);
        assert_eq!(g.external_count(), 2);
        assert!(validate_tree(&g).is_empty());
    }

    #[test]
    fn parse_rejects_negative_length() {
        let text = "node A external\nnode B external\nedge e0 A B -1.0\n";
        match parse_network(text) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("non-positive"), "{msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn parse_rejects_duplicates_and_dangling() {
        let dup = "node A external\nnode A external\n";
        assert!(matches!(parse_network(dup), Err(Error::Parse { line: 2, .. })));
        let dangling = "node A external\nedge e0 A B 1.0\n";
        assert!(matches!(parse_network(dangling), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn parse_reports_line_numbers() {
        let text = "node A external\n\n# comment\nfrobnicate\n";
        match parse_network(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn validate_detects_triangle_cycle() {
        let g = MetricTree::new(
            vec![
                ("a".into(), NodeKind::Internal),
                ("b".into(), NodeKind::Internal),
                ("c".into(), NodeKind::Internal),
            ],
            vec![
                ("e0".into(), "a".into(), "b".into(), 1.0),
                ("e1".into(), "b".into(), "c".into(), 1.0),
                ("e2".into(), "c".into(), "a".into(), 1.0),
            ],
        )
        .unwrap();
        let violations = validate_tree(&g);
        let cycle = violations.iter().find_map(|v| match v {
            Violation::CycleDetected { edges } => Some(edges.clone()),
            _ => None,
        });
        assert_eq!(cycle.unwrap(), vec!["e0", "e1", "e2"]);
    }

    #[test]
    fn validate_detects_disconnected_forest() {
        let g = MetricTree::new(
            vec![
                ("a".into(), NodeKind::External),
                ("b".into(), NodeKind::External),
                ("c".into(), NodeKind::External),
                ("d".into(), NodeKind::External),
            ],
            vec![
                ("e0".into(), "a".into(), "b".into(), 1.0),
                ("e1".into(), "c".into(), "d".into(), 1.0),
            ],
        )
        .unwrap();
        assert!(validate_tree(&g)
            .iter()
            .any(|v| matches!(v, Violation::NotConnected { .. })));
    }

    #[test]
    fn validate_checks_kind_degree_consistency() {
        let g = MetricTree::new(
            vec![
                ("a".into(), NodeKind::Internal), // degree 1: wrong
                ("b".into(), NodeKind::External),
            ],
            vec![("e0".into(), "a".into(), "b".into(), 1.0)],
        )
        .unwrap();
        assert!(validate_tree(&g)
            .iter()
            .any(|v| matches!(v, Violation::InternalDegree { .. })));
    }

    #[test]
    fn peel_single_edge() {
        let g = parse_network("node A external\nnode B external\nedge e0 A B 1.0\n").unwrap();
        let plan = peel_schedule(&g, "B").unwrap();
        assert_eq!(plan.stages.len(), 1);
        assert_eq!(
            plan.stages[0],
            vec![PeelEdge {
                edge: "e0".into(),
                leaf_side: "A".into(),
                interior_side: "B".into()
            }]
        );
    }

    #[test]
    fn peel_star_two_stages() {
        let plan = peel_schedule(&star3(), "Q3").unwrap();
        assert_eq!(plan.stages.len(), 2);
        let stage1: Vec<&str> = plan.stages[0].iter().map(|p| p.edge.as_str()).collect();
        assert_eq!(stage1, vec!["e1", "e2"]);
        assert_eq!(plan.stages[1][0].edge, "e3");
        assert_eq!(plan.stages[1][0].leaf_side, "P");
        assert_eq!(plan.stages[1][0].interior_side, "Q3");
    }

    #[test]
    fn peel_benchmark_tree_four_stages() {
        let g = benchmark_tree();
        let plan = peel_schedule(&g, "Q7").unwrap();
        assert_eq!(plan.stages.len(), 4);
        assert_eq!(plan.edge_count(), 10);
        // Brute-force reduction oracle: simulate removals independently.
        let stages_oracle = crate::graph::tests::reduction_oracle(&g, "Q7");
        let got: Vec<Vec<String>> = plan
            .stages
            .iter()
            .map(|s| s.iter().map(|p| p.edge.clone()).collect())
            .collect();
        assert_eq!(got, stages_oracle);
    }

    #[test]
    fn peel_rejects_internal_excluded() {
        let g = benchmark_tree();
        assert!(matches!(peel_schedule(&g, "P1"), Err(Error::NotExternal(_))));
    }

    /// Independent reduction: sets-based removal, no degree bookkeeping.
    pub(crate) fn reduction_oracle(g: &MetricTree, excluded: &str) -> Vec<Vec<String>> {
        let mut alive: std::collections::BTreeSet<usize> = (0..g.edge_count()).collect();
        let mut stages = Vec::new();
        while !alive.is_empty() {
            let deg = |n: usize| -> usize {
                g.incident_edges(n).iter().filter(|e| alive.contains(e)).count()
            };
            let mut stage: Vec<(String, usize)> = alive
                .iter()
                .filter_map(|&ei| {
                    let e = &g.edges()[ei];
                    let leaf_from = deg(e.from) == 1 && g.nodes()[e.from].id != excluded;
                    let leaf_to = deg(e.to) == 1 && g.nodes()[e.to].id != excluded;
                    (leaf_from || leaf_to).then(|| (e.id.clone(), ei))
                })
                .collect();
            stage.sort();
            assert!(!stage.is_empty());
            for (_, ei) in &stage {
                alive.remove(ei);
            }
            stages.push(stage.into_iter().map(|(id, _)| id).collect());
        }
        stages
    }

    #[test]
    fn serialize_roundtrip() {
        let g = benchmark_tree();
        let mut pots = BTreeMap::new();
        pots.insert("e0".to_string(), vec![0.0, 0.5, 1.0]);
        let text = g.serialize(&pots);
        let (g2, pots2) = parse_network_file(&text).unwrap();
        assert_eq!(pots, pots2);
        assert_eq!(g.edge_count(), g2.edge_count());
        for e in g.edges() {
            let e2 = &g2.edges()[g2.edge_idx(&e.id).unwrap()];
            assert_eq!(g.nodes()[e.from].id, g2.nodes()[e2.from].id);
            assert_eq!(g.nodes()[e.to].id, g2.nodes()[e2.to].id);
            assert_eq!(e.length, e2.length);
        }
        for n in g.nodes() {
            let n2 = &g2.nodes()[g2.node_idx(&n.id).unwrap()];
            assert_eq!(n.kind, n2.kind);
        }
    }

    #[test]
    fn random_trees_are_valid() {
        for seed in 0..20 {
            let g = random_tree(seed, 1 + (seed as usize * 7) % 50);
            assert!(validate_tree(&g).is_empty(), "seed {seed}");
        }
    }
}
