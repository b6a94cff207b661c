//! Property tests for the network model and the reduction schedule.

use proptest::prelude::*;
use std::collections::BTreeMap;

use treewave_core::graph::{
    parse_network_file, peel_schedule, random_tree, validate_tree, MetricTree, NodeKind,
};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Every random tree and every excluded leaf yield a schedule that
    /// covers each edge exactly once and terminates on the empty graph.
    #[test]
    fn schedule_covers_all_edges(seed in any::<u64>(), n_edges in 1usize..=50) {
        let tree = random_tree(seed, n_edges);
        prop_assert!(validate_tree(&tree).is_empty());
        let leaves: Vec<String> = tree
            .external_nodes()
            .map(|n| tree.nodes()[n].id.clone())
            .collect();
        let excluded = &leaves[(seed % leaves.len() as u64) as usize];
        let plan = peel_schedule(&tree, excluded).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for stage in &plan.stages {
            for pe in stage {
                prop_assert!(seen.insert(pe.edge.clone()), "edge {} scheduled twice", pe.edge);
                prop_assert_ne!(&pe.leaf_side, excluded);
            }
        }
        prop_assert_eq!(seen.len(), tree.edge_count());
    }

    /// Adding a chord between two existing nodes always trips validation.
    #[test]
    fn injected_cycle_is_detected(seed in any::<u64>(), n_edges in 2usize..=40) {
        let tree = random_tree(seed, n_edges);
        let n = tree.node_count();
        let a = (seed % n as u64) as usize;
        let b = (a + 1 + (seed / 7 % (n as u64 - 1)) as usize) % n;
        let nodes: Vec<(String, NodeKind)> = tree
            .nodes()
            .iter()
            .map(|node| (node.id.clone(), NodeKind::Internal))
            .collect();
        let mut edges: Vec<(String, String, String, f64)> = tree
            .edges()
            .iter()
            .map(|e| {
                (
                    e.id.clone(),
                    tree.nodes()[e.from].id.clone(),
                    tree.nodes()[e.to].id.clone(),
                    e.length,
                )
            })
            .collect();
        edges.push((
            "chord".to_string(),
            tree.nodes()[a].id.clone(),
            tree.nodes()[b].id.clone(),
            1.0,
        ));
        let cyclic = MetricTree::new(nodes, edges).unwrap();
        let violations = validate_tree(&cyclic);
        prop_assert!(
            violations
                .iter()
                .any(|v| matches!(v, treewave_core::graph::Violation::CycleDetected { .. })),
            "no cycle reported: {violations:?}"
        );
    }

    /// Serialize then parse reproduces the same network values.
    #[test]
    fn serialize_parse_roundtrip(seed in any::<u64>(), n_edges in 1usize..=30) {
        let tree = random_tree(seed, n_edges);
        let mut pots = BTreeMap::new();
        pots.insert(
            tree.edges()[0].id.clone(),
            vec![0.25, -1.0, 3.5_f64.sqrt(), 0.125],
        );
        let text = tree.serialize(&pots);
        let (back, pots_back) = parse_network_file(&text).unwrap();
        prop_assert_eq!(pots, pots_back);
        prop_assert_eq!(tree.node_count(), back.node_count());
        prop_assert_eq!(tree.edge_count(), back.edge_count());
        for e in tree.edges() {
            let be = &back.edges()[back.edge_idx(&e.id).unwrap()];
            prop_assert_eq!(&tree.nodes()[e.from].id, &back.nodes()[be.from].id);
            prop_assert_eq!(&tree.nodes()[e.to].id, &back.nodes()[be.to].id);
            prop_assert_eq!(e.length.to_bits(), be.length.to_bits());
        }
        for n in tree.nodes() {
            let bn = &back.nodes()[back.node_idx(&n.id).unwrap()];
            prop_assert_eq!(n.kind, bn.kind);
        }
    }
}
