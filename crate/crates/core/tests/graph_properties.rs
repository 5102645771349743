use std::collections::BTreeSet;

use proptest::prelude::*;
use reagan::graph::{load_graph, load_split_file, make_splits, RawNode, SplitRatios};
use reagan::TextAttributedGraph;

fn build(n: usize, edges: &[(usize, usize)]) -> TextAttributedGraph {
    let nodes = (0..n)
        .map(|i| RawNode { id: format!("n{i}"), text: format!("text {i}"), label: Some((i % 3).to_string()) })
        .collect();
    let edges: Vec<(String, String)> = edges.iter().map(|(a, b)| (format!("n{a}"), format!("n{b}"))).collect();
    TextAttributedGraph::from_parts(nodes, &edges).unwrap()
}

fn graph_strategy() -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
    (1usize..30).prop_flat_map(|n| (Just(n), prop::collection::vec((0..n, 0..n), 0..80)))
}

proptest! {
    #[test]
    fn adjacency_is_symmetric_and_simple((n, edges) in graph_strategy()) {
        let g = build(n, &edges);
        let distinct: BTreeSet<(usize, usize)> =
            edges.iter().filter(|(a, b)| a != b).map(|&(a, b)| (a.min(b), a.max(b))).collect();
        prop_assert_eq!(g.edge_count(), distinct.len());
        for v in 0..n {
            let one = g.neighbors(v, 1).unwrap();
            prop_assert!(one.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(!one.contains(&v));
            prop_assert_eq!(one.len(), g.degree(v));
            for &u in &one {
                prop_assert!(g.neighbors(u, 1).unwrap().contains(&v));
            }
            let two: BTreeSet<usize> = g.neighbors(v, 2).unwrap().into_iter().collect();
            prop_assert!(!two.contains(&v));
            prop_assert!(one.iter().all(|u| two.contains(u)));
            for &w in &two {
                let via = one.iter().any(|&u| u == w || g.neighbors(u, 1).unwrap().contains(&w));
                prop_assert!(via);
            }
        }
        prop_assert!(g.neighbors(n, 1).is_err());
        prop_assert!(g.neighbors(0, 3).is_err());
    }

    #[test]
    fn splits_partition_and_gate_labels((n, edges) in graph_strategy(), seed in any::<u64>()) {
        let g = build(n, &edges);
        let s = make_splits(&g, SplitRatios::default(), seed).unwrap();
        let (train, val, test) = SplitRatios::default().sizes(n);
        prop_assert_eq!((s.train_ids.len(), s.val_ids.len(), s.test_ids.len()), (train, val, test));
        let mut all: Vec<usize> = s.train_ids.iter().chain(&s.val_ids).chain(&s.test_ids).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(&s, &make_splits(&g, SplitRatios::default(), seed).unwrap());
        let g = g.with_splits(&s).unwrap();
        for v in 0..n {
            prop_assert_eq!(g.visible_label(v).is_some(), s.train_ids.contains(&v));
            prop_assert_eq!(g.gold_label(v), Some(v % 3));
        }
    }
}

#[test]
fn files_round_trip() {
    let edges = [(0, 1), (1, 2), (2, 0), (3, 4), (4, 3), (5, 5)];
    let g = build(6, &edges);
    let g = g.clone().with_splits(&make_splits(&g, SplitRatios::default(), 9).unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (nodes, edge_file, splits) = (dir.path().join("nodes.jsonl"), dir.path().join("edges.csv"), dir.path().join("splits.jsonl"));
    g.write_nodes(&nodes).unwrap();
    g.write_edges(&edge_file).unwrap();
    g.write_splits(&splits).unwrap();
    let back = load_graph(&nodes, &edge_file).unwrap();
    let back = back.clone().with_splits(&load_split_file(&back, &splits).unwrap()).unwrap();
    assert_eq!(back.edge_count(), 4);
    for v in 0..6 {
        assert_eq!(back.neighbors(v, 1).unwrap(), g.neighbors(v, 1).unwrap());
        assert_eq!(back.text(v), g.text(v));
        assert_eq!(back.visible_label(v), g.visible_label(v));
        assert_eq!(back.gold_label(v), g.gold_label(v));
    }
}
