//! MST protocol for uniform edge latency l with arbitrary distinct weights.
//!
//! Reuses the two-stage machinery with fragment growth gated by hop diameter
//! instead of tree weight, every edge testable in every iteration, and the
//! hop-BFS tree (the shortest-path tree, since latencies are uniform) as the
//! aggregation structure. The diameter is known from the tree build, so there
//! is no guessing: one local pass in the regime picked by the diameter
//! estimate against sqrt(n l / c), then global aggregation.

pub use crate::aggregate::{AggRun, InvariantReport, LocalRegime};
use crate::aggregate::{run_agg, Mode};
use crate::gen::uniform_latency;
use crate::graph::WeightedGraph;
use crate::sim::{EngineError, SimOptions};

pub fn run_mst_uniform(
    graph: &WeightedGraph,
    seed: u64,
    opts: &SimOptions,
) -> Result<AggRun, EngineError> {
    if graph.n == 1 {
        return run_agg(graph, Mode::Uniform { ell: 1 }, seed, opts);
    }
    let Some(ell) = uniform_latency(graph) else {
        return Err(EngineError::ProtocolFault {
            node: 0,
            reason: "uniform protocol on a graph with mixed latencies".into(),
        });
    };
    run_agg(graph, Mode::Uniform { ell }, seed, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregate::{AggProtocol, Mode};
    use crate::gen::{gen_random, RandomFamily};
    use crate::graph::{oracle_mst, Edge, WeightedGraph};
    use crate::harness::ports_to_edge_set;
    use crate::sim::Sim;
    use std::collections::{BTreeMap, BTreeSet};

    fn check_run(g: &WeightedGraph, seed: u64) -> AggRun {
        let run = run_mst_uniform(g, seed, &SimOptions::default()).unwrap();
        let expected: BTreeSet<usize> = oracle_mst(g).into_iter().collect();
        let got = ports_to_edge_set(g, &run.mst_ports).expect("inconsistent port marks");
        assert_eq!(got, expected, "seed {seed}");
        assert!(
            run.report.violations.is_empty(),
            "invariant violations: {:?}",
            run.report.violations
        );
        run
    }

    #[test]
    fn uniform_triangle() {
        let g = WeightedGraph::new(
            3,
            1,
            vec![
                Edge { u: 0, v: 1, weight: 10, latency: 3 },
                Edge { u: 1, v: 2, weight: 20, latency: 3 },
                Edge { u: 0, v: 2, weight: 30, latency: 3 },
            ],
        );
        let run = check_run(&g, 0);
        let got = ports_to_edge_set(&g, &run.mst_ports).unwrap();
        assert_eq!(got, BTreeSet::from([0, 1]));
    }

    #[test]
    fn rejects_mixed_latencies() {
        let g = WeightedGraph::new(2, 1, vec![Edge { u: 0, v: 1, weight: 5, latency: 3 }]);
        assert!(run_mst_uniform(&g, 0, &SimOptions::default()).is_ok());
        let g2 = WeightedGraph::new(
            3,
            1,
            vec![
                Edge { u: 0, v: 1, weight: 5, latency: 3 },
                Edge { u: 1, v: 2, weight: 6, latency: 4 },
            ],
        );
        assert!(run_mst_uniform(&g2, 0, &SimOptions::default()).is_err());
    }

    /// Offline replay of the growth schedule on an 8-cycle whose weights make
    /// every outcome forced: mutual pairs at iteration 0, then the two halves
    /// assemble, then one fragment.
    #[test]
    fn eight_cycle_partition_trace() {
        let w = [1u64, 100, 2, 101, 3, 102, 4, 103];
        let edges: Vec<Edge> = (0..8)
            .map(|i| {
                let j = (i + 1) % 8;
                Edge { u: i.min(j), v: i.max(j), weight: w[i], latency: 2 }
            })
            .collect();
        let g = WeightedGraph::new(8, 1, edges);
        assert!(g.validate().is_ok());
        let protocol = AggProtocol {
            mode: Mode::Uniform { ell: 2 },
            w_cap: 2 * g.edges.iter().map(|e| e.weight).sum::<u64>(),
        };
        let mut sim: Sim<AggProtocol> = Sim::new(&g, &protocol, 1, &Default::default());
        assert!(sim.nodes.iter().any(|n| n.spt_activated()));
        let mut partitions: Vec<Vec<BTreeSet<usize>>> = Vec::new();
        sim.run_with(|events, nodes| {
            for ev in events {
                if ev.label == "li_start" {
                    let mut frags: BTreeMap<u64, BTreeSet<usize>> = BTreeMap::new();
                    for (v, node) in nodes.iter().enumerate() {
                        frags.entry(node.fragment_view().0).or_default().insert(v);
                    }
                    partitions.push(frags.into_values().collect());
                }
            }
        })
        .unwrap();
        let sets = |out: &[&[usize]]| -> Vec<BTreeSet<usize>> {
            out.iter().map(|s| s.iter().copied().collect()).collect()
        };
        // D = 8, d_est = 16 > sqrt(n l c^-1) = 4 -> diameter regime,
        // hop target 8, gates 1,2,4,8
        assert_eq!(partitions.len(), 4);
        assert_eq!(
            partitions[0],
            sets(&[&[0], &[1], &[2], &[3], &[4], &[5], &[6], &[7]])
        );
        assert_eq!(partitions[1], sets(&[&[0, 1], &[2, 3], &[4, 5], &[6, 7]]));
        assert_eq!(partitions[2], sets(&[&[0, 1, 2, 3], &[4, 5, 6, 7]]));
        assert_eq!(partitions[3], sets(&[&[0, 1, 2, 3, 4, 5, 6, 7]]));
        let outs = sim.outputs();
        let marks: Vec<BTreeSet<usize>> = outs.iter().map(|o| o.mst_ports.clone()).collect();
        let got = ports_to_edge_set(&g, &marks).unwrap();
        let expected: BTreeSet<usize> = oracle_mst(&g).into_iter().collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn random_uniform_graphs_match_oracle() {
        for seed in 0..5 {
            let g = gen_random(RandomFamily::Uniform, 32, 2, Some(4), 900 + seed).unwrap();
            check_run(&g, seed);
        }
        for seed in 0..3 {
            let g = gen_random(RandomFamily::Uniform, 64, 1, Some(8), 950 + seed).unwrap();
            check_run(&g, seed);
        }
    }

    #[test]
    fn unit_latency_degenerate_case() {
        let g = gen_random(RandomFamily::Uniform, 24, 1, Some(1), 33).unwrap();
        check_run(&g, 0);
    }

    #[test]
    fn bfs_depths_scale_with_latency() {
        // uniform latency: tree distances are hop depth times l, exactly
        let g = gen_random(RandomFamily::Uniform, 40, 2, Some(8), 77).unwrap();
        let run = crate::spt::spt_elect_and_build(&g, 5, &SimOptions::default()).unwrap();
        let hop = crate::graph::hop_distances_from(&g, run.root);
        for v in 0..g.n {
            assert_eq!(run.dist[v], hop[v] * 8);
        }
    }

    #[test]
    fn determinism() {
        let g = gen_random(RandomFamily::Uniform, 24, 2, Some(4), 5).unwrap();
        let a = run_mst_uniform(&g, 9, &SimOptions::default()).unwrap();
        let b = run_mst_uniform(&g, 9, &SimOptions::default()).unwrap();
        assert_eq!(a.mst_ports, b.mst_ports);
        assert_eq!(a.metrics.rounds, b.metrics.rounds);
        assert_eq!(a.metrics.messages, b.metrics.messages);
    }
}
