//! Experiment driver: run a protocol on an instance, verify the output
//! against the sequential oracles, and compute the round-bound ratios used
//! by the sweep reports.

use crate::graph::{EdgeId, WeightedGraph};
use crate::sim::PortId;
use std::collections::BTreeSet;

/// Per-node `port -> edge id` map in edge-weight order, matching the engine's
/// port numbering.
pub fn port_edges(g: &WeightedGraph) -> Vec<Vec<EdgeId>> {
    let mut incident: Vec<Vec<EdgeId>> = vec![Vec::new(); g.n];
    for (ei, e) in g.edges.iter().enumerate() {
        incident[e.u].push(ei);
        incident[e.v].push(ei);
    }
    for inc in incident.iter_mut() {
        inc.sort_by_key(|&ei| g.edges[ei].weight);
    }
    incident
}

/// Translate per-node MST port marks into an edge set, checking that the two
/// endpoints of every edge agree.
pub fn ports_to_edge_set(
    g: &WeightedGraph,
    marks: &[BTreeSet<PortId>],
) -> Result<BTreeSet<EdgeId>, String> {
    let incident = port_edges(g);
    let mut marked = vec![[false; 2]; g.edges.len()];
    for (v, ports) in marks.iter().enumerate() {
        for &p in ports {
            let ei = *incident[v]
                .get(p)
                .ok_or_else(|| format!("node {v}: port {p} out of range"))?;
            let side = usize::from(g.edges[ei].v == v);
            marked[ei][side] = true;
        }
    }
    let mut set = BTreeSet::new();
    for (ei, m) in marked.iter().enumerate() {
        match (m[0], m[1]) {
            (true, true) => {
                set.insert(ei);
            }
            (false, false) => {}
            _ => {
                return Err(format!(
                    "edge {ei}: endpoints disagree on MST membership"
                ))
            }
        }
    }
    Ok(set)
}
