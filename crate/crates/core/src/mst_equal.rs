//! MST protocol for the case where every edge's weight equals its latency.
//!
//! Runs the shared two-stage machinery: local aggregation builds base
//! fragments whose growth is gated by tree weight at thresholds min(2^i, T);
//! the base fragment count is convergecast to the shortest-path-tree root,
//! which evaluates the guess-and-double success test; global aggregation then
//! merges components over the tree with pipelined upcasts.
//!
//! The diameter regime (D_est above the current guess's square-root target)
//! uses gates that do not depend on the guessed weight at all, so one run of
//! its local pass settles every guess below the regime boundary; doubling
//! only re-executes local aggregation for square-root-regime guesses.

pub use crate::aggregate::{AggRun, InvariantReport, LocalRegime};
use crate::aggregate::{run_agg, Mode};
use crate::graph::WeightedGraph;
use crate::sim::{EngineError, SimOptions};

/// Full protocol run: elect a leader, build the SPT, guess-and-double local
/// aggregation, then global aggregation. Requires weights equal latencies.
pub fn run_mst_equal(
    graph: &WeightedGraph,
    seed: u64,
    opts: &SimOptions,
) -> Result<AggRun, EngineError> {
    if let Some(e) = graph.edges.iter().find(|e| e.weight != e.latency) {
        return Err(EngineError::ProtocolFault {
            node: e.u,
            reason: format!(
                "equal-weights protocol on a graph where edge ({}, {}) has weight {} != latency {}",
                e.u, e.v, e.weight, e.latency
            ),
        });
    }
    run_agg(graph, Mode::Equal, seed, opts)
}
