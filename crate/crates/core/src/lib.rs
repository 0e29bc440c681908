//! Weighted CONGEST simulator and distributed MST protocols.
//!
//! The model: a synchronous message-passing network where every edge carries
//! a weight, a latency (delivery takes that many rounds), and a shared
//! capacity of one message per `cap_inv` rounds per direction, with KT0
//! identities (nodes do not know neighbor ids). Three MST protocols run on
//! top of it:
//!
//! - [`mst_equal`]: weights equal latencies; controlled fragment growth plus
//!   pipelined global aggregation over a shortest-path tree, wrapped in
//!   guess-and-double for the unknown MST weight.
//! - [`mst_pipeline`]: arbitrary weights and latencies; all edges stream up a
//!   shortest-path tree in weight order with cycle filtering.
//! - [`mst_uniform`]: uniform latency; the same two-stage scheme gated by
//!   fragment diameter over a BFS tree.
//!
//! [`graph`] holds the sequential oracles each run is verified against,
//! [`gen`] the instance generators (including the lower-bound constructions),
//! and [`harness`] the experiment driver used by the CLI.

pub mod gen;
pub mod graph;
pub mod harness;
pub mod mst_equal;
pub mod mst_pipeline;
pub mod mst_uniform;
pub mod sim;
pub mod spt;
pub mod util;

mod aggregate;
pub mod cli;
