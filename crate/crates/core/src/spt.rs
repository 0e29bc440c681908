//! Randomized leader election plus shortest-path-tree construction.
//!
//! Each node activates with probability min(1, 4 log2(n)/n) and floods a
//! `join` carrying its id; nodes adopt the maximum-id tree they have heard
//! of, re-flooding strict distance improvements, and answer messages from
//! abandoned trees with `disband`, which propagates to that tree's root and
//! deactivates it. Surviving roots probe tree size with `count` waves sent in
//! rounds 2^i + 1; leaves convergecast counts together with the max and sum
//! of current distances. The root declares the tree done once a wave reports
//! all n nodes, two consecutive waves agree on the distance profile, and the
//! wave spacing exceeds the observed eccentricity (so no improvement can
//! still be in flight). The `done` flood carries the diameter estimate
//! (twice the max root distance) and the globally agreed round at which the
//! next protocol phase starts.
//!
//! The core is embeddable: the MST protocols run it as their first stage.

use crate::graph::{NodeId, WeightedGraph};
use crate::sim::{
    merge_wake, Automaton, Ctx, Delivery, EngineError, NodeInfo, OutQueue, Payload, PortId,
    Protocol, Round, RunMetrics, Sim, SimOptions, Wake,
};
use crate::util::ceil_log2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};

pub const TAG_JOIN: u16 = 1;
pub const TAG_ATTACH: u16 = 2;
pub const TAG_DETACH: u16 = 3;
pub const TAG_DISBAND: u16 = 4;
pub const TAG_CREQ: u16 = 5;
pub const TAG_CUP: u16 = 6;
pub const TAG_DONE: u16 = 7;

/// KT0 audit table for the SPT tags (field indices that carry node ids).
pub fn spt_id_fields(tag: u16) -> &'static [usize] {
    match tag {
        TAG_JOIN | TAG_ATTACH | TAG_DETACH | TAG_DISBAND | TAG_CREQ | TAG_DONE => &[0],
        _ => &[],
    }
}

/// Result of the SPT stage at one node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SptOutcome {
    pub root: NodeId,
    pub parent_port: Option<PortId>,
    pub children: BTreeSet<PortId>,
    pub dist: u64,
    /// 2 x (max distance from the root); in [D, 2D].
    pub d_est: u64,
    /// Round at which the follow-up phase starts, agreed by all nodes.
    pub r0: Round,
}

#[derive(Debug, Clone, Default)]
struct WaveAgg {
    expected: BTreeSet<PortId>,
    count: u64,
    maxdist: u64,
    sumdist: u64,
}

/// Embeddable SPT state machine. Drive it with `step_phase` until it yields
/// an outcome; keep forwarding deliveries afterwards so stale traffic drains.
#[derive(Debug, Clone)]
pub struct SptCore {
    id: NodeId,
    n: usize,
    cap_inv: u64,
    latencies: Vec<u64>,
    pub activated: bool,
    exploring: bool,
    root: Option<NodeId>,
    dist: u64,
    parent_port: Option<PortId>,
    children: BTreeSet<PortId>,
    pending: BTreeMap<u64, WaveAgg>,
    last_wave: Option<(u64, u64, u64)>,
    wave_k0: u32,
    out: OutQueue,
    outcome: Option<SptOutcome>,
}

impl SptCore {
    pub fn new(info: &NodeInfo, rng: &mut ChaCha8Rng) -> Self {
        let n = info.n;
        let p = if n <= 1 {
            0.0
        } else {
            (4.0 * (n as f64).log2() / n as f64).min(1.0)
        };
        let activated = n == 1 || rng.gen_bool(p);
        let mut core = SptCore {
            id: info.id,
            n,
            cap_inv: info.cap_inv,
            latencies: info.ports.iter().map(|p| p.latency).collect(),
            activated,
            exploring: false,
            root: None,
            dist: 0,
            parent_port: None,
            children: BTreeSet::new(),
            pending: BTreeMap::new(),
            last_wave: None,
            wave_k0: ceil_log2(info.cap_inv),
            out: OutQueue::default(),
            outcome: None,
        };
        if activated {
            core.exploring = true;
            core.root = Some(core.id);
        }
        core
    }

    pub fn outcome(&self) -> Option<&SptOutcome> {
        self.outcome.as_ref()
    }

    fn is_root(&self) -> bool {
        self.exploring && self.root == Some(self.id)
    }

    fn next_wave_round(&self, now: Round) -> Option<Round> {
        if !self.is_root() {
            return None;
        }
        let mut i = self.wave_k0;
        loop {
            let r = (1u64 << i) + 1;
            if r > now {
                return Some(r);
            }
            i += 1;
        }
    }

    fn queue_join(&mut self, port: PortId, root: NodeId, dist: u64) {
        // a queued unsent join on this port is stale once we know better
        self.out
            .push_replacing(port, Payload::new(TAG_JOIN, [root as u64, dist, 0, 0]), TAG_JOIN);
    }

    fn flood_join(&mut self, except: Option<PortId>) {
        let root = self.root.unwrap();
        for p in 0..self.latencies.len() {
            if Some(p) != except {
                self.queue_join(p, root, self.dist);
            }
        }
    }

    fn adopt(&mut self, root: NodeId, dist: u64, port: PortId) {
        let old_root = self.root;
        let old_parent = self.parent_port;
        if self.exploring {
            // our own tree is dead; members will defect as the flood spreads
            self.exploring = false;
        }
        if let (Some(r), Some(p)) = (old_root, old_parent) {
            // covers any pending wave the old parent is waiting on
            self.out.push(p, Payload::new(TAG_DISBAND, [r as u64, 0, 0, 0]));
        }
        self.root = Some(root);
        self.dist = dist;
        self.parent_port = Some(port);
        self.children.clear();
        self.pending.clear();
        self.out
            .push(port, Payload::new(TAG_ATTACH, [root as u64, 0, 0, 0]));
        self.flood_join(Some(port));
    }

    fn improve(&mut self, dist: u64, port: PortId) {
        let root = self.root.unwrap();
        if let Some(old) = self.parent_port {
            if old != port {
                self.out
                    .push(old, Payload::new(TAG_DETACH, [root as u64, 0, 0, 0]));
                self.out
                    .push(port, Payload::new(TAG_ATTACH, [root as u64, 0, 0, 0]));
            }
        }
        self.parent_port = Some(port);
        self.dist = dist;
        self.flood_join(Some(port));
    }

    fn drop_expected(&mut self, port: PortId, ctx: &mut Ctx<'_>) {
        let waves: Vec<u64> = self.pending.keys().copied().collect();
        for w in waves {
            if let Some(agg) = self.pending.get_mut(&w) {
                agg.expected.remove(&port);
            }
            self.try_complete_wave(w, ctx);
        }
    }

    fn try_complete_wave(&mut self, wave: u64, ctx: &mut Ctx<'_>) {
        let Some(agg) = self.pending.get(&wave) else { return };
        if !agg.expected.is_empty() {
            return;
        }
        let agg = self.pending.remove(&wave).unwrap();
        let count = agg.count + 1;
        let maxdist = agg.maxdist.max(self.dist);
        let sumdist = agg.sumdist + self.dist;
        if self.is_root() {
            let profile = (count, maxdist, sumdist);
            let stable = self.last_wave == Some(profile);
            self.last_wave = Some(profile);
            if count == self.n as u64 && stable && (1u64 << wave) >= 2 * maxdist {
                self.finish_as_root(ctx, maxdist);
            }
        } else if let Some(p) = self.parent_port {
            self.out
                .push(p, Payload::new(TAG_CUP, [wave, count, maxdist, sumdist]));
        }
    }

    fn finish_as_root(&mut self, ctx: &mut Ctx<'_>, maxdist: u64) {
        let d_est = 2 * maxdist;
        let r0 = ctx.round() + d_est + 8 * (self.cap_inv + 1);
        self.exploring = false;
        self.outcome = Some(SptOutcome {
            root: self.id,
            parent_port: None,
            children: self.children.clone(),
            dist: 0,
            d_est,
            r0,
        });
        let f = [self.id as u64, d_est, r0, 0];
        for &c in &self.children.clone() {
            self.out.push(c, Payload::new(TAG_DONE, f));
        }
    }

    fn handle_done(&mut self, d: &Delivery, ctx: &mut Ctx<'_>) {
        let root = d.payload.f[0] as usize;
        if self.outcome.is_some() || self.root != Some(root) {
            return;
        }
        if ctx.round() > d.payload.f[2] {
            ctx.fault("spt done flood arrived past the agreed start round");
            return;
        }
        self.outcome = Some(SptOutcome {
            root,
            parent_port: self.parent_port,
            children: self.children.clone(),
            dist: self.dist,
            d_est: d.payload.f[1],
            r0: d.payload.f[2],
        });
        self.exploring = false;
        for &c in &self.children.clone() {
            self.out.push(c, Payload::new(TAG_DONE, d.payload.f));
        }
    }

    /// Advance the SPT stage; returns the wake round the outbox still needs.
    pub fn step_phase(&mut self, ctx: &mut Ctx<'_>, inbox: &[Delivery]) -> Option<Round> {
        if self.n == 1 {
            if self.outcome.is_none() {
                self.outcome = Some(SptOutcome {
                    root: self.id,
                    parent_port: None,
                    children: BTreeSet::new(),
                    dist: 0,
                    d_est: 0,
                    r0: ctx.round() + 1,
                });
            }
            return None;
        }
        if ctx.round() == 0 && self.activated {
            self.flood_join(None);
        }

        // best join candidate this round: max root, then min dist, then min port
        let mut best: Option<(NodeId, u64, PortId)> = None;
        for d in inbox {
            match d.payload.tag {
                TAG_JOIN => {
                    let root = d.payload.f[0] as usize;
                    let dist = d.payload.f[1] + self.latencies[d.port];
                    let cur = self.root.map(|r| r as i64).unwrap_or(-1);
                    if (root as i64) < cur {
                        self.out
                            .push(d.port, Payload::new(TAG_DISBAND, [root as u64, 0, 0, 0]));
                        continue;
                    }
                    if (root as i64) == cur && self.outcome.is_some() {
                        if dist < self.dist {
                            ctx.fault("join improvement arrived after spt done");
                        }
                        continue;
                    }
                    if (root as i64) == cur && dist >= self.dist {
                        continue;
                    }
                    if (root as i64) > cur && self.outcome.is_some() {
                        ctx.fault("join for a bigger root after spt done");
                        continue;
                    }
                    let better = match best {
                        Some((br, bd, bp)) => root > br || (root == br && (dist, d.port) < (bd, bp)),
                        None => true,
                    };
                    if better {
                        best = Some((root, dist, d.port));
                    }
                }
                TAG_ATTACH => {
                    let root = d.payload.f[0] as usize;
                    if self.root == Some(root) {
                        self.children.insert(d.port);
                        if let Some(out) = &self.outcome {
                            // late attach: hand the child the done it missed
                            let f = [out.root as u64, out.d_est, out.r0, 0];
                            self.out.push(d.port, Payload::new(TAG_DONE, f));
                        }
                    } else {
                        self.out
                            .push(d.port, Payload::new(TAG_DISBAND, [root as u64, 0, 0, 0]));
                    }
                }
                TAG_DETACH => {
                    let root = d.payload.f[0] as usize;
                    if self.root == Some(root) {
                        self.children.remove(&d.port);
                        self.drop_expected(d.port, ctx);
                    }
                }
                TAG_DISBAND => {
                    let root = d.payload.f[0] as usize;
                    if self.root == Some(root) && self.outcome.is_none() {
                        if self.children.remove(&d.port) {
                            self.drop_expected(d.port, ctx);
                        }
                        if self.id == root {
                            self.exploring = false;
                        } else if let Some(p) = self.parent_port {
                            self.out
                                .push(p, Payload::new(TAG_DISBAND, [root as u64, 0, 0, 0]));
                        }
                    }
                }
                TAG_CREQ => {
                    let root = d.payload.f[0] as usize;
                    let wave = d.payload.f[1];
                    if self.root != Some(root) {
                        self.out
                            .push(d.port, Payload::new(TAG_DISBAND, [root as u64, 0, 0, 0]));
                    } else if self.parent_port == Some(d.port) && self.outcome.is_none() {
                        let agg = WaveAgg {
                            expected: self.children.clone(),
                            ..Default::default()
                        };
                        for &c in &agg.expected.clone() {
                            self.out
                                .push(c, Payload::new(TAG_CREQ, [root as u64, wave, 0, 0]));
                        }
                        self.pending.insert(wave, agg);
                        self.try_complete_wave(wave, ctx);
                    } else if self.parent_port != Some(d.port) {
                        // stale topology: sender still thinks we are its child
                        self.out
                            .push(d.port, Payload::new(TAG_DETACH, [root as u64, 0, 0, 0]));
                    }
                }
                TAG_CUP => {
                    let wave = d.payload.f[0];
                    if let Some(agg) = self.pending.get_mut(&wave) {
                        if agg.expected.remove(&d.port) {
                            agg.count += d.payload.f[1];
                            agg.maxdist = agg.maxdist.max(d.payload.f[2]);
                            agg.sumdist += d.payload.f[3];
                            self.try_complete_wave(wave, ctx);
                        }
                    }
                }
                TAG_DONE => self.handle_done(d, ctx),
                _ => {}
            }
        }

        if let Some((root, dist, port)) = best {
            if self.root == Some(root) {
                self.improve(dist, port);
            } else {
                self.adopt(root, dist, port);
            }
        }

        // root launches count waves at rounds 2^i + 1
        if self.is_root() {
            let now = ctx.round();
            if now >= (1u64 << self.wave_k0) + 1 && (now - 1).is_power_of_two() {
                let wave = (now - 1).trailing_zeros() as u64;
                let agg = WaveAgg {
                    expected: self.children.clone(),
                    ..Default::default()
                };
                for &c in &agg.expected.clone() {
                    self.out
                        .push(c, Payload::new(TAG_CREQ, [self.id as u64, wave, 0, 0]));
                }
                self.pending.insert(wave, agg);
                self.try_complete_wave(wave, ctx);
            }
        }

        let mut wake = self.out.pump(ctx);
        wake = merge_wake(wake, self.next_wave_round(ctx.round()));
        wake
    }

    /// True when the stage is over and the outbox is drained.
    pub fn quiescent(&self) -> bool {
        self.outcome.is_some() && self.out.is_empty()
    }
}

/// Standalone SPT protocol (election + tree only).
pub struct SptProtocol;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SptNodeOutput {
    pub activated: bool,
    pub root: Option<NodeId>,
    pub parent_port: Option<PortId>,
    pub dist: u64,
    pub d_est: u64,
}

pub struct SptNode {
    core: SptCore,
}

impl Automaton for SptNode {
    type Output = SptNodeOutput;
    fn step(&mut self, ctx: &mut Ctx<'_>, inbox: &[Delivery]) -> Wake {
        match self.core.step_phase(ctx, inbox) {
            Some(r) => Wake::At(r),
            None => Wake::OnDelivery,
        }
    }
    fn finished(&self) -> bool {
        self.core.quiescent()
    }
    fn output(&self) -> SptNodeOutput {
        let out = self.core.outcome();
        SptNodeOutput {
            activated: self.core.activated,
            root: out.map(|o| o.root),
            parent_port: out.and_then(|o| o.parent_port),
            dist: out.map(|o| o.dist).unwrap_or(0),
            d_est: out.map(|o| o.d_est).unwrap_or(0),
        }
    }
}

impl Protocol for SptProtocol {
    type Node = SptNode;
    fn build(&self, info: NodeInfo, mut rng: ChaCha8Rng) -> SptNode {
        SptNode { core: SptCore::new(&info, &mut rng) }
    }
    fn id_fields(tag: u16) -> &'static [usize] {
        spt_id_fields(tag)
    }
}

#[derive(Debug, Clone)]
pub struct SptRun {
    pub root: NodeId,
    pub activated: Vec<bool>,
    pub dist: Vec<u64>,
    pub parent_port: Vec<Option<PortId>>,
    pub d_est: u64,
    pub metrics: RunMetrics,
    /// Number of activation redraws before at least one node activated.
    pub attempts: u32,
}

/// Derive a fresh engine seed for an activation redraw.
pub fn attempt_seed(seed: u64, attempt: u32) -> u64 {
    seed.wrapping_add((attempt as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Elect a leader and build the shortest path tree. A draw that activates
/// nobody (probability <= n^-4) is redrawn with a derived seed.
pub fn spt_elect_and_build(
    graph: &WeightedGraph,
    seed: u64,
    opts: &SimOptions,
) -> Result<SptRun, EngineError> {
    for attempt in 0..64 {
        let s = attempt_seed(seed, attempt);
        let mut sim: Sim<SptProtocol> = Sim::new(graph, &SptProtocol, s, opts);
        if graph.n > 1 && !sim.nodes.iter().any(|nd| nd.core.activated) {
            continue;
        }
        let metrics = sim.run()?;
        let outs = sim.outputs();
        let root = outs[0].root.expect("spt finished without outcome");
        return Ok(SptRun {
            root,
            activated: outs.iter().map(|o| o.activated).collect(),
            dist: outs.iter().map(|o| o.dist).collect(),
            parent_port: outs.iter().map(|o| o.parent_port).collect(),
            d_est: outs[0].d_est,
            metrics,
            attempts: attempt,
        });
    }
    Err(EngineError::ProtocolFault {
        node: 0,
        reason: "no activation in 64 redraws".into(),
    })
}

/// 2 x (max root distance); guaranteed in [D, 2D].
pub fn spt_diameter_estimate(run: &SptRun) -> u64 {
    2 * run.dist.iter().copied().max().unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{shortest_path_tree_from, Edge, WeightedGraph};

    fn random_arb(n: usize, cap_inv: u64, seed: u64) -> WeightedGraph {
        crate::gen::gen_random(crate::gen::RandomFamily::Arbitrary, n, cap_inv, None, seed)
            .unwrap()
    }

    fn check_against_oracle(g: &WeightedGraph, seed: u64) -> SptRun {
        let run = spt_elect_and_build(g, seed, &SimOptions::default()).unwrap();
        let max_active = (0..g.n)
            .filter(|&v| run.activated[v])
            .max()
            .expect("someone activated");
        assert_eq!(run.root, max_active, "root must be max id among activated");
        let oracle = shortest_path_tree_from(g, run.root);
        assert_eq!(run.dist, oracle.dist, "distances must match the oracle");
        // parent edges lie on shortest paths
        let adj = port_map(g);
        for v in 0..g.n {
            if v == run.root {
                assert!(run.parent_port[v].is_none());
                continue;
            }
            let p = run.parent_port[v].expect("non-root has a parent");
            let (peer, lat) = adj[v][p];
            assert_eq!(run.dist[v], run.dist[peer] + lat, "node {v}");
        }
        let d = crate::graph::latency_diameter(g);
        let est = spt_diameter_estimate(&run);
        assert!(est >= d && est <= 2 * d, "estimate {est} not in [{d}, {}]", 2 * d);
        assert_eq!(run.d_est, est);
        run
    }

    /// port -> (peer, latency), mirroring the engine's weight-sorted ports.
    fn port_map(g: &WeightedGraph) -> Vec<Vec<(usize, u64)>> {
        let mut inc: Vec<Vec<usize>> = vec![Vec::new(); g.n];
        for (ei, e) in g.edges.iter().enumerate() {
            inc[e.u].push(ei);
            inc[e.v].push(ei);
        }
        inc.iter_mut()
            .enumerate()
            .map(|(v, list)| {
                list.sort_by_key(|&ei| g.edges[ei].weight);
                list.iter()
                    .map(|&ei| (g.edges[ei].other(v), g.edges[ei].latency))
                    .collect()
            })
            .collect()
    }

    #[test]
    fn single_node_is_its_own_root() {
        let g = WeightedGraph::new(1, 1, vec![]);
        let run = spt_elect_and_build(&g, 3, &SimOptions::default()).unwrap();
        assert_eq!(run.root, 0);
        assert_eq!(run.metrics.messages, 0);
    }

    #[test]
    fn triangle_matches_oracle() {
        let g = WeightedGraph::new(
            3,
            1,
            vec![
                Edge { u: 0, v: 1, weight: 1, latency: 1 },
                Edge { u: 1, v: 2, weight: 2, latency: 2 },
                Edge { u: 0, v: 2, weight: 3, latency: 3 },
            ],
        );
        // n=3 activates everyone (p = 1), so the root is node 2
        let run = check_against_oracle(&g, 5);
        assert_eq!(run.root, 2);
        assert_eq!(run.dist, vec![3, 2, 0]);
    }

    #[test]
    fn star_estimate_bounds() {
        let g = WeightedGraph::new(
            4,
            1,
            vec![
                Edge { u: 0, v: 1, weight: 1, latency: 4 },
                Edge { u: 0, v: 2, weight: 2, latency: 2 },
                Edge { u: 0, v: 3, weight: 3, latency: 3 },
            ],
        );
        for seed in 0..10 {
            check_against_oracle(&g, seed);
        }
    }

    #[test]
    fn random_graphs_match_oracle_many_seeds() {
        for seed in 0..12 {
            let g = random_arb(24, 2, 900 + seed);
            check_against_oracle(&g, seed);
        }
    }

    #[test]
    fn message_bound_holds_on_random_arb() {
        let mut worst = 0.0f64;
        for seed in 0..10 {
            let g = random_arb(64, 1, 40 + seed);
            let run = check_against_oracle(&g, seed);
            let bound = 8.0 * g.m() as f64 * (g.n as f64).log2();
            let ratio = run.metrics.messages as f64 / bound;
            worst = worst.max(ratio);
            assert!(
                (run.metrics.messages as f64) <= bound,
                "seed {seed}: {} > {bound}",
                run.metrics.messages
            );
        }
        eprintln!("spt message bound worst ratio: {worst:.3}");
    }

    #[test]
    fn determinism_across_runs() {
        let g = random_arb(32, 2, 77);
        let a = spt_elect_and_build(&g, 1, &SimOptions::default()).unwrap();
        let b = spt_elect_and_build(&g, 1, &SimOptions::default()).unwrap();
        assert_eq!(a.dist, b.dist);
        assert_eq!(a.metrics.messages, b.metrics.messages);
        assert_eq!(a.metrics.rounds, b.metrics.rounds);
    }
}
