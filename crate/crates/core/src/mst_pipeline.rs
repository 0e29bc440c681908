//! MST for unrelated weights and latencies: every node's incident edges are
//! streamed up a shortest-path tree in non-decreasing weight order; forwarding
//! nodes keep the lists Q (still to send) and U (sent) and drop any full edge
//! that closes a cycle among the fulls already sent. The root runs the same
//! filter, which leaves it exactly the MST, and broadcasts the result back
//! down the tree.
//!
//! Under KT0 an edge is named by its globally unique weight. A node first
//! reports an edge as a half descriptor (weight, own id, own port); the two
//! halves meet at the endpoints' lowest common tree ancestor (or at the root)
//! and merge into a full descriptor carrying both endpoint ids. Halves bypass
//! the cycle filter: a crossing edge cannot be certified cycle-heavy from one
//! side.

use crate::graph::{NodeId, WeightedGraph};
use crate::sim::{
    merge_wake, Automaton, Ctx, Delivery, EngineError, NodeInfo, OutQueue, Payload, PortId,
    Protocol, Round, RunMetrics, Sim, SimOptions, Wake,
};
use crate::spt::{attempt_seed, spt_id_fields, SptCore, SptOutcome};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};

pub const TAG_HALF: u16 = 10;
pub const TAG_FULL: u16 = 11;
pub const TAG_TERM: u16 = 12;
pub const TAG_BCAST: u16 = 13;
pub const TAG_BEND: u16 = 14;

fn id_fields(tag: u16) -> &'static [usize] {
    match tag {
        TAG_HALF => &[1],
        TAG_FULL | TAG_BCAST => &[1, 2],
        _ => spt_id_fields(tag),
    }
}

/// Union-find over node ids as they appear in full descriptors.
#[derive(Debug, Clone, Default)]
struct DsuMap {
    parent: BTreeMap<u64, u64>,
}

impl DsuMap {
    fn find(&mut self, x: u64) -> u64 {
        let p = *self.parent.entry(x).or_insert(x);
        if p == x {
            return x;
        }
        let r = self.find(p);
        self.parent.insert(x, r);
        r
    }
    /// true if the union merged two components
    fn union(&mut self, a: u64, b: u64) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.parent.insert(ra.max(rb), ra.min(rb));
        true
    }
    fn connected(&mut self, a: u64, b: u64) -> bool {
        self.find(a) == self.find(b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Entry {
    Half { owner: u64, owner_port: u64 },
    Full { a: u64, b: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Spt,
    Upcast,
    Broadcast,
    Done,
}

pub struct PipelineNode {
    id: NodeId,
    n: usize,
    weights: Vec<u64>,
    spt: SptCore,
    spt_out: Option<SptOutcome>,
    stage: Stage,
    /// Q: descriptors not yet forwarded, keyed by weight.
    queue: BTreeMap<u64, Entry>,
    /// per-child watermark: last weight received; MAX once terminated
    watermark: BTreeMap<PortId, u64>,
    uf: DsuMap,
    fulls_forwarded: u64,
    sent_terminate: bool,
    out: OutQueue,
    // root side
    mst: Vec<(u64, u64, u64)>,
    root_seen: Vec<u64>,
    // broadcast side
    got_end: bool,
    marked: BTreeSet<PortId>,
    drops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PipelineOutput {
    pub activated: bool,
    pub mst_ports: BTreeSet<PortId>,
    pub sent_terminate: bool,
    /// Root only: the accepted full descriptors (weight, a, b).
    pub root_mst: Option<Vec<(u64, u64, u64)>>,
    /// Root only: weights of every descriptor that reached the root.
    pub root_seen: Option<Vec<u64>>,
}

impl PipelineNode {
    fn is_root(&self) -> bool {
        self.spt_out.as_ref().map(|o| o.parent_port.is_none()).unwrap_or(false)
    }

    fn begin_upcast(&mut self, ctx: &mut Ctx<'_>) {
        ctx.set_phase("upcast");
        self.stage = Stage::Upcast;
        for (p, &w) in self.weights.iter().enumerate() {
            self.queue.insert(
                w,
                Entry::Half { owner: self.id as u64, owner_port: p as u64 },
            );
        }
        let children = self.spt_out.as_ref().unwrap().children.clone();
        for c in children {
            self.watermark.insert(c, 0);
        }
        self.drain_safe(ctx);
    }

    /// Entries strictly below every live child watermark are safe: a twin
    /// half at the same weight can no longer arrive, so pairing at this node
    /// is complete. Terminated children count as an infinite watermark.
    fn safe_limit(&self) -> u64 {
        self.watermark.values().copied().min().unwrap_or(u64::MAX)
    }

    fn drain_safe(&mut self, ctx: &mut Ctx<'_>) {
        if self.stage != Stage::Upcast {
            return;
        }
        let limit = self.safe_limit();
        loop {
            let Some((&w, &entry)) = self.queue.iter().next() else { break };
            if w >= limit {
                break;
            }
            self.queue.remove(&w);
            if self.is_root() {
                self.root_seen.push(w);
                if let Entry::Full { a, b } = entry {
                    if !self.uf.connected(a, b) {
                        self.uf.union(a, b);
                        self.mst.push((w, a, b));
                    } else {
                        ctx.emit("pl_drop", [w, 0, 0]);
                        self.drops += 1;
                    }
                } else {
                    // a lone half at the root would mean its twin was lost
                    ctx.fault(format!("unpaired half descriptor {w} consumed at root"));
                    return;
                }
                continue;
            }
            let parent = self.spt_out.as_ref().unwrap().parent_port.unwrap();
            match entry {
                Entry::Half { owner, owner_port } => {
                    self.out
                        .push(parent, Payload::new(TAG_HALF, [w, owner, owner_port, 0]));
                }
                Entry::Full { a, b } => {
                    if self.uf.connected(a, b) {
                        ctx.emit("pl_drop", [w, 0, 0]);
                        self.drops += 1;
                    } else {
                        self.uf.union(a, b);
                        self.fulls_forwarded += 1;
                        if self.fulls_forwarded > self.n as u64 - 1 {
                            ctx.fault("forwarded more than n-1 full descriptors");
                            return;
                        }
                        self.out.push(parent, Payload::new(TAG_FULL, [w, a, b, 0]));
                    }
                }
            }
        }
        // terminate once Q is empty and every child has terminated
        if !self.sent_terminate
            && !self.is_root()
            && self.queue.is_empty()
            && self.watermark.values().all(|&w| w == u64::MAX)
        {
            let parent = self.spt_out.as_ref().unwrap().parent_port.unwrap();
            self.out.push(parent, Payload::new(TAG_TERM, [0; 4]));
            self.sent_terminate = true;
            self.stage = Stage::Broadcast;
        }
        if self.is_root()
            && self.queue.is_empty()
            && self.watermark.values().all(|&w| w == u64::MAX)
        {
            self.finish_root(ctx);
        }
    }

    fn finish_root(&mut self, ctx: &mut Ctx<'_>) {
        ctx.set_phase("broadcast");
        if self.mst.len() != self.n - 1 {
            ctx.fault(format!(
                "root computed {} MST edges, expected {}",
                self.mst.len(),
                self.n - 1
            ));
            return;
        }
        self.stage = Stage::Broadcast;
        let children = self.spt_out.as_ref().unwrap().children.clone();
        let mst = self.mst.clone();
        for (w, a, b) in mst {
            self.try_mark(w);
            for &c in &children {
                self.out.push(c, Payload::new(TAG_BCAST, [w, a, b, 0]));
            }
        }
        for &c in &children {
            self.out.push(c, Payload::new(TAG_BEND, [0; 4]));
        }
        self.got_end = true;
        self.stage = Stage::Done;
    }

    fn try_mark(&mut self, w: u64) {
        if let Some(p) = self.weights.iter().position(|&x| x == w) {
            self.marked.insert(p);
        }
    }

    fn insert_descriptor(&mut self, ctx: &mut Ctx<'_>, w: u64, entry: Entry) {
        match self.queue.remove(&w) {
            None => {
                self.queue.insert(w, entry);
            }
            Some(Entry::Half { owner: o1, owner_port: _ }) => match entry {
                Entry::Half { owner: o2, .. } => {
                    self.queue
                        .insert(w, Entry::Full { a: o1.min(o2), b: o1.max(o2) });
                }
                Entry::Full { .. } => {
                    ctx.fault(format!("weight {w}: full met a pending half"));
                }
            },
            Some(Entry::Full { .. }) => {
                ctx.fault(format!("weight {w}: duplicate full descriptor"));
            }
        }
    }
}

impl Automaton for PipelineNode {
    type Output = PipelineOutput;

    fn step(&mut self, ctx: &mut Ctx<'_>, inbox: &[Delivery]) -> Wake {
        // the SPT core keeps absorbing its stage's traffic (late joins over
        // very slow edges arrive long after the tree settled)
        let spt_tags = inbox
            .iter()
            .filter(|d| d.payload.tag < TAG_HALF)
            .cloned()
            .collect::<Vec<_>>();
        let mut wake = if self.stage == Stage::Spt || !spt_tags.is_empty() {
            self.spt.step_phase(ctx, &spt_tags)
        } else {
            None
        };

        if self.stage == Stage::Spt {
            if let Some(o) = self.spt.outcome() {
                self.spt_out = Some(o.clone());
                let r0 = o.r0;
                if ctx.round() >= r0 {
                    self.begin_upcast(ctx);
                } else {
                    wake = merge_wake(wake, Some(r0));
                }
            }
        }

        let mut touched = false;
        for d in inbox {
            match d.payload.tag {
                TAG_HALF => {
                    let [w, owner, owner_port, _] = d.payload.f;
                    self.watermark.insert(d.port, w);
                    self.insert_descriptor(ctx, w, Entry::Half { owner, owner_port });
                    touched = true;
                }
                TAG_FULL => {
                    let [w, a, b, _] = d.payload.f;
                    self.watermark.insert(d.port, w);
                    self.insert_descriptor(ctx, w, Entry::Full { a, b });
                    touched = true;
                }
                TAG_TERM => {
                    self.watermark.insert(d.port, u64::MAX);
                    touched = true;
                }
                TAG_BCAST => {
                    let [w, a, b, _] = d.payload.f;
                    self.try_mark(w);
                    let children = self.spt_out.as_ref().unwrap().children.clone();
                    for c in children {
                        self.out.push(c, Payload::new(TAG_BCAST, [w, a, b, 0]));
                    }
                }
                TAG_BEND => {
                    let children = self.spt_out.as_ref().unwrap().children.clone();
                    for c in children {
                        self.out.push(c, Payload::new(TAG_BEND, [0; 4]));
                    }
                    self.got_end = true;
                    self.stage = Stage::Done;
                }
                _ => {}
            }
        }
        if touched {
            self.drain_safe(ctx);
        }
        wake = merge_wake(wake, self.out.pump(ctx));
        match wake {
            Some(r) => Wake::At(r),
            None => Wake::OnDelivery,
        }
    }

    fn finished(&self) -> bool {
        self.stage == Stage::Done && self.out.is_empty() && self.got_end && self.spt.quiescent()
    }

    fn output(&self) -> PipelineOutput {
        PipelineOutput {
            activated: self.spt.activated,
            mst_ports: self.marked.clone(),
            sent_terminate: self.sent_terminate,
            root_mst: self.is_root().then(|| self.mst.clone()),
            root_seen: self.is_root().then(|| self.root_seen.clone()),
        }
    }
}

pub struct PipelineProtocol;

impl Protocol for PipelineProtocol {
    type Node = PipelineNode;
    fn build(&self, info: NodeInfo, mut rng: ChaCha8Rng) -> PipelineNode {
        let spt = SptCore::new(&info, &mut rng);
        PipelineNode {
            id: info.id,
            n: info.n,
            weights: info.ports.iter().map(|p| p.weight).collect(),
            spt,
            spt_out: None,
            stage: Stage::Spt,
            queue: BTreeMap::new(),
            watermark: BTreeMap::new(),
            uf: DsuMap::default(),
            fulls_forwarded: 0,
            sent_terminate: false,
            out: OutQueue::default(),
            mst: Vec::new(),
            root_seen: Vec::new(),
            got_end: false,
            marked: BTreeSet::new(),
            drops: 0,
        }
    }
    fn id_fields(tag: u16) -> &'static [usize] {
        id_fields(tag)
    }
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub root: NodeId,
    pub mst_ports: Vec<BTreeSet<PortId>>,
    pub metrics: RunMetrics,
    pub attempts: u32,
    pub root_mst: Vec<(u64, u64, u64)>,
    pub root_seen: Vec<u64>,
    pub terminates: u64,
    /// weights dropped by some filter step, from the analysis events
    pub dropped_weights: Vec<u64>,
}

/// Elect a leader, build the SPT, stream all edges up, broadcast the MST.
pub fn run_pipeline(
    graph: &WeightedGraph,
    seed: u64,
    opts: &SimOptions,
) -> Result<PipelineRun, EngineError> {
    for attempt in 0..64 {
        let s = attempt_seed(seed, attempt);
        let mut sim: Sim<PipelineProtocol> = Sim::new(graph, &PipelineProtocol, s, opts);
        if graph.n > 1 && !sim.nodes.iter().any(|nd| nd.spt.activated) {
            continue;
        }
        let metrics = sim.run()?;
        let dropped_weights = sim
            .events()
            .iter()
            .filter(|e| e.label == "pl_drop")
            .map(|e| e.data[0])
            .collect();
        let outs = sim.outputs();
        let root = outs
            .iter()
            .position(|o| o.root_mst.is_some())
            .expect("pipeline finished without a root");
        return Ok(PipelineRun {
            root,
            mst_ports: outs.iter().map(|o| o.mst_ports.clone()).collect(),
            metrics,
            attempts: attempt,
            root_mst: outs[root].root_mst.clone().unwrap(),
            root_seen: outs[root].root_seen.clone().unwrap(),
            terminates: outs.iter().filter(|o| o.sent_terminate).count() as u64,
            dropped_weights,
        });
    }
    Err(EngineError::ProtocolFault { node: 0, reason: "no activation in 64 redraws".into() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gen::{gen_lb1, gen_random, RandomFamily};
    use crate::graph::{oracle_mst, Edge, WeightedGraph};
    use crate::harness::ports_to_edge_set;

    fn check_run(g: &WeightedGraph, seed: u64) -> PipelineRun {
        let run = run_pipeline(g, seed, &SimOptions::default()).unwrap();
        let expected: BTreeSet<usize> = oracle_mst(g).into_iter().collect();
        let got = ports_to_edge_set(g, &run.mst_ports).expect("inconsistent port marks");
        assert_eq!(got, expected, "seed {seed}");
        // no MST weight is ever dropped by a filter step
        let mst_weights: BTreeSet<u64> = expected.iter().map(|&e| g.edges[e].weight).collect();
        for w in &run.dropped_weights {
            assert!(!mst_weights.contains(w), "dropped MST edge weight {w}");
        }
        // every descriptor set reaching the root contains the MST
        let seen: BTreeSet<u64> = run.root_seen.iter().copied().collect();
        for w in &mst_weights {
            assert!(seen.contains(w));
        }
        assert_eq!(run.terminates, g.n as u64 - 1);
        assert_eq!(run.metrics.soundness, Default::default());
        run
    }

    #[test]
    fn star_graph_trivial_mst() {
        // tree input: every edge is the MST
        let g = WeightedGraph::new(
            5,
            1,
            vec![
                Edge { u: 0, v: 1, weight: 10, latency: 2 },
                Edge { u: 0, v: 2, weight: 20, latency: 1 },
                Edge { u: 0, v: 3, weight: 30, latency: 5 },
                Edge { u: 0, v: 4, weight: 40, latency: 3 },
            ],
        );
        let run = check_run(&g, 1);
        assert_eq!(run.root_mst.len(), 4);
    }

    #[test]
    fn triangle_filters_heaviest() {
        let g = WeightedGraph::new(
            3,
            1,
            vec![
                Edge { u: 0, v: 1, weight: 10, latency: 7 },
                Edge { u: 1, v: 2, weight: 20, latency: 1 },
                Edge { u: 0, v: 2, weight: 30, latency: 4 },
            ],
        );
        let run = check_run(&g, 2);
        let w: Vec<u64> = run.root_mst.iter().map(|e| e.0).collect();
        assert_eq!(w, vec![10, 20]);
    }

    #[test]
    fn random_instances_match_oracle() {
        for seed in 0..10 {
            let g = gen_random(RandomFamily::Arbitrary, 16, 2, None, 300 + seed).unwrap();
            check_run(&g, seed);
        }
        for seed in 0..4 {
            let g = gen_random(RandomFamily::Arbitrary, 48, 4, None, 400 + seed).unwrap();
            check_run(&g, seed);
        }
    }

    #[test]
    fn lb1_middle_edges_join_mst_without_carrying_traffic() {
        for seed in 0..5 {
            let inst = gen_lb1(8, 1, 500 + seed).unwrap();
            let run = check_run(&inst.graph, seed);
            // all middle edges are in the computed MST
            let got = ports_to_edge_set(&inst.graph, &run.mst_ports).unwrap();
            for &me in &inst.middle_edges {
                assert!(got.contains(&me));
            }
        }
    }

    #[test]
    fn two_node_graph() {
        let g = WeightedGraph::new(2, 2, vec![Edge { u: 0, v: 1, weight: 9, latency: 4 }]);
        let run = check_run(&g, 0);
        assert_eq!(run.root_mst.len(), 1);
    }

    #[test]
    fn determinism() {
        let g = gen_random(RandomFamily::Arbitrary, 24, 2, None, 9).unwrap();
        let a = run_pipeline(&g, 5, &SimOptions::default()).unwrap();
        let b = run_pipeline(&g, 5, &SimOptions::default()).unwrap();
        assert_eq!(a.mst_ports, b.mst_ports);
        assert_eq!(a.metrics.messages, b.metrics.messages);
        assert_eq!(a.metrics.rounds, b.metrics.rounds);
    }

    use std::collections::BTreeSet;
}
