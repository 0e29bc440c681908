//! Shared two-stage MST machinery for the equal-weights and uniform-latency
//! protocols: controlled local fragment growth (merges limited by a maximal
//! matching on the fragment graph) followed by global aggregation in which
//! per-component minimum outgoing edges are pipelined up the elected tree and
//! the root merges components centrally.
//!
//! All per-phase durations are deterministic functions of (iteration, n,
//! cap_inv, the diameter estimate, and the pass parameters), so every node
//! computes the same phase calendar locally and no synchronization messages
//! are needed. Boundary handlers assert that the communication scheduled for
//! a slot actually finished inside it; an undersized slot is a loud engine
//! fault rather than silent corruption.
//!
//! Matching mechanism: mutual proposals over a shared minimum outgoing edge
//! match immediately; the remaining proposal pseudo-forest is 3-colored by
//! iterated id-bit reduction simulated between fragment leaders over the MOE
//! edges, and the colors claim matches in three sweeps. Unmatched fragments
//! then join their MOE target, whose matched status bounds merge trees to
//! stars around one matched edge.

use crate::graph::{mst_total_weight, EdgeId, NodeId, WeightedGraph};
use crate::sim::{
    merge_wake, Automaton, Ctx, Delivery, EngineError, NodeInfo, OutQueue, Payload, PortId,
    Protocol, Round, RunMetrics, Sim, SimOptions, Wake,
};
use crate::spt::{attempt_seed, spt_id_fields, SptCore, SptOutcome};
use crate::util::{ceil_log2, isqrt_ceil};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};

// message tags (SPT owns 1..=7)
pub const TAG_ANN: u16 = 20;
pub const TAG_TEST: u16 = 21;
pub const TAG_TESTR: u16 = 22;
pub const TAG_CONV: u16 = 23;
pub const TAG_CONVN: u16 = 24;
pub const TAG_SEL: u16 = 25;
pub const TAG_PROP: u16 = 26;
pub const TAG_PROPF: u16 = 27;
pub const TAG_MUT: u16 = 28;
pub const TAG_COLOR: u16 = 29;
pub const TAG_CLAIM: u16 = 30;
pub const TAG_ACC: u16 = 31;
pub const TAG_ADOPT: u16 = 33;
pub const TAG_L5: u16 = 34;
pub const TAG_L5J: u16 = 35;
pub const TAG_L5A: u16 = 36;
pub const TAG_WUP: u16 = 37;
pub const TAG_BC: u16 = 38;
pub const TAG_DEC: u16 = 39;
pub const TAG_GTEST: u16 = 40;
pub const TAG_GTESTR: u16 = 41;
pub const TAG_GCONV: u16 = 42;
pub const TAG_GCONVN: u16 = 43;
pub const TAG_SUP: u16 = 44;
pub const TAG_SUPEND: u16 = 45;
pub const TAG_DM: u16 = 46;
pub const TAG_DE: u16 = 47;
pub const TAG_DEND: u16 = 48;

pub fn agg_id_fields(tag: u16) -> &'static [usize] {
    match tag {
        TAG_TEST | TAG_TESTR | TAG_PROP | TAG_PROPF | TAG_MUT | TAG_CLAIM | TAG_ADOPT
        | TAG_L5J | TAG_L5A | TAG_GTEST | TAG_GTESTR => &[0],
        TAG_ACC | TAG_DM => &[0, 1],
        TAG_GCONV => &[1],
        TAG_SUP => &[0, 2],
        _ => spt_id_fields(tag),
    }
}

/// Which protocol instantiates the machinery.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// weights equal latencies; fragment growth gated by tree weight
    Equal,
    /// uniform latency; growth gated by fragment hop diameter
    Uniform { ell: u64 },
}

impl Mode {
    fn brd(&self) -> u64 {
        match self {
            Mode::Equal => 6,
            Mode::Uniform { .. } => 5,
        }
    }
    /// latency of `g` gate units
    fn lat(&self, g: u64) -> u64 {
        match self {
            Mode::Equal => g,
            Mode::Uniform { ell } => g * ell,
        }
    }
    /// worst edge-crossing latency during an iteration with gate g
    fn cross(&self, g: u64) -> u64 {
        match self {
            Mode::Equal => g,
            Mode::Uniform { ell } => *ell,
        }
    }
}

/// Color-reduction rounds needed to bring ids below six colors.
pub fn reduce_rounds(n: usize) -> u32 {
    let mut maxc = (n.max(2) - 1) as u64;
    let mut r = 0;
    while maxc > 5 {
        let bits = 64 - maxc.leading_zeros() as u64;
        maxc = 2 * (bits - 1) + 1;
        r += 1;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalRegime {
    /// gates rise to the square-root balance target
    Sqrt,
    /// gates rise to the diameter estimate
    Diameter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    IterStart(u32),
    TestStart(u32),
    ConvUp(u32),
    ConvDn(u32),
    Slot0(u32),
    ColorSlot(u32, u32),
    SweepClaim(u32, u32),
    SweepReply(u32, u32),
    E1(u32),
    E2(u32),
    E3(u32),
    CountStart,
    DecideStart,
    GIterStart(u32),
    GConv(u32),
    GStream(u32),
    GDown(u32),
    GIterEnd(u32),
    AllDone,
}

#[derive(Debug, Clone)]
pub struct Plan {
    pub steps: Vec<(Round, Action)>,
    pub gates: Vec<u64>,
    pub end: Round,
    pub w_guess: u64,
    pub regime: LocalRegime,
}

#[derive(Debug, Clone, Copy)]
pub struct Params {
    pub n: usize,
    pub cap_inv: u64,
    pub d_est: u64,
    pub mode: Mode,
}

impl Params {
    fn pad(&self) -> u64 {
        self.cap_inv + 1
    }

    fn count_len(&self) -> u64 {
        self.d_est + 8 * self.pad()
    }

    /// Gate schedule min(2^i, target) for i = 0..=ceil(log2 target). Capping
    /// the final gate keeps the calendar smooth in the target instead of
    /// jumping with the power of two.
    pub fn gates_for_target(target: u64) -> Vec<u64> {
        let target = target.max(1);
        let top = ceil_log2(target);
        (0..=top).map(|i| (1u64 << i).min(target)).collect()
    }

    /// Calendar for one local aggregation pass.
    pub fn local_plan(&self, start: Round, w_guess: u64, regime: LocalRegime, gates: Vec<u64>) -> Plan {
        let p = self.pad();
        let rr = reduce_rounds(self.n);
        let n_color = rr + 6;
        let cong = 8 * self.cap_inv;
        let mut steps = Vec::new();
        let mut t = start;
        let mut cum = 0u64; // sum of gates before the current iteration
        for (i, &g) in gates.iter().enumerate() {
            let i = i as u32;
            let ds = self.mode.brd() * self.mode.lat(cum) + 1;
            let ds_next = self.mode.brd() * self.mode.lat(cum + g) + 1;
            let x = self.mode.cross(g);
            steps.push((t, Action::IterStart(i)));
            t += ds + p;
            steps.push((t, Action::TestStart(i)));
            t += 2 * x + p;
            steps.push((t, Action::ConvUp(i)));
            t += ds + p;
            steps.push((t, Action::ConvDn(i)));
            t += ds + p;
            steps.push((t, Action::Slot0(i)));
            t += x + ds + p;
            for k in 0..n_color {
                steps.push((t, Action::ColorSlot(i, k)));
                t += 2 * ds + x + 2 * p;
            }
            for c in 0..3u32 {
                steps.push((t, Action::SweepClaim(i, c)));
                t += ds + x + ds + cong + 2 * p;
                steps.push((t, Action::SweepReply(i, c)));
                t += ds + x + ds + cong + 2 * p;
            }
            steps.push((t, Action::E1(i)));
            t += ds + x + p;
            steps.push((t, Action::E2(i)));
            t += ds + 2 * x + ds + 2 * p;
            steps.push((t, Action::E3(i)));
            t += ds_next + p;
            cum += g;
        }
        steps.push((t, Action::CountStart));
        t += self.count_len();
        steps.push((t, Action::DecideStart));
        t += self.count_len();
        Plan { steps, gates, end: t, w_guess, regime }
    }

    /// Calendar for the global aggregation pass over b base fragments.
    pub fn global_plan(&self, start: Round, b: u64, base_diam: u64) -> Plan {
        let p = self.pad();
        let iters = ceil_log2(b.max(1));
        let mut steps = Vec::new();
        let mut t = start;
        let test_trip = match self.mode {
            Mode::Equal => 2 * self.d_est,
            Mode::Uniform { ell } => 2 * ell,
        };
        for it in 0..iters {
            steps.push((t, Action::GIterStart(it)));
            t += test_trip + p;
            steps.push((t, Action::GConv(it)));
            t += base_diam + 1 + p;
            steps.push((t, Action::GStream(it)));
            t += self.d_est + 2 * (b + 4) * self.cap_inv + 4 * p;
            steps.push((t, Action::GDown(it)));
            t += self.d_est + 2 * (2 * b + 4) * self.cap_inv + 4 * p;
            steps.push((t, Action::GIterEnd(it)));
            t += p;
        }
        steps.push((t, Action::AllDone));
        Plan {
            steps,
            gates: Vec::new(),
            end: t,
            w_guess: 0,
            regime: LocalRegime::Sqrt,
        }
    }
}

/// Where a fragment's best candidate came from, for routing the selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Source {
    Own(PortId),
    Child(PortId),
}

#[derive(Debug, Clone, Default)]
struct IterState {
    small: bool,
    gate: u64,
    /// best (weight, port) among this node's outgoing test replies
    candidate: Option<(u64, PortId)>,
    conv_expected: BTreeSet<PortId>,
    conv_best: Option<(u64, Source)>,
    conv_done: bool,
    is_owner: bool,
    moe_port: Option<PortId>,
    // fragment leader matching state
    has_out: bool,
    matched: bool,
    mutual: bool,
    color: u64,
    prev_color: u64,
    parent_color: BTreeMap<u32, u64>,
    proposals_in: bool,
    crumb_ports: BTreeSet<PortId>,
    crumb: BTreeMap<u64, PortId>,
    propf_sent: bool,
    claim_best_fwd: Option<u64>,
    claims: BTreeSet<u64>,
    /// (port to cross, adopted id), applied at E1
    pending_adopt: Option<(PortId, u64)>,
    pending_child: Vec<PortId>,
    wup_expected: BTreeSet<PortId>,
    wup_acc: (u64, u64, u64, u64),
    wup_sent: bool,
}

#[derive(Debug, Clone, Default)]
struct GlobalIterState {
    candidate: Option<(u64, u64)>, // (weight, other component)
    gconv_expected: BTreeSet<PortId>,
    gconv_best: Option<(u64, u64)>,
    gconv_done: bool,
    /// pending stream entries / root ledger, keyed by component id
    buf: BTreeMap<u64, (u64, u64)>,
    watermark: BTreeMap<PortId, u64>,
    stream_started: bool,
    sent_end: bool,
    got_dend: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Spt,
    Running,
    Done,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AggOutput {
    pub activated: bool,
    pub mst_ports: BTreeSet<PortId>,
    pub frag_id: u64,
    pub comp_id: u64,
    pub w_star: Option<u64>,
    pub base_count: Option<u64>,
}

pub struct AggNode {
    id: NodeId,
    n: usize,
    cap_inv: u64,
    mode: Mode,
    weights: Vec<u64>,
    /// harness-provided cap: a guess beyond this means the success test broke
    w_cap: u64,
    spt: SptCore,
    spt_out: Option<SptOutcome>,
    stage: Stage,
    params: Option<Params>,
    plan: Option<Plan>,
    cursor: usize,
    // fragment state
    frag_id: u64,
    frag_parent: Option<PortId>,
    frag_children: BTreeSet<PortId>,
    frag_weight: u64,
    frag_hop_diam: u64,
    known_internal: Vec<bool>,
    mst_ports: BTreeSet<PortId>,
    it: IterState,
    // count / decide
    bc_expected: BTreeSet<PortId>,
    bc_acc: u64,
    bc_sent: bool,
    base_count: Option<u64>,
    w_star: Option<u64>,
    local_regime: Option<LocalRegime>,
    // global stage
    comp_id: u64,
    g: GlobalIterState,
    alive_comps: u64,
    out: OutQueue,
    /// node 0 keeps the phase calendar dump
    pub calendar_lines: Vec<String>,
}

impl AggNode {
    fn is_frag_leader(&self) -> bool {
        self.frag_parent.is_none()
    }

    fn is_spt_root(&self) -> bool {
        self.spt_out.as_ref().map(|o| o.parent_port.is_none()).unwrap_or(false)
    }

    fn spt_children(&self) -> BTreeSet<PortId> {
        self.spt_out.as_ref().map(|o| o.children.clone()).unwrap_or_default()
    }

    fn spt_parent(&self) -> Option<PortId> {
        self.spt_out.as_ref().and_then(|o| o.parent_port)
    }

    /// smallness per mode: tree weight for equal, hop diameter for uniform
    fn frag_small(&self, gate: u64) -> bool {
        match self.mode {
            Mode::Equal => self.frag_weight <= gate,
            Mode::Uniform { .. } => self.frag_hop_diam <= gate,
        }
    }

    fn eligible(&self, port: PortId, gate: u64) -> bool {
        if self.known_internal[port] {
            return false;
        }
        match self.mode {
            Mode::Equal => self.weights[port] <= gate,
            Mode::Uniform { .. } => true,
        }
    }

    fn g_eligible(&self, port: PortId) -> bool {
        if self.known_internal[port] {
            return false;
        }
        match self.mode {
            Mode::Equal => self.weights[port] <= self.params.unwrap().d_est,
            Mode::Uniform { .. } => true,
        }
    }

    fn start_pass(&mut self, plan: Plan) {
        if self.id == 0 && !plan.gates.is_empty() {
            for (r0, a) in &plan.steps {
                if let Action::IterStart(it) = a {
                    let find = |pred: &dyn Fn(&Action) -> bool| {
                        plan.steps.iter().find(|(_, x)| pred(x)).map(|(r, _)| *r)
                    };
                    let pd = find(&|x| matches!(x, Action::Slot0(j) if j == it)).unwrap_or(*r0);
                    let e1 = find(&|x| matches!(x, Action::E1(j) if j == it)).unwrap_or(pd);
                    let end = find(&|x| matches!(x, Action::IterStart(j) if *j == it + 1))
                        .or_else(|| find(&|x| matches!(x, Action::CountStart)))
                        .unwrap_or(plan.end);
                    self.calendar_lines.push(format!(
                        "iteration {it}: moe_search [{r0},{pd}), matching [{pd},{e1}), merge [{e1},{end})"
                    ));
                }
            }
        }
        self.plan = Some(plan);
        self.cursor = 0;
    }

    /// fresh local pass: back to singleton fragments; MST port marks persist
    /// (merges always pick genuine MST edges, whatever the guess)
    fn reset_fragments(&mut self) {
        self.frag_id = self.id as u64;
        self.frag_parent = None;
        self.frag_children.clear();
        self.frag_weight = 0;
        self.frag_hop_diam = 0;
        for k in self.known_internal.iter_mut() {
            *k = false;
        }
    }

    fn fragment_flood(&mut self, payload: Payload, except: Option<PortId>) {
        let ports: Vec<PortId> = self
            .frag_children
            .iter()
            .copied()
            .chain(self.frag_parent)
            .collect();
        for p in ports {
            if Some(p) != except {
                self.out.push(p, payload);
            }
        }
    }

    // ---- calendar boundary actions ----

    fn act(&mut self, ctx: &mut Ctx<'_>, action: Action) {
        match action {
            Action::IterStart(i) => self.iter_start(ctx, i),
            Action::TestStart(_) => self.test_start(),
            Action::ConvUp(_) => self.conv_up_start(),
            Action::ConvDn(_) => self.conv_dn_start(ctx),
            Action::Slot0(_) => self.slot0(),
            Action::ColorSlot(_, k) => self.color_slot(ctx, k),
            Action::SweepClaim(_, c) => self.sweep_claim(ctx, c),
            Action::SweepReply(_, c) => self.sweep_reply(c),
            Action::E1(_) => self.e1(),
            Action::E2(_) => self.e2(ctx),
            Action::E3(_) => self.e3(),
            Action::CountStart => self.count_start(ctx),
            Action::DecideStart => self.decide_start(ctx),
            Action::GIterStart(t) => self.g_iter_start(ctx, t),
            Action::GConv(t) => self.g_conv(ctx, t),
            Action::GStream(t) => self.g_stream(ctx, t),
            Action::GDown(t) => self.g_down(ctx, t),
            Action::GIterEnd(t) => self.g_iter_end(ctx, t),
            Action::AllDone => {
                self.stage = Stage::Done;
            }
        }
    }

    fn iter_start(&mut self, ctx: &mut Ctx<'_>, i: u32) {
        ctx.set_phase("local");
        let gate = self.plan.as_ref().unwrap().gates[i as usize];
        if self.id == 0 {
            ctx.emit("li_start", [i as u64, gate, 0]);
        }
        self.it = IterState {
            gate,
            color: self.frag_id,
            ..Default::default()
        };
        if self.is_frag_leader() && self.frag_small(gate) {
            self.it.small = true;
            let msg = Payload::new(TAG_ANN, [i as u64, 0, 0, 0]);
            self.fragment_flood(msg, None);
        }
    }

    fn test_start(&mut self) {
        if !self.it.small {
            return;
        }
        let gate = self.it.gate;
        for p in 0..self.weights.len() {
            if self.eligible(p, gate) {
                self.out.push(p, Payload::new(TAG_TEST, [self.frag_id, 0, 0, 0]));
            }
        }
    }

    fn conv_up_start(&mut self) {
        if !self.it.small {
            return;
        }
        self.it.conv_expected = self.frag_children.clone();
        if let Some((w, p)) = self.it.candidate {
            self.it.conv_best = Some((w, Source::Own(p)));
        }
        self.try_send_conv();
    }

    fn try_send_conv(&mut self) {
        if self.it.conv_done || !self.it.small || !self.it.conv_expected.is_empty() {
            return;
        }
        self.it.conv_done = true;
        if let Some(parent) = self.frag_parent {
            let msg = match self.it.conv_best {
                Some((w, _)) => Payload::new(TAG_CONV, [w, 0, 0, 0]),
                None => Payload::new(TAG_CONVN, [0; 4]),
            };
            self.out.push(parent, msg);
        } else {
            self.it.has_out = self.it.conv_best.is_some();
        }
    }

    fn conv_dn_start(&mut self, ctx: &mut Ctx<'_>) {
        if !self.it.small || !self.is_frag_leader() {
            return;
        }
        if !self.it.conv_done {
            ctx.fault("fragment convergecast missed its slot");
            return;
        }
        if self.it.has_out {
            self.forward_sel(ctx);
        }
    }

    fn forward_sel(&mut self, ctx: &mut Ctx<'_>) {
        match self.it.conv_best {
            Some((_, Source::Own(p))) => {
                self.it.is_owner = true;
                self.it.moe_port = Some(p);
            }
            Some((_, Source::Child(c))) => {
                self.out.push(c, Payload::new(TAG_SEL, [0; 4]));
            }
            None => ctx.fault("selection requested without a candidate"),
        }
    }

    fn slot0(&mut self) {
        if self.it.is_owner {
            let p = self.it.moe_port.unwrap();
            self.out.push(p, Payload::new(TAG_PROP, [self.frag_id, 0, 0, 0]));
        }
    }

    fn cv_step(my: u64, parent: u64) -> u64 {
        let diff = my ^ parent;
        let k = diff.trailing_zeros() as u64;
        2 * k + ((my >> k) & 1)
    }

    /// Finish the color transition whose parent colors were disseminated in
    /// `slot`. Fragments without a live outgoing proposal act as roots.
    fn apply_color_update(&mut self, ctx: &mut Ctx<'_>, slot: u32) {
        if !self.is_frag_leader() {
            return;
        }
        let rr = reduce_rounds(self.n);
        let acts_as_root = !self.it.has_out || self.it.mutual;
        let parent = self.it.parent_color.get(&slot).copied();
        if slot < rr {
            if acts_as_root {
                let virt = if self.it.color == 0 { 1 } else { 0 };
                self.it.color = Self::cv_step(self.it.color, virt);
            } else {
                match parent {
                    Some(pc) => self.it.color = Self::cv_step(self.it.color, pc),
                    None => ctx.fault("missing parent color in a reduce slot"),
                }
            }
            return;
        }
        let e = slot - rr;
        if e % 2 == 0 {
            // shift down: children inherit our old color, we take the parent's
            self.it.prev_color = self.it.color;
            if acts_as_root {
                self.it.color = (self.it.color + 1) % 3;
            } else {
                match parent {
                    Some(pc) => self.it.color = pc,
                    None => ctx.fault("missing parent color in a shift slot"),
                }
            }
        } else {
            let target = 5 - e as u64 / 2;
            if self.it.color == target {
                let mut excl = BTreeSet::new();
                excl.insert(self.it.prev_color);
                if let Some(pc) = parent {
                    excl.insert(pc);
                }
                self.it.color = (0..3).find(|c| !excl.contains(c)).unwrap();
            }
        }
    }

    fn color_slot(&mut self, ctx: &mut Ctx<'_>, k: u32) {
        if k > 0 {
            self.apply_color_update(ctx, k - 1);
        }
        if self.is_frag_leader() && self.it.proposals_in {
            let msg = Payload::new(TAG_COLOR, [self.it.color, k as u64, 0, 0]);
            for p in self.it.crumb_ports.clone() {
                self.out.push(p, msg);
            }
        }
    }

    fn sweep_claim(&mut self, ctx: &mut Ctx<'_>, c: u32) {
        if c == 0 {
            let rr = reduce_rounds(self.n);
            self.apply_color_update(ctx, rr + 5);
            if self.is_frag_leader() && self.it.proposals_in && self.it.color > 2 {
                ctx.fault("color reduction left a color above 2");
            }
        }
        self.it.claim_best_fwd = None;
        if self.is_frag_leader()
            && self.it.has_out
            && !self.it.matched
            && !self.it.mutual
            && self.it.color == c as u64
        {
            self.route_claim_down(self.frag_id, c);
        }
    }

    /// Route a claim toward this fragment's selected MOE owner and across.
    fn route_claim_down(&mut self, from_frag: u64, sweep: u32) {
        let msg = Payload::new(TAG_CLAIM, [from_frag, sweep as u64, 0, 0]);
        if self.it.is_owner {
            self.out.push(self.it.moe_port.unwrap(), msg);
        } else if let Some((_, Source::Child(child))) = self.it.conv_best {
            self.out.push(child, msg);
        }
    }

    fn sweep_reply(&mut self, _c: u32) {
        if self.is_frag_leader() && !self.it.matched && !self.it.mutual {
            if let Some(&winner) = self.it.claims.iter().next() {
                self.it.matched = true;
                if let Some(&p) = self.it.crumb.get(&winner) {
                    self.out
                        .push(p, Payload::new(TAG_ACC, [winner, self.frag_id, 0, 0]));
                }
            }
        }
        self.it.claims.clear();
    }

    fn e1(&mut self) {
        for p in std::mem::take(&mut self.it.pending_child) {
            self.frag_children.insert(p);
        }
        if let Some((port, new_id)) = self.it.pending_adopt.take() {
            self.adopt_fragment(port, new_id);
        }
    }

    /// Re-root this node's fragment under `port` with the merged id and tell
    /// the rest of the old fragment to do the same.
    fn adopt_fragment(&mut self, port: PortId, new_id: u64) {
        let old_ports: Vec<PortId> = self
            .frag_children
            .iter()
            .copied()
            .chain(self.frag_parent)
            .filter(|&p| p != port)
            .collect();
        self.frag_id = new_id;
        self.frag_parent = Some(port);
        self.frag_children = old_ports.iter().copied().collect();
        let msg = Payload::new(TAG_ADOPT, [new_id, 0, 0, 0]);
        for p in old_ports {
            self.out.push(p, msg);
        }
    }

    fn e2(&mut self, ctx: &mut Ctx<'_>) {
        // line 5: an unmatched fragment with a candidate joins its MOE target
        if self.is_frag_leader() && self.it.has_out && !self.it.matched && !self.it.mutual {
            if self.it.is_owner {
                self.send_l5j();
            } else if let Some((_, Source::Child(child))) = self.it.conv_best {
                self.out.push(child, Payload::new(TAG_L5, [0; 4]));
            } else {
                ctx.fault("line-5 join without a selection path");
            }
        }
    }

    fn send_l5j(&mut self) {
        let p = self.it.moe_port.unwrap();
        self.out.push(p, Payload::new(TAG_L5J, [self.frag_id, 0, 0, 0]));
        self.mst_ports.insert(p);
    }

    fn e3(&mut self) {
        self.it.wup_expected = self.frag_children.clone();
        self.it.wup_acc = (0, 0, 0, 1); // weight, height, diam, size
        self.it.wup_sent = false;
        self.try_send_wup();
    }

    fn try_send_wup(&mut self) {
        if self.it.wup_sent || !self.it.wup_expected.is_empty() {
            return;
        }
        self.it.wup_sent = true;
        let (w, h, d, s) = self.it.wup_acc;
        if let Some(parent) = self.frag_parent {
            self.out.push(parent, Payload::new(TAG_WUP, [w, h, d, s]));
        } else {
            self.frag_weight = w;
            self.frag_hop_diam = d;
        }
    }

    fn fold_wup(&mut self, port: PortId, f: [u64; 4]) {
        let (aw, ah, ad, asz) = self.it.wup_acc;
        let (cw, ch, cd, cs) = (f[0], f[1], f[2], f[3]);
        let reach = ch + 1;
        let new_d = ad.max(cd).max(ah + reach);
        self.it.wup_acc = (aw + cw + self.weights[port], ah.max(reach), new_d, asz + cs);
    }

    fn count_start(&mut self, ctx: &mut Ctx<'_>) {
        ctx.set_phase("count");
        if self.id == 0 {
            ctx.emit("local_done", [0, 0, 0]);
        }
        self.bc_expected = self.spt_children();
        self.bc_acc = u64::from(self.is_frag_leader());
        self.bc_sent = false;
        self.base_count = None;
        self.try_send_bc();
    }

    fn try_send_bc(&mut self) {
        if self.bc_sent || !self.bc_expected.is_empty() {
            return;
        }
        self.bc_sent = true;
        if let Some(p) = self.spt_parent() {
            self.out.push(p, Payload::new(TAG_BC, [self.bc_acc, 0, 0, 0]));
        } else {
            self.base_count = Some(self.bc_acc);
        }
    }

    fn decide_start(&mut self, ctx: &mut Ctx<'_>) {
        if !self.is_spt_root() {
            return;
        }
        let Some(b) = self.base_count else {
            ctx.fault("base fragment count missed the count slot");
            return;
        };
        let params = self.params.unwrap();
        let plan = self.plan.as_ref().unwrap();
        let (kind, a1, a2) = match self.mode {
            Mode::Uniform { .. } => (0u64, b, 0u64),
            Mode::Equal => {
                let d = params.d_est.max(1) as u128;
                let w_bnd = (d * d).div_ceil(self.cap_inv as u128); // regime boundary
                match plan.regime {
                    LocalRegime::Diameter => {
                        // every diameter-regime guess shares this pass, so the
                        // smallest successful one is found right here
                        let need = (b as u128 * d).div_ceil(2);
                        let w_star = 1u128 << ceil_log2(need.min(u64::MAX as u128) as u64);
                        if w_star < w_bnd {
                            (0, b, w_star as u64)
                        } else {
                            let w_next = 1u64 << ceil_log2(w_bnd.min(u64::MAX as u128) as u64);
                            (1, w_next.max(1), 0)
                        }
                    }
                    LocalRegime::Sqrt => {
                        let wg = plan.w_guess;
                        if (b as u128) * (b as u128) * (self.cap_inv as u128) <= 4 * wg as u128 {
                            (0, b, wg)
                        } else {
                            let w_next = wg.saturating_mul(2);
                            if w_next > self.w_cap {
                                ctx.fault("guess exceeded total weight; success test broken");
                                return;
                            }
                            (1, w_next, 0)
                        }
                    }
                }
            }
        };
        ctx.emit("decide", [kind, a1, a2]);
        let msg = Payload::new(TAG_DEC, [kind, a1, a2, 0]);
        for c in self.spt_children() {
            self.out.push(c, msg);
        }
        self.apply_decision(ctx, kind, a1, a2);
    }

    fn apply_decision(&mut self, _ctx: &mut Ctx<'_>, kind: u64, a1: u64, a2: u64) {
        let params = self.params.unwrap();
        let end = self.plan.as_ref().unwrap().end;
        if kind == 0 {
            let b = a1;
            if a2 > 0 {
                self.w_star = Some(a2);
            }
            self.alive_comps = b;
            self.comp_id = self.frag_id;
            if b <= 1 {
                let plan = Plan {
                    steps: vec![(end, Action::AllDone)],
                    gates: Vec::new(),
                    end,
                    w_guess: 0,
                    regime: LocalRegime::Sqrt,
                };
                self.start_pass(plan);
            } else {
                let cum: u64 = self.plan.as_ref().unwrap().gates.iter().sum();
                let base_diam = self.mode.brd() * self.mode.lat(cum);
                let plan = params.global_plan(end, b, base_diam);
                self.start_pass(plan);
            }
        } else {
            // next guess, fresh fragments
            let w_guess = a1;
            let target = isqrt_ceil(w_guess.saturating_mul(self.cap_inv));
            let gates = Params::gates_for_target(target);
            self.reset_fragments();
            self.local_regime = Some(LocalRegime::Sqrt);
            let plan = params.local_plan(end, w_guess, LocalRegime::Sqrt, gates);
            self.start_pass(plan);
        }
    }

    // ---- global stage ----

    fn g_iter_start(&mut self, ctx: &mut Ctx<'_>, t: u32) {
        ctx.set_phase("global");
        if self.id == 0 {
            ctx.emit("gi_pre", [t as u64, 0, 0]);
        }
        self.g = GlobalIterState::default();
        for p in 0..self.weights.len() {
            if self.g_eligible(p) {
                self.out.push(p, Payload::new(TAG_GTEST, [self.comp_id, 0, 0, 0]));
            }
        }
    }

    fn g_conv(&mut self, _ctx: &mut Ctx<'_>, _t: u32) {
        self.g.gconv_expected = self.frag_children.clone();
        self.g.gconv_best = self.g.candidate;
        self.try_send_gconv();
    }

    fn try_send_gconv(&mut self) {
        if self.g.gconv_done || !self.g.gconv_expected.is_empty() {
            return;
        }
        self.g.gconv_done = true;
        if let Some(parent) = self.frag_parent {
            let msg = match self.g.gconv_best {
                Some((w, other)) => Payload::new(TAG_GCONV, [w, other, 0, 0]),
                None => Payload::new(TAG_GCONVN, [0; 4]),
            };
            self.out.push(parent, msg);
        }
    }

    fn g_stream(&mut self, ctx: &mut Ctx<'_>, _t: u32) {
        if self.is_frag_leader() {
            if !self.g.gconv_done {
                ctx.fault("base fragment convergecast missed its slot");
                return;
            }
            if let Some((w, other)) = self.g.gconv_best {
                let e = self.g.buf.entry(self.comp_id).or_insert((w, other));
                if w < e.0 {
                    *e = (w, other);
                }
            }
        }
        self.g.stream_started = true;
        for c in self.spt_children() {
            self.g.watermark.insert(c, 0);
        }
        self.g_drain();
    }

    fn g_drain(&mut self) {
        if !self.g.stream_started || self.g.sent_end {
            return;
        }
        let limit = self.g.watermark.values().copied().min().unwrap_or(u64::MAX);
        match self.spt_parent() {
            None => {
                // the root's buffer is the ledger; just watch for stream end
                if limit == u64::MAX {
                    self.g.sent_end = true;
                }
            }
            Some(parent) => {
                loop {
                    let Some((&comp, &(w, other))) = self.g.buf.iter().next() else { break };
                    if comp >= limit {
                        break;
                    }
                    self.g.buf.remove(&comp);
                    self.out.push(parent, Payload::new(TAG_SUP, [comp, w, other, 0]));
                }
                if limit == u64::MAX && self.g.buf.is_empty() {
                    self.g.sent_end = true;
                    self.out.push(parent, Payload::new(TAG_SUPEND, [0; 4]));
                }
            }
        }
    }

    fn g_down(&mut self, ctx: &mut Ctx<'_>, _t: u32) {
        if !self.is_spt_root() {
            return;
        }
        if !self.g.sent_end {
            ctx.fault("root stream still open at the downcast slot");
            return;
        }
        let ledger: Vec<(u64, (u64, u64))> = std::mem::take(&mut self.g.buf).into_iter().collect();
        fn find(dsu: &mut BTreeMap<u64, u64>, x: u64) -> u64 {
            let p = *dsu.entry(x).or_insert(x);
            if p == x {
                return x;
            }
            let r = find(dsu, p);
            dsu.insert(x, r);
            r
        }
        let mut dsu: BTreeMap<u64, u64> = BTreeMap::new();
        let mut selected: BTreeSet<u64> = BTreeSet::new();
        let mut members: BTreeSet<u64> = BTreeSet::new();
        for (comp, (w, other)) in &ledger {
            members.insert(*comp);
            members.insert(*other);
            let (ra, rb) = (find(&mut dsu, *comp), find(&mut dsu, *other));
            if ra != rb {
                dsu.insert(ra.max(rb), ra.min(rb));
                self.alive_comps -= 1;
            }
            // a component's minimum outgoing edge is an MST edge regardless
            // of whether the union was already transitive
            selected.insert(*w);
        }
        let mut group_max: BTreeMap<u64, u64> = BTreeMap::new();
        for &m in &members {
            let r = find(&mut dsu, m);
            let e = group_max.entry(r).or_insert(m);
            *e = (*e).max(m);
        }
        let mut pairs: Vec<(u64, u64)> = Vec::new();
        for &m in &members {
            let new = group_max[&find(&mut dsu, m)];
            if new != m {
                pairs.push((m, new));
            }
        }
        let children = self.spt_children();
        for &(old, new) in &pairs {
            for &c in &children {
                self.out.push(c, Payload::new(TAG_DM, [old, new, 0, 0]));
            }
        }
        for &w in &selected {
            for &c in &children {
                self.out.push(c, Payload::new(TAG_DE, [w, 0, 0, 0]));
            }
        }
        for &c in &children {
            self.out.push(c, Payload::new(TAG_DEND, [0; 4]));
        }
        for &(old, new) in &pairs {
            if self.comp_id == old {
                self.comp_id = new;
            }
        }
        for &w in &selected {
            self.try_mark_weight(w);
        }
        self.g.got_dend = true;
    }

    fn try_mark_weight(&mut self, w: u64) {
        if let Some(p) = self.weights.iter().position(|&x| x == w) {
            self.mst_ports.insert(p);
        }
    }

    fn g_iter_end(&mut self, ctx: &mut Ctx<'_>, t: u32) {
        if !self.g.got_dend {
            ctx.fault("downcast did not finish inside its slot");
            return;
        }
        if self.id == 0 {
            ctx.emit("gi_post", [t as u64, 0, 0]);
        }
        if self.is_spt_root() {
            let next_is_iter = matches!(
                self.plan.as_ref().unwrap().steps.get(self.cursor),
                Some((_, Action::GIterStart(_)))
            );
            if !next_is_iter && self.alive_comps != 1 {
                ctx.fault(format!(
                    "{} components alive after the final global iteration",
                    self.alive_comps
                ));
            }
        }
    }

    // ---- reactive message handling ----

    fn on_delivery(&mut self, ctx: &mut Ctx<'_>, d: &Delivery) {
        let f = d.payload.f;
        match d.payload.tag {
            TAG_ANN => {
                self.it.small = true;
                self.fragment_flood(d.payload, Some(d.port));
            }
            TAG_TEST => {
                self.out
                    .push(d.port, Payload::new(TAG_TESTR, [self.frag_id, 0, 0, 0]));
            }
            TAG_TESTR => {
                if f[0] == self.frag_id {
                    self.known_internal[d.port] = true;
                } else {
                    let w = self.weights[d.port];
                    if self.it.candidate.map_or(true, |(bw, _)| w < bw) {
                        self.it.candidate = Some((w, d.port));
                    }
                }
            }
            TAG_CONV | TAG_CONVN => {
                if self.it.conv_expected.remove(&d.port) {
                    if d.payload.tag == TAG_CONV
                        && self.it.conv_best.map_or(true, |(bw, _)| f[0] < bw)
                    {
                        self.it.conv_best = Some((f[0], Source::Child(d.port)));
                    }
                    self.try_send_conv();
                }
            }
            TAG_SEL => self.forward_sel(ctx),
            TAG_PROP => {
                let from = f[0];
                if self.it.is_owner && self.it.moe_port == Some(d.port) {
                    // mutual proposal over the shared MOE edge: matched
                    self.mst_ports.insert(d.port);
                    if self.frag_id < from {
                        self.it.pending_adopt = Some((d.port, from));
                    } else {
                        self.it.pending_child.push(d.port);
                    }
                    if self.is_frag_leader() {
                        self.it.mutual = true;
                        self.it.matched = true;
                    } else {
                        let parent = self.frag_parent.unwrap();
                        self.out.push(parent, Payload::new(TAG_MUT, [from, 0, 0, 0]));
                    }
                } else {
                    self.it.crumb_ports.insert(d.port);
                    self.it.crumb.insert(from, d.port);
                    self.forward_propf(from);
                }
            }
            TAG_PROPF => {
                self.it.crumb_ports.insert(d.port);
                self.it.crumb.insert(f[0], d.port);
                self.forward_propf(f[0]);
            }
            TAG_MUT => {
                if self.is_frag_leader() {
                    self.it.mutual = true;
                    self.it.matched = true;
                } else {
                    let parent = self.frag_parent.unwrap();
                    self.out.push(parent, d.payload);
                }
            }
            TAG_COLOR => {
                if self.is_frag_leader() {
                    self.it.parent_color.insert(f[1] as u32, f[0]);
                } else if Some(d.port) == self.frag_parent {
                    // traveling away from our leader: flood down the crumbs
                    for p in self.it.crumb_ports.clone() {
                        if p != d.port {
                            self.out.push(p, d.payload);
                        }
                    }
                } else {
                    // crossed the MOE edge or coming from below: head to our leader
                    if let Some(p) = self.frag_parent {
                        self.out.push(p, d.payload);
                    }
                }
            }
            TAG_CLAIM => {
                let from = f[0];
                if from == self.frag_id {
                    // proposer side: keep routing toward the owner and across
                    self.route_claim_down(from, f[1] as u32);
                } else if self.is_frag_leader() {
                    self.it.claims.insert(from);
                } else {
                    // target side: min-combine on the way to the leader
                    if self.it.claim_best_fwd.map_or(true, |b| from < b) {
                        self.it.claim_best_fwd = Some(from);
                        if let Some(p) = self.frag_parent {
                            self.out.push(p, d.payload);
                        }
                    }
                }
            }
            TAG_ACC => {
                let to_frag = f[0];
                let partner = f[1];
                if self.frag_id == to_frag {
                    // proposer side: the crossing endpoint observes and the
                    // leader is informed so it will not line-5 join
                    if self.it.is_owner {
                        let p = self.it.moe_port.unwrap();
                        self.mst_ports.insert(p);
                        if self.frag_id < partner {
                            self.it.pending_adopt = Some((p, partner));
                        } else {
                            self.it.pending_child.push(p);
                        }
                    }
                    if self.is_frag_leader() {
                        self.it.matched = true;
                    } else if let Some(p) = self.frag_parent {
                        self.out.push(p, d.payload);
                    }
                } else if let Some(&p) = self.it.crumb.get(&to_frag) {
                    let is_cross =
                        Some(p) != self.frag_parent && !self.frag_children.contains(&p);
                    if is_cross {
                        // we are the target-side endpoint of the MOE edge
                        self.mst_ports.insert(p);
                        if self.frag_id < to_frag {
                            self.it.pending_adopt = Some((p, to_frag));
                        } else {
                            self.it.pending_child.push(p);
                        }
                    }
                    self.out.push(p, d.payload);
                }
            }
            TAG_ADOPT => {
                self.frag_children.remove(&d.port);
                self.adopt_fragment(d.port, f[0]);
            }
            TAG_L5 => {
                if self.it.is_owner {
                    self.send_l5j();
                } else if let Some((_, Source::Child(child))) = self.it.conv_best {
                    self.out.push(child, d.payload);
                }
            }
            TAG_L5J => {
                self.frag_children.insert(d.port);
                self.mst_ports.insert(d.port);
                self.out
                    .push(d.port, Payload::new(TAG_L5A, [self.frag_id, 0, 0, 0]));
            }
            TAG_L5A => {
                self.adopt_fragment(d.port, f[0]);
            }
            TAG_WUP => {
                if self.it.wup_expected.remove(&d.port) {
                    self.fold_wup(d.port, f);
                    self.try_send_wup();
                }
            }
            TAG_BC => {
                if self.bc_expected.remove(&d.port) {
                    self.bc_acc += f[0];
                    self.try_send_bc();
                }
            }
            TAG_DEC => {
                for c in self.spt_children() {
                    self.out.push(c, d.payload);
                }
                self.apply_decision(ctx, f[0], f[1], f[2]);
            }
            TAG_GTEST => {
                self.out
                    .push(d.port, Payload::new(TAG_GTESTR, [self.comp_id, 0, 0, 0]));
            }
            TAG_GTESTR => {
                if f[0] == self.comp_id {
                    self.known_internal[d.port] = true;
                } else {
                    let w = self.weights[d.port];
                    if self.g.candidate.map_or(true, |(bw, _)| w < bw) {
                        self.g.candidate = Some((w, f[0]));
                    }
                }
            }
            TAG_GCONV | TAG_GCONVN => {
                if self.g.gconv_expected.remove(&d.port) {
                    if d.payload.tag == TAG_GCONV
                        && self.g.gconv_best.map_or(true, |(bw, _)| f[0] < bw)
                    {
                        self.g.gconv_best = Some((f[0], f[1]));
                    }
                    self.try_send_gconv();
                }
            }
            TAG_SUP => {
                let [comp, w, other, _] = f;
                self.g.watermark.insert(d.port, comp);
                let e = self.g.buf.entry(comp).or_insert((w, other));
                if w < e.0 {
                    *e = (w, other);
                }
                self.g_drain();
            }
            TAG_SUPEND => {
                self.g.watermark.insert(d.port, u64::MAX);
                self.g_drain();
            }
            TAG_DM => {
                for c in self.spt_children() {
                    self.out.push(c, d.payload);
                }
                if self.comp_id == f[0] {
                    self.comp_id = f[1];
                }
            }
            TAG_DE => {
                for c in self.spt_children() {
                    self.out.push(c, d.payload);
                }
                self.try_mark_weight(f[0]);
            }
            TAG_DEND => {
                for c in self.spt_children() {
                    self.out.push(c, d.payload);
                }
                self.g.got_dend = true;
            }
            _ => {}
        }
    }

    fn forward_propf(&mut self, from: u64) {
        if self.is_frag_leader() {
            self.it.proposals_in = true;
        } else if !self.it.propf_sent {
            self.it.propf_sent = true;
            if let Some(p) = self.frag_parent {
                self.out.push(p, Payload::new(TAG_PROPF, [from, 0, 0, 0]));
            }
        }
    }

    /// analysis-side view for harness monitors
    pub fn fragment_view(&self) -> (u64, Option<PortId>, u64) {
        (self.frag_id, self.frag_parent, self.comp_id)
    }
    pub fn spt_activated(&self) -> bool {
        self.spt.activated
    }
}

impl Automaton for AggNode {
    type Output = AggOutput;

    fn step(&mut self, ctx: &mut Ctx<'_>, inbox: &[Delivery]) -> Wake {
        let spt_inbox: Vec<Delivery> = inbox
            .iter()
            .filter(|d| d.payload.tag < 10)
            .cloned()
            .collect();
        let mut wake = if self.stage == Stage::Spt || !spt_inbox.is_empty() {
            self.spt.step_phase(ctx, &spt_inbox)
        } else {
            None
        };

        if self.stage == Stage::Spt {
            if let Some(o) = self.spt.outcome() {
                self.spt_out = Some(o.clone());
                let params = Params {
                    n: self.n,
                    cap_inv: self.cap_inv,
                    d_est: o.d_est.max(1),
                    mode: self.mode,
                };
                self.params = Some(params);
                self.stage = Stage::Running;
                let (plan, regime) = first_plan(&params, o.r0);
                self.local_regime = Some(regime);
                self.start_pass(plan);
            }
        }

        for d in inbox {
            if d.payload.tag >= 10 {
                self.on_delivery(ctx, d);
            }
        }

        if self.stage == Stage::Running {
            loop {
                let Some(plan) = self.plan.as_ref() else { break };
                let Some(&(r, action)) = plan.steps.get(self.cursor) else { break };
                if r > ctx.round() {
                    wake = merge_wake(wake, Some(r));
                    break;
                }
                if r < ctx.round() {
                    ctx.fault(format!("missed calendar boundary at round {r}"));
                    break;
                }
                self.cursor += 1;
                self.act(ctx, action);
                if self.stage != Stage::Running {
                    break;
                }
            }
        }

        wake = merge_wake(wake, self.out.pump(ctx));
        match wake {
            Some(r) => Wake::At(r),
            None => Wake::OnDelivery,
        }
    }

    fn finished(&self) -> bool {
        self.stage == Stage::Done && self.out.is_empty() && self.spt.quiescent()
    }

    fn output(&self) -> AggOutput {
        AggOutput {
            activated: self.spt.activated,
            mst_ports: self.mst_ports.clone(),
            frag_id: self.frag_id,
            comp_id: self.comp_id,
            w_star: self.w_star,
            base_count: self.base_count,
        }
    }
}

/// First pass after the SPT. For equal weights this is the diameter-regime
/// pass: every guess below the regime boundary shares its iteration schedule,
/// so the root evaluates all their success tests on this single run and
/// doubling only re-executes for guesses in the square-root regime.
fn first_plan(params: &Params, r0: Round) -> (Plan, LocalRegime) {
    match params.mode {
        Mode::Equal => {
            let target = params.d_est.max(1);
            let gates = Params::gates_for_target(target);
            (
                params.local_plan(r0, 0, LocalRegime::Diameter, gates),
                LocalRegime::Diameter,
            )
        }
        Mode::Uniform { ell } => {
            let thresh = isqrt_ceil(params.n as u64 * ell * params.cap_inv);
            let (regime, target_hops) = if params.d_est <= thresh {
                (
                    LocalRegime::Sqrt,
                    isqrt_ceil((params.n as u64 * params.cap_inv).div_ceil(ell)),
                )
            } else {
                (LocalRegime::Diameter, params.d_est.div_ceil(ell))
            };
            let gates = Params::gates_for_target(target_hops.max(1));
            (params.local_plan(r0, 0, regime, gates), regime)
        }
    }
}

pub struct AggProtocol {
    pub mode: Mode,
    /// twice the total edge weight: a guess beyond it means a broken test
    pub w_cap: u64,
}

impl Protocol for AggProtocol {
    type Node = AggNode;
    fn build(&self, info: NodeInfo, mut rng: ChaCha8Rng) -> AggNode {
        let spt = SptCore::new(&info, &mut rng);
        AggNode {
            id: info.id,
            n: info.n,
            cap_inv: info.cap_inv,
            mode: self.mode,
            weights: info.ports.iter().map(|p| p.weight).collect(),
            w_cap: self.w_cap,
            spt,
            spt_out: None,
            stage: Stage::Spt,
            params: None,
            plan: None,
            cursor: 0,
            frag_id: info.id as u64,
            frag_parent: None,
            frag_children: BTreeSet::new(),
            frag_weight: 0,
            frag_hop_diam: 0,
            known_internal: vec![false; info.ports.len()],
            mst_ports: BTreeSet::new(),
            it: IterState::default(),
            bc_expected: BTreeSet::new(),
            bc_acc: 0,
            bc_sent: false,
            base_count: None,
            w_star: None,
            local_regime: None,
            comp_id: info.id as u64,
            g: GlobalIterState::default(),
            alive_comps: 0,
            out: OutQueue::default(),
            calendar_lines: Vec::new(),
        }
    }
    fn id_fields(tag: u16) -> &'static [usize] {
        agg_id_fields(tag)
    }
}

// ---- run wrapper with invariant monitoring ----

/// One violated runtime invariant, kept as data for the acceptance report.
#[derive(Debug, Clone, Default)]
pub struct InvariantReport {
    pub violations: Vec<String>,
    pub local_iterations: u64,
    pub global_iterations: u64,
}

#[derive(Debug, Clone)]
pub struct AggRun {
    pub mst_ports: Vec<BTreeSet<PortId>>,
    pub metrics: RunMetrics,
    pub attempts: u32,
    pub w_star: Option<u64>,
    pub base_count: u64,
    pub regime: LocalRegime,
    pub d_est: u64,
    pub report: InvariantReport,
    pub calendar_lines: Vec<String>,
}

struct Snapshot {
    frag_of: Vec<u64>,
    parent_port: Vec<Option<PortId>>,
}

struct Monitor<'g> {
    graph: &'g WeightedGraph,
    mode: Mode,
    port_edges: Vec<Vec<EdgeId>>,
    w_true: u64,
    report: InvariantReport,
    prev: Option<(u64, Snapshot)>, // (gate, partition) of the previous iteration
    comps_before: Option<usize>,
}

struct FragmentView {
    /// fragment id -> member nodes
    members: BTreeMap<u64, Vec<NodeId>>,
    /// fragment id -> tree edge ids
    tree_edges: BTreeMap<u64, Vec<EdgeId>>,
}

impl<'g> Monitor<'g> {
    fn new(graph: &'g WeightedGraph, mode: Mode) -> Self {
        Monitor {
            graph,
            mode,
            port_edges: crate::harness::port_edges(graph),
            w_true: mst_total_weight(graph),
            report: InvariantReport::default(),
            prev: None,
            comps_before: None,
        }
    }

    fn snapshot(&self, nodes: &[AggNode]) -> Snapshot {
        Snapshot {
            frag_of: nodes.iter().map(|n| n.fragment_view().0).collect(),
            parent_port: nodes.iter().map(|n| n.fragment_view().1).collect(),
        }
    }

    fn view(&self, s: &Snapshot) -> FragmentView {
        let mut members: BTreeMap<u64, Vec<NodeId>> = BTreeMap::new();
        let mut tree_edges: BTreeMap<u64, Vec<EdgeId>> = BTreeMap::new();
        for v in 0..self.graph.n {
            members.entry(s.frag_of[v]).or_default().push(v);
            if let Some(p) = s.parent_port[v] {
                tree_edges
                    .entry(s.frag_of[v])
                    .or_default()
                    .push(self.port_edges[v][p]);
            }
        }
        FragmentView { members, tree_edges }
    }

    /// weighted tree diameter of a fragment (latency units)
    fn frag_diam(&self, nodes: &[NodeId], edges: &[EdgeId]) -> u64 {
        if nodes.len() <= 1 {
            return 0;
        }
        let mut adj: BTreeMap<NodeId, Vec<(NodeId, u64)>> = BTreeMap::new();
        for &ei in edges {
            let e = &self.graph.edges[ei];
            adj.entry(e.u).or_default().push((e.v, e.latency));
            adj.entry(e.v).or_default().push((e.u, e.latency));
        }
        let far = |s: NodeId| -> (NodeId, u64) {
            let mut best = (s, 0);
            let mut seen = BTreeSet::new();
            seen.insert(s);
            let mut stack = vec![(s, 0u64)];
            while let Some((u, d)) = stack.pop() {
                if d > best.1 {
                    best = (u, d);
                }
                for &(v, l) in adj.get(&u).into_iter().flatten() {
                    if seen.insert(v) {
                        stack.push((v, d + l));
                    }
                }
            }
            best
        };
        let (a, _) = far(nodes[0]);
        far(a).1
    }

    /// candidate MOE edges at a given gate: for every small fragment, its
    /// minimum-weight outgoing edge, if within the gate
    fn candidates(&self, view: &FragmentView, s: &Snapshot, gate: u64) -> Vec<EdgeId> {
        let mut out = Vec::new();
        for (fid, nodes) in &view.members {
            let small = match self.mode {
                Mode::Equal => {
                    let w: u64 = view.tree_edges.get(fid).map_or(0, |es| {
                        es.iter().map(|&e| self.graph.edges[e].weight).sum()
                    });
                    w <= gate
                }
                Mode::Uniform { ell } => {
                    let d = self.frag_diam(nodes, view.tree_edges.get(fid).map_or(&[][..], |v| v));
                    d <= gate * ell
                }
            };
            if !small {
                continue;
            }
            let mut best: Option<EdgeId> = None;
            for &v in nodes {
                for &ei in &self.port_edges[v] {
                    let e = &self.graph.edges[ei];
                    if s.frag_of[e.u] != s.frag_of[e.v]
                        && best.map_or(true, |b| e.weight < self.graph.edges[b].weight)
                    {
                        best = Some(ei);
                    }
                }
            }
            if let Some(b) = best {
                let within = match self.mode {
                    Mode::Equal => self.graph.edges[b].weight <= gate,
                    Mode::Uniform { .. } => true,
                };
                if within {
                    out.push(b);
                }
            }
        }
        out
    }

    fn on_iter_start(&mut self, nodes: &[AggNode], iter: u64, gate: u64) {
        self.report.local_iterations += 1;
        let snap = self.snapshot(nodes);
        let view = self.view(&snap);
        let i = iter as u32;
        if i >= 1 {
            // diameter and count bounds from the growth lemmas
            for (fid, members) in &view.members {
                let edges = view.tree_edges.get(fid).map_or(&[][..], |v| v);
                let diam = self.frag_diam(members, edges);
                let bound = match self.mode {
                    Mode::Equal => 6 * (1u64 << i.min(62)),
                    Mode::Uniform { ell } => 5 * (1u64 << i.min(62)) * ell,
                };
                if diam > bound {
                    self.report.violations.push(format!(
                        "iter {i}: fragment {fid} diameter {diam} > {bound}"
                    ));
                }
                if let Mode::Uniform { .. } = self.mode {
                    if (members.len() as u64) < (1u64 << i.min(62)) {
                        self.report.violations.push(format!(
                            "iter {i}: fragment {fid} size {} < 2^{i}",
                            members.len()
                        ));
                    }
                }
            }
            if matches!(self.mode, Mode::Equal) {
                let count = view.members.len() as u64;
                let bound = 2 * self.w_true / (1u64 << i.min(62)).max(1);
                if count > bound.max(1) {
                    self.report.violations.push(format!(
                        "iter {i}: {count} fragments > 2W/2^i = {bound}"
                    ));
                }
            }
        }
        self.check_merge_guarantee(&snap, &view);
        self.prev = Some((gate, snap));
    }

    /// every fragment adjacent to a candidate in the previous iteration must
    /// have merged by the time the next boundary is reached
    fn check_merge_guarantee(&mut self, snap: &Snapshot, view: &FragmentView) {
        if let Some((prev_gate, prev)) = self.prev.take() {
            let prev_view = self.view(&prev);
            for ei in self.candidates(&prev_view, &prev, prev_gate) {
                let e = &self.graph.edges[ei];
                for end in [e.u, e.v] {
                    let old_frag = prev.frag_of[end];
                    let old_size = prev_view.members[&old_frag].len();
                    let new_size = view.members[&snap.frag_of[end]].len();
                    if new_size <= old_size {
                        self.report.violations.push(format!(
                            "fragment {old_frag} had a candidate (edge {ei}) but did not merge"
                        ));
                    }
                }
            }
        }
    }

    fn on_local_done(&mut self, nodes: &[AggNode]) {
        let snap = self.snapshot(nodes);
        let view = self.view(&snap);
        self.check_merge_guarantee(&snap, &view);
    }

    fn on_global_pre(&mut self, nodes: &[AggNode]) {
        let comps: BTreeSet<u64> = nodes.iter().map(|n| n.fragment_view().2).collect();
        self.comps_before = Some(comps.len());
    }

    fn on_global_post(&mut self, nodes: &[AggNode], t: u64) {
        self.report.global_iterations += 1;
        let comps: BTreeSet<u64> = nodes.iter().map(|n| n.fragment_view().2).collect();
        if let Some(before) = self.comps_before.take() {
            let after = comps.len();
            if after > before.div_ceil(2) {
                self.report.violations.push(format!(
                    "global iter {t}: components {before} -> {after}, halving missed"
                ));
            }
        }
    }
}

/// Run the two-stage protocol and verify the growth invariants as it goes.
pub fn run_agg(
    graph: &WeightedGraph,
    mode: Mode,
    seed: u64,
    opts: &SimOptions,
) -> Result<AggRun, EngineError> {
    if graph.n == 1 {
        return Ok(AggRun {
            mst_ports: vec![BTreeSet::new()],
            metrics: RunMetrics::default(),
            attempts: 0,
            w_star: None,
            base_count: 1,
            regime: LocalRegime::Sqrt,
            d_est: 0,
            report: InvariantReport::default(),
            calendar_lines: Vec::new(),
        });
    }
    let w_cap = 2 * graph.edges.iter().map(|e| e.weight).sum::<u64>();
    let protocol = AggProtocol { mode, w_cap };
    for attempt in 0..64 {
        let s = attempt_seed(seed, attempt);
        let mut sim: Sim<AggProtocol> = Sim::new(graph, &protocol, s, opts);
        if !sim.nodes.iter().any(|nd| nd.spt_activated()) {
            continue;
        }
        let mut monitor = Monitor::new(graph, mode);
        let metrics = sim.run_with(|events, nodes| {
            for ev in events {
                match ev.label {
                    "li_start" => monitor.on_iter_start(nodes, ev.data[0], ev.data[1]),
                    "local_done" => monitor.on_local_done(nodes),
                    "gi_pre" => monitor.on_global_pre(nodes),
                    "gi_post" => monitor.on_global_post(nodes, ev.data[0]),
                    _ => {}
                }
            }
        })?;
        let outs = sim.outputs();
        let base_count = outs
            .iter()
            .find_map(|o| o.base_count)
            .expect("run finished without a counted root");
        return Ok(AggRun {
            mst_ports: outs.iter().map(|o| o.mst_ports.clone()).collect(),
            metrics,
            attempts: attempt,
            w_star: outs.iter().find_map(|o| o.w_star),
            base_count,
            regime: sim.nodes[0].local_regime.unwrap_or(LocalRegime::Sqrt),
            d_est: sim.nodes[0]
                .spt_out
                .as_ref()
                .map(|o| o.d_est)
                .unwrap_or(0),
            report: monitor.report,
            calendar_lines: sim.nodes[0].calendar_lines.clone(),
        });
    }
    Err(EngineError::ProtocolFault { node: 0, reason: "no activation in 64 redraws".into() })
}
