//! Graph representation, validation, and the sequential oracles (MST,
//! shortest paths, diameters) that every protocol run is checked against.
//!
//! All weights and latencies are positive integers. Weights are required to
//! be pairwise distinct so the MST is unique; the generators guarantee this
//! by scaling base weights and adding a per-edge offset.

use std::collections::BinaryHeap;
use std::fmt;
use std::path::Path;

/// Node index in `0..n`.
pub type NodeId = usize;
/// Index into `WeightedGraph::edges`.
pub type EdgeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub u: NodeId,
    pub v: NodeId,
    pub weight: u64,
    pub latency: u64,
}

impl Edge {
    pub fn other(&self, x: NodeId) -> NodeId {
        if x == self.u {
            self.v
        } else {
            self.u
        }
    }
}

/// Immutable undirected graph with per-edge weight and latency and a global
/// capacity of one message per `cap_inv` rounds per directed edge.
#[derive(Debug, Clone)]
pub struct WeightedGraph {
    pub n: usize,
    pub cap_inv: u64,
    pub edges: Vec<Edge>,
}

/// One failed validation rule, kept as data rather than an error type so the
/// CLI can report all of them at once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation(pub String);

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl WeightedGraph {
    pub fn new(n: usize, cap_inv: u64, edges: Vec<Edge>) -> Self {
        Self { n, cap_inv, edges }
    }

    pub fn m(&self) -> usize {
        self.edges.len()
    }

    /// Per-node incident edge ids.
    pub fn adjacency(&self) -> Vec<Vec<EdgeId>> {
        let mut adj = vec![Vec::new(); self.n];
        for (i, e) in self.edges.iter().enumerate() {
            adj[e.u].push(i);
            adj[e.v].push(i);
        }
        adj
    }

    /// Checks every structural invariant. Violations are returned as data;
    /// weights or latencies above n^6 only produce a warning (they blow the
    /// O(log n)-bit message budget but are not illegal).
    pub fn validate(&self) -> ValidationReport {
        let mut rep = ValidationReport::default();
        let mut violations: Vec<Violation> = Vec::new();

        if self.n == 0 {
            violations.push(Violation("graph has no nodes".into()));
            rep.violations = violations;
            return rep;
        }
        if self.cap_inv == 0 {
            violations.push(Violation("cap_inv must be positive".into()));
            rep.violations = violations;
            return rep;
        }

        let mut seen_pairs = std::collections::BTreeSet::new();
        let mut seen_weights = std::collections::BTreeMap::new();
        for (i, e) in self.edges.iter().enumerate() {
            if e.u >= e.v {
                violations.push(Violation(format!(
                    "edge {i}: endpoints must satisfy u < v (got {} {})",
                    e.u, e.v
                )));
            }
            if e.v >= self.n {
                violations.push(Violation(format!(
                    "edge {i}: node id {} out of range (n={})",
                    e.v, self.n
                )));
                continue;
            }
            if e.weight == 0 {
                violations.push(Violation(format!("edge {i}: weight must be positive")));
            }
            if e.latency == 0 {
                violations.push(Violation(format!("edge {i}: latency must be positive")));
            }
            if e.latency < self.cap_inv {
                violations.push(Violation(format!(
                    "edge {i}: latency {} < cap_inv {}",
                    e.latency, self.cap_inv
                )));
            }
            if !seen_pairs.insert((e.u, e.v)) {
                violations.push(Violation(format!("edge {i}: parallel edge ({}, {})", e.u, e.v)));
            }
            if let Some(j) = seen_weights.insert(e.weight, i) {
                violations.push(Violation(format!(
                    "edges {j} and {i}: duplicate weight {}",
                    e.weight
                )));
            }
        }
        if violations.is_empty() && !self.connected() {
            violations.push(Violation("graph is not connected".into()));
        }
        rep.violations = violations;

        let cap = (self.n as u128).pow(6);
        for (i, e) in self.edges.iter().enumerate() {
            if e.weight as u128 > cap || e.latency as u128 > cap {
                rep.warnings.push(format!(
                    "edge {i}: weight/latency exceeds n^6 = {cap}; message fields may outgrow the log-n budget"
                ));
            }
        }
        rep
    }

    fn connected(&self) -> bool {
        if self.n == 0 {
            return false;
        }
        let adj = self.adjacency();
        let mut seen = vec![false; self.n];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut cnt = 1;
        while let Some(u) = stack.pop() {
            for &ei in &adj[u] {
                let w = self.edges[ei].other(u);
                if !seen[w] {
                    seen[w] = true;
                    cnt += 1;
                    stack.push(w);
                }
            }
        }
        cnt == self.n
    }
}

/// Ground-truth facts about a graph, computed sequentially.
#[derive(Debug, Clone)]
pub struct GraphStats {
    /// Latency diameter: max over pairs of latency-shortest-path distance.
    pub latency_diameter: u64,
    /// Hop diameter: max over pairs counting each edge as one hop.
    pub hop_diameter: u64,
    /// Total weight of the unique MST.
    pub mst_weight: u64,
    /// Edge ids of the unique MST, sorted.
    pub mst_edges: Vec<EdgeId>,
}

pub fn stats(g: &WeightedGraph) -> GraphStats {
    let mst_edges = oracle_mst(g);
    let mst_weight = mst_edges.iter().map(|&e| g.edges[e].weight).sum();
    GraphStats {
        latency_diameter: latency_diameter(g),
        hop_diameter: hop_diameter(g),
        mst_weight,
        mst_edges,
    }
}

struct Dsu {
    parent: Vec<usize>,
}

impl Dsu {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }
    fn find(&mut self, x: usize) -> usize {
        if self.parent[x] != x {
            let r = self.find(self.parent[x]);
            self.parent[x] = r;
        }
        self.parent[x]
    }
    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.parent[ra.max(rb)] = ra.min(rb);
        true
    }
}

/// Kruskal's algorithm. With distinct weights the result is the unique MST.
pub fn oracle_mst(g: &WeightedGraph) -> Vec<EdgeId> {
    let mut order: Vec<EdgeId> = (0..g.edges.len()).collect();
    order.sort_by_key(|&i| g.edges[i].weight);
    let mut dsu = Dsu::new(g.n);
    let mut mst = Vec::with_capacity(g.n.saturating_sub(1));
    for ei in order {
        let e = &g.edges[ei];
        if dsu.union(e.u, e.v) {
            mst.push(ei);
        }
    }
    mst.sort_unstable();
    mst
}

pub fn mst_total_weight(g: &WeightedGraph) -> u64 {
    oracle_mst(g).iter().map(|&e| g.edges[e].weight).sum()
}

/// Single-source latency-shortest-path tree (Dijkstra). Ties between equal
/// distances are broken toward the smaller parent id, then the smaller edge
/// id, so the tree is deterministic.
#[derive(Debug, Clone)]
pub struct SptOracle {
    pub root: NodeId,
    pub dist: Vec<u64>,
    pub parent: Vec<Option<NodeId>>,
    pub parent_edge: Vec<Option<EdgeId>>,
}

pub fn shortest_path_tree_from(g: &WeightedGraph, root: NodeId) -> SptOracle {
    let adj = g.adjacency();
    let mut dist = vec![u64::MAX; g.n];
    let mut parent = vec![None; g.n];
    let mut parent_edge = vec![None; g.n];
    dist[root] = 0;
    let mut heap = BinaryHeap::new();
    heap.push(std::cmp::Reverse((0u64, root)));
    while let Some(std::cmp::Reverse((d, u))) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        for &ei in &adj[u] {
            let e = &g.edges[ei];
            let v = e.other(u);
            let nd = d + e.latency;
            let better = nd < dist[v]
                || (nd == dist[v]
                    && match parent[v] {
                        Some(p) => (u, ei) < (p, parent_edge[v].unwrap()),
                        None => false,
                    });
            if better {
                dist[v] = nd;
                parent[v] = Some(u);
                parent_edge[v] = Some(ei);
                heap.push(std::cmp::Reverse((nd, v)));
            }
        }
    }
    SptOracle { root, dist, parent, parent_edge }
}

/// All-pairs latency diameter via n single-source runs. Fine at desk scale.
pub fn latency_diameter(g: &WeightedGraph) -> u64 {
    (0..g.n)
        .map(|s| {
            let spt = shortest_path_tree_from(g, s);
            spt.dist.into_iter().max().unwrap_or(0)
        })
        .max()
        .unwrap_or(0)
}

/// Hop eccentricity from one source (unit-latency BFS).
pub fn hop_distances_from(g: &WeightedGraph, root: NodeId) -> Vec<u64> {
    let adj = g.adjacency();
    let mut dist = vec![u64::MAX; g.n];
    dist[root] = 0;
    let mut queue = std::collections::VecDeque::new();
    queue.push_back(root);
    while let Some(u) = queue.pop_front() {
        for &ei in &adj[u] {
            let v = g.edges[ei].other(u);
            if dist[v] == u64::MAX {
                dist[v] = dist[u] + 1;
                queue.push_back(v);
            }
        }
    }
    dist
}

pub fn hop_diameter(g: &WeightedGraph) -> u64 {
    (0..g.n)
        .map(|s| hop_distances_from(g, s).into_iter().max().unwrap_or(0))
        .max()
        .unwrap_or(0)
}

/// Graph file format, line oriented:
/// ```text
/// wcg 1
/// <n> <m> <cap_inv>
/// <u> <v> <weight> <latency>   (m lines)
/// ```
/// Lines starting with `#` are comments and may appear anywhere.
pub fn write_graph(g: &WeightedGraph, comments: &[String]) -> String {
    let mut out = String::new();
    out.push_str("wcg 1\n");
    for c in comments {
        out.push_str(&format!("# {c}\n"));
    }
    out.push_str(&format!("{} {} {}\n", g.n, g.edges.len(), g.cap_inv));
    for e in &g.edges {
        out.push_str(&format!("{} {} {} {}\n", e.u, e.v, e.weight, e.latency));
    }
    out
}

#[derive(Debug, thiserror::Error)]
pub enum GraphReadError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad graph file: {0}")]
    Format(String),
}

pub fn parse_graph(text: &str) -> Result<WeightedGraph, GraphReadError> {
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'));
    let magic = lines
        .next()
        .ok_or_else(|| GraphReadError::Format("empty file".into()))?;
    if magic != "wcg 1" {
        return Err(GraphReadError::Format(format!(
            "expected magic 'wcg 1', got '{magic}'"
        )));
    }
    let header = lines
        .next()
        .ok_or_else(|| GraphReadError::Format("missing header line".into()))?;
    let mut it = header.split_whitespace();
    let mut next_num = |name: &str| -> Result<u64, GraphReadError> {
        it.next()
            .ok_or_else(|| GraphReadError::Format(format!("header missing {name}")))?
            .parse()
            .map_err(|_| GraphReadError::Format(format!("header: bad {name}")))
    };
    let n = next_num("n")? as usize;
    let m = next_num("m")? as usize;
    let cap_inv = next_num("cap_inv")?;
    let mut edges = Vec::with_capacity(m);
    for _ in 0..m {
        let line = lines
            .next()
            .ok_or_else(|| GraphReadError::Format("fewer edge lines than m".into()))?;
        let nums: Vec<u64> = line
            .split_whitespace()
            .map(|t| {
                t.parse()
                    .map_err(|_| GraphReadError::Format(format!("bad edge line '{line}'")))
            })
            .collect::<Result<_, _>>()?;
        if nums.len() != 4 {
            return Err(GraphReadError::Format(format!(
                "edge line must have 4 fields: '{line}'"
            )));
        }
        edges.push(Edge {
            u: nums[0] as usize,
            v: nums[1] as usize,
            weight: nums[2],
            latency: nums[3],
        });
    }
    if lines.next().is_some() {
        return Err(GraphReadError::Format("more edge lines than m".into()));
    }
    Ok(WeightedGraph::new(n, cap_inv, edges))
}

pub fn read_graph_file(path: &Path) -> Result<WeightedGraph, GraphReadError> {
    parse_graph(&std::fs::read_to_string(path)?)
}
