//! Network graphs: random geometric meshes, trees, and the induced subgraph
//! of devices able to serve a given application.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::io::{self, BufRead, Write};

use rand::Rng;
use thiserror::Error;

pub const DEFAULT_AREA_SIDE_M: f64 = 4000.0;
pub const DEFAULT_RANGE_M: f64 = 200.0;
pub const DEFAULT_MEAN_LINK_DELAY: f64 = 0.020;
pub const MESH_RETRY_BUDGET: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct DeviceId(pub u32);

impl DeviceId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "d{}", self.0)
    }
}

/// Low-resource devices never relay; high-resource devices forward traffic.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum DeviceClass {
    #[default]
    Lr,
    Hr,
}

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("topology needs at least one node")]
    Empty,
    #[error("tree arity must be 2 or 3, got {0}")]
    Arity(usize),
    #[error("mesh stayed disconnected after {attempts} layouts; largest component had {largest} of {n} nodes")]
    Disconnected { attempts: usize, largest: usize, n: usize },
    #[error("edge ({0}, {1}) references a missing node or is a self-loop")]
    BadEdge(u32, u32),
    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Node {
    pub x: f64,
    pub y: f64,
    pub class: DeviceClass,
}

/// Undirected device graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Topology {
    nodes: Vec<Node>,
    adj: Vec<Vec<DeviceId>>,
    mean_link_delay: f64,
}

impl Topology {
    /// Builds a graph from an edge list, dropping duplicate edges.
    pub fn from_edges(nodes: Vec<Node>, edges: &[(u32, u32)], mean_link_delay: f64) -> Result<Self, TopologyError> {
        if nodes.is_empty() {
            return Err(TopologyError::Empty);
        }
        let n = nodes.len() as u32;
        let mut sets = vec![BTreeSet::new(); nodes.len()];
        for &(a, b) in edges {
            if a == b || a >= n || b >= n {
                return Err(TopologyError::BadEdge(a, b));
            }
            sets[a as usize].insert(DeviceId(b));
            sets[b as usize].insert(DeviceId(a));
        }
        let adj = sets.into_iter().map(|s| s.into_iter().collect()).collect();
        Ok(Topology { nodes, adj, mean_link_delay })
    }

    /// A path `0 - 1 - ... - n-1` laid out on a line.
    pub fn path(n: usize) -> Result<Self, TopologyError> {
        let nodes = (0..n).map(|i| Node { x: i as f64, y: 0.0, class: DeviceClass::Lr }).collect();
        let edges: Vec<(u32, u32)> = (1..n as u32).map(|i| (i - 1, i)).collect();
        Self::from_edges(nodes, &edges, DEFAULT_MEAN_LINK_DELAY)
    }

    /// Device 0 connected to `leaves` others.
    pub fn star(leaves: usize) -> Result<Self, TopologyError> {
        let nodes = (0..=leaves).map(|i| Node { x: i as f64, y: 0.0, class: DeviceClass::Lr }).collect();
        let edges: Vec<(u32, u32)> = (1..=leaves as u32).map(|i| (0, i)).collect();
        Self::from_edges(nodes, &edges, DEFAULT_MEAN_LINK_DELAY)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: DeviceId) -> &Node {
        &self.nodes[id.index()]
    }

    pub fn ids(&self) -> impl Iterator<Item = DeviceId> {
        (0..self.nodes.len() as u32).map(DeviceId)
    }

    pub fn neighbors(&self, id: DeviceId) -> &[DeviceId] {
        &self.adj[id.index()]
    }

    pub fn degree(&self, id: DeviceId) -> usize {
        self.adj[id.index()].len()
    }

    pub fn edge_count(&self) -> usize {
        self.adj.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn mean_degree(&self) -> f64 {
        2.0 * self.edge_count() as f64 / self.len() as f64
    }

    pub fn has_edge(&self, a: DeviceId, b: DeviceId) -> bool {
        self.adj[a.index()].binary_search(&b).is_ok()
    }

    pub fn edges(&self) -> impl Iterator<Item = (DeviceId, DeviceId)> + '_ {
        self.ids()
            .flat_map(move |a| self.neighbors(a).iter().filter(move |b| a < **b).map(move |&b| (a, b)))
    }

    pub fn mean_link_delay(&self) -> f64 {
        self.mean_link_delay
    }

    pub fn set_mean_link_delay(&mut self, d: f64) {
        self.mean_link_delay = d;
    }

    pub fn set_class(&mut self, id: DeviceId, class: DeviceClass) {
        self.nodes[id.index()].class = class;
    }

    /// Connected components, each sorted, largest first.
    pub fn components(&self) -> Vec<Vec<DeviceId>> {
        let mut seen = vec![false; self.len()];
        let mut out = Vec::new();
        for start in self.ids() {
            if seen[start.index()] {
                continue;
            }
            let mut comp = self.bfs_from(start, usize::MAX, &mut seen);
            comp.sort();
            out.push(comp);
        }
        out.sort_by_key(|c| std::cmp::Reverse(c.len()));
        out
    }

    pub fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.len()];
        self.bfs_from(DeviceId(0), usize::MAX, &mut seen).len() == self.len()
    }

    /// Breadth-first order from `start`, visiting at most `limit` nodes.
    pub fn bfs(&self, start: DeviceId, limit: usize) -> Vec<DeviceId> {
        let mut seen = vec![false; self.len()];
        self.bfs_from(start, limit, &mut seen)
    }

    fn bfs_from(&self, start: DeviceId, limit: usize, seen: &mut [bool]) -> Vec<DeviceId> {
        let mut order = Vec::new();
        let mut q = VecDeque::from([start]);
        seen[start.index()] = true;
        while let Some(v) = q.pop_front() {
            if order.len() == limit {
                break;
            }
            order.push(v);
            for &w in self.neighbors(v) {
                if !seen[w.index()] {
                    seen[w.index()] = true;
                    q.push_back(w);
                }
            }
        }
        order
    }

    /// Hop distances from `start`; `None` for unreachable nodes.
    pub fn hop_distances(&self, start: DeviceId) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.len()];
        dist[start.index()] = Some(0);
        let mut q = VecDeque::from([start]);
        while let Some(v) = q.pop_front() {
            let d = dist[v.index()].unwrap();
            for &w in self.neighbors(v) {
                if dist[w.index()].is_none() {
                    dist[w.index()] = Some(d + 1);
                    q.push_back(w);
                }
            }
        }
        dist
    }

    /// Writes the plain-text edge-list format read by [`Topology::read_from`].
    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "n {} mean_delay {}", self.len(), self.mean_link_delay)?;
        for (i, n) in self.nodes.iter().enumerate() {
            let k = match n.class {
                DeviceClass::Lr => "LR",
                DeviceClass::Hr => "HR",
            };
            writeln!(w, "node {i} {} {} {k}", n.x, n.y)?;
        }
        for (a, b) in self.edges() {
            writeln!(w, "edge {} {}", a.0, b.0)?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self, TopologyError> {
        let mut n = None;
        let mut delay = DEFAULT_MEAN_LINK_DELAY;
        let mut nodes: Vec<Option<Node>> = Vec::new();
        let mut edges = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let perr = |msg: &str| TopologyError::Parse { line: lineno + 1, msg: msg.to_string() };
            let f: Vec<&str> = line.split_whitespace().collect();
            match f.as_slice() {
                [] => {}
                ["n", count, "mean_delay", d] => {
                    let c: usize = count.parse().map_err(|_| perr("bad node count"))?;
                    delay = d.parse().map_err(|_| perr("bad delay"))?;
                    n = Some(c);
                    nodes = vec![None; c];
                }
                ["node", id, x, y, k] => {
                    let id: usize = id.parse().map_err(|_| perr("bad node id"))?;
                    let class = match *k {
                        "LR" => DeviceClass::Lr,
                        "HR" => DeviceClass::Hr,
                        _ => return Err(perr("class must be LR or HR")),
                    };
                    let node = Node {
                        x: x.parse().map_err(|_| perr("bad x"))?,
                        y: y.parse().map_err(|_| perr("bad y"))?,
                        class,
                    };
                    *nodes.get_mut(id).ok_or_else(|| perr("node id out of range"))? = Some(node);
                }
                ["edge", a, b] => {
                    edges.push((a.parse().map_err(|_| perr("bad edge"))?, b.parse().map_err(|_| perr("bad edge"))?));
                }
                _ => return Err(perr("unrecognized line")),
            }
        }
        if n.is_none() {
            return Err(TopologyError::Parse { line: 1, msg: "missing header".into() });
        }
        let nodes = nodes
            .into_iter()
            .enumerate()
            .map(|(i, n)| n.ok_or(TopologyError::Parse { line: 0, msg: format!("node {i} missing") }))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_edges(nodes, &edges, delay)
    }
}

/// Places `n` devices uniformly in a square and links pairs within radio
/// range. Resamples the whole layout until it is connected.
pub fn gen_mesh<R: Rng + ?Sized>(n: usize, side_m: f64, range_m: f64, rng: &mut R) -> Result<Topology, TopologyError> {
    if n == 0 {
        return Err(TopologyError::Empty);
    }
    let mut largest = 0;
    for _ in 0..MESH_RETRY_BUDGET {
        let t = mesh_layout(n, side_m, range_m, rng);
        let comps = t.components();
        if comps.len() == 1 {
            return Ok(t);
        }
        largest = largest.max(comps[0].len());
    }
    Err(TopologyError::Disconnected { attempts: MESH_RETRY_BUDGET, largest, n })
}

/// One random geometric layout, connected or not.
pub fn mesh_layout<R: Rng + ?Sized>(n: usize, side_m: f64, range_m: f64, rng: &mut R) -> Topology {
    let nodes: Vec<Node> = (0..n)
        .map(|_| Node { x: rng.gen::<f64>() * side_m, y: rng.gen::<f64>() * side_m, class: DeviceClass::Lr })
        .collect();
    // grid bucketing keeps this linear in n for sparse graphs
    // cells at least `range_m` wide, and no more of them than nodes
    let by_range = (side_m / range_m.max(1e-9)).floor().max(1.0) as usize;
    let cells = by_range.min((n as f64).sqrt().ceil() as usize).max(1);
    let cell = side_m / cells as f64;
    let key = |v: f64| ((v / cell) as usize).min(cells - 1);
    let mut grid: Vec<Vec<u32>> = vec![Vec::new(); cells * cells];
    for (i, p) in nodes.iter().enumerate() {
        grid[key(p.y) * cells + key(p.x)].push(i as u32);
    }
    let r2 = range_m * range_m;
    let mut edges = Vec::new();
    for (i, p) in nodes.iter().enumerate() {
        let (cx, cy) = (key(p.x), key(p.y));
        for gy in cy.saturating_sub(1)..=(cy + 1).min(cells - 1) {
            for gx in cx.saturating_sub(1)..=(cx + 1).min(cells - 1) {
                for &j in &grid[gy * cells + gx] {
                    if (j as usize) > i {
                        let q = &nodes[j as usize];
                        let (dx, dy) = (p.x - q.x, p.y - q.y);
                        if dx * dx + dy * dy <= r2 {
                            edges.push((i as u32, j));
                        }
                    }
                }
            }
        }
    }
    Topology::from_edges(nodes, &edges, DEFAULT_MEAN_LINK_DELAY).expect("generated edges are valid")
}

/// Rooted tree filled level by level; node `i > 0` hangs off `(i-1)/arity`.
pub fn gen_tree(n: usize, arity: usize) -> Result<Topology, TopologyError> {
    if n == 0 {
        return Err(TopologyError::Empty);
    }
    if !(2..=3).contains(&arity) {
        return Err(TopologyError::Arity(arity));
    }
    let mut nodes = Vec::with_capacity(n);
    let (mut level, mut level_start, mut level_size) = (0usize, 0usize, 1usize);
    for i in 0..n {
        if i >= level_start + level_size {
            level += 1;
            level_start += level_size;
            level_size *= arity;
        }
        nodes.push(Node { x: (i - level_start) as f64, y: level as f64, class: DeviceClass::Lr });
    }
    let edges: Vec<(u32, u32)> = (1..n).map(|i| (((i - 1) / arity) as u32, i as u32)).collect();
    Topology::from_edges(nodes, &edges, DEFAULT_MEAN_LINK_DELAY)
}

/// Depth (edges from root to deepest node) of a tree built by [`gen_tree`].
pub fn tree_depth(n: usize, arity: usize) -> usize {
    let mut i = n.saturating_sub(1);
    let mut d = 0;
    while i > 0 {
        i = (i - 1) / arity;
        d += 1;
    }
    d
}

/// The graph of devices that can exchange application `b`: every holder, plus
/// HR devices reachable from a holder over HR-only paths. Node ids are
/// renumbered; `ids[k]` is the original id of node `k`.
#[derive(Clone, Debug)]
pub struct AppGraph {
    pub graph: Topology,
    pub ids: Vec<DeviceId>,
}

impl AppGraph {
    pub fn local_id(&self, original: DeviceId) -> Option<DeviceId> {
        self.ids.binary_search(&original).ok().map(|k| DeviceId(k as u32))
    }
}

pub fn induced_app_graph(topology: &Topology, holders: &BTreeSet<DeviceId>) -> AppGraph {
    let mut keep = vec![false; topology.len()];
    let mut q = VecDeque::new();
    for &h in holders {
        keep[h.index()] = true;
        q.push_back(h);
    }
    while let Some(v) = q.pop_front() {
        for &w in topology.neighbors(v) {
            if !keep[w.index()] && topology.node(w).class == DeviceClass::Hr {
                keep[w.index()] = true;
                q.push_back(w);
            }
        }
    }
    let ids: Vec<DeviceId> = topology.ids().filter(|d| keep[d.index()]).collect();
    let nodes = ids.iter().map(|&d| *topology.node(d)).collect::<Vec<_>>();
    let local = |d: DeviceId| ids.binary_search(&d).ok().map(|k| k as u32);
    let edges: Vec<(u32, u32)> = topology
        .edges()
        .filter_map(|(a, b)| Some((local(a)?, local(b)?)))
        .collect();
    let graph = if nodes.is_empty() {
        Topology { nodes, adj: Vec::new(), mean_link_delay: topology.mean_link_delay }
    } else {
        Topology::from_edges(nodes, &edges, topology.mean_link_delay).expect("induced edges are valid")
    };
    AppGraph { graph, ids }
}

/// True iff the application graph is connected and some honest device holds
/// the application.
pub fn recoverability_check(app: &AppGraph, honest_holders: &BTreeSet<DeviceId>) -> bool {
    !app.graph.is_empty()
        && app.graph.is_connected()
        && honest_holders.iter().any(|h| app.local_id(*h).is_some())
}

/// Holder-to-holder overlay in which HR relays are replaced by virtual links.
/// Each link records the hop count so that delivery delay scales with it.
#[derive(Clone, Debug)]
pub struct HolderOverlay {
    pub graph: Topology,
    pub ids: Vec<DeviceId>,
    /// `hops[k][x]` is the hop count of the link from local node `k` to its
    /// `x`-th neighbor in `graph`.
    pub hops: Vec<Vec<u32>>,
}

/// Links every pair of holders that are adjacent or joined by a path whose
/// interior consists only of HR non-holders.
pub fn holder_overlay(topology: &Topology, holders: &BTreeSet<DeviceId>) -> HolderOverlay {
    let ids: Vec<DeviceId> = holders.iter().copied().collect();
    let local = |d: DeviceId| ids.binary_search(&d).ok();
    let mut best: std::collections::BTreeMap<(u32, u32), u32> = Default::default();
    for (k, &src) in ids.iter().enumerate() {
        let mut dist = vec![u32::MAX; topology.len()];
        dist[src.index()] = 0;
        let mut q = VecDeque::from([src]);
        while let Some(v) = q.pop_front() {
            let d = dist[v.index()];
            for &w in topology.neighbors(v) {
                if dist[w.index()] != u32::MAX {
                    continue;
                }
                dist[w.index()] = d + 1;
                if let Some(j) = local(w) {
                    if j != k {
                        let e = ((k.min(j)) as u32, (k.max(j)) as u32);
                        let h = best.entry(e).or_insert(d + 1);
                        *h = (*h).min(d + 1);
                    }
                } else if topology.node(w).class == DeviceClass::Hr {
                    q.push_back(w);
                }
            }
        }
    }
    let nodes: Vec<Node> = ids.iter().map(|&d| *topology.node(d)).collect();
    let edges: Vec<(u32, u32)> = best.keys().copied().collect();
    let graph = if nodes.is_empty() {
        Topology { nodes, adj: Vec::new(), mean_link_delay: topology.mean_link_delay }
    } else {
        Topology::from_edges(nodes, &edges, topology.mean_link_delay).expect("overlay edges are valid")
    };
    let hops = graph
        .ids()
        .map(|a| {
            graph
                .neighbors(a)
                .iter()
                .map(|b| best[&(a.0.min(b.0), a.0.max(b.0))])
                .collect()
        })
        .collect();
    HolderOverlay { graph, ids, hops }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lr(n: usize) -> Vec<Node> {
        (0..n).map(|i| Node { x: i as f64, y: 0.0, class: DeviceClass::Lr }).collect()
    }

    #[test]
    fn mesh_respects_range_exactly() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let t = mesh_layout(400, 1000.0, 90.0, &mut r);
        for a in t.ids() {
            for b in t.ids() {
                if a == b {
                    continue;
                }
                let (p, q) = (t.node(a), t.node(b));
                let within = (p.x - q.x).powi(2) + (p.y - q.y).powi(2) <= 90.0 * 90.0;
                assert_eq!(within, t.has_edge(a, b));
            }
        }
    }

    #[test]
    fn mesh_single_node_and_determinism() {
        let t = gen_mesh(1, 10.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(t.len(), 1);
        assert!(t.is_connected());
        let a = gen_mesh(200, 1000.0, 150.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = gen_mesh(200, 1000.0, 150.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mesh_failure_names_component() {
        let err = gen_mesh(50, 10_000.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap_err();
        assert!(matches!(err, TopologyError::Disconnected { n: 50, .. }));
    }

    #[test]
    fn trees() {
        let t = gen_tree(1023, 2).unwrap();
        assert_eq!(tree_depth(1023, 2), 9);
        assert_eq!(t.ids().filter(|&d| t.degree(d) == 1).count(), 512);
        assert!(t.is_connected());
        assert_eq!(t.edge_count(), 1022);
        let t3 = gen_tree(1024, 3).unwrap();
        assert_eq!(tree_depth(1024, 3), 6);
        assert!(t3.is_connected());
        assert!(matches!(gen_tree(10, 4), Err(TopologyError::Arity(4))));
    }

    #[test]
    fn three_node_lr_relay_disconnects() {
        let t = Topology::from_edges(lr(3), &[(0, 1), (1, 2)], 0.02).unwrap();
        let holders: BTreeSet<_> = [DeviceId(0), DeviceId(2)].into();
        let g = induced_app_graph(&t, &holders);
        assert_eq!(g.ids, vec![DeviceId(0), DeviceId(2)]);
        assert_eq!(g.graph.edge_count(), 0);
        assert!(!recoverability_check(&g, &[DeviceId(0)].into()));

        let mut t_hr = t.clone();
        t_hr.set_class(DeviceId(1), DeviceClass::Hr);
        let g = induced_app_graph(&t_hr, &holders);
        assert_eq!(g.ids.len(), 3);
        assert!(g.graph.is_connected());
        assert!(recoverability_check(&g, &[DeviceId(0)].into()));
        assert!(!recoverability_check(&g, &BTreeSet::new()));

        let o = holder_overlay(&t_hr, &holders);
        assert_eq!(o.graph.edge_count(), 1);
        assert_eq!(o.hops[0], vec![2]);
    }

    #[test]
    fn induced_graph_of_all_holders_is_identity() {
        let t = gen_mesh(100, 500.0, 120.0, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let all: BTreeSet<_> = t.ids().collect();
        assert_eq!(induced_app_graph(&t, &all).graph, t);
    }

    #[test]
    fn edge_list_round_trip() {
        let mut t = gen_mesh(30, 300.0, 100.0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        t.set_class(DeviceId(3), DeviceClass::Hr);
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        let back = Topology::read_from(&buf[..]).unwrap();
        assert_eq!(back, t);
    }
}
