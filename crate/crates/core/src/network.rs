//! Directed street network with static per-edge travel times.
//!
//! Node ids in files are arbitrary `u64`s; internally nodes are re-indexed
//! densely in ascending external-id order, so comparing [`NodeId`]s compares
//! external ids. Shortest paths break ties by the lexicographically smallest
//! node sequence.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Node count at or below which all-pairs times are precomputed on construction.
pub const DEFAULT_APSP_THRESHOLD: usize = 2000;

/// Dense node index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: NodeId,
    pub to: NodeId,
    pub seconds: f64,
    pub meters: f64,
}

/// A path through the network with cumulative travel-time offsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub nodes: Vec<NodeId>,
    /// `offsets[i]` is the travel time from `nodes[0]` to `nodes[i]`.
    pub offsets: Vec<f64>,
    pub length_m: f64,
}

impl Route {
    pub fn single(node: NodeId) -> Self {
        Route {
            nodes: vec![node],
            offsets: vec![0.0],
            length_m: 0.0,
        }
    }

    pub fn total_seconds(&self) -> f64 {
        *self.offsets.last().expect("route is never empty")
    }

    pub fn start(&self) -> NodeId {
        self.nodes[0]
    }

    pub fn end(&self) -> NodeId {
        *self.nodes.last().expect("route is never empty")
    }

    /// Appends `other`, which must start where `self` ends.
    pub fn extend(&mut self, other: &Route) {
        debug_assert_eq!(self.end(), other.start());
        let base = self.total_seconds();
        self.nodes.extend_from_slice(&other.nodes[1..]);
        self.offsets.extend(other.offsets[1..].iter().map(|o| base + o));
        self.length_m += other.length_m;
    }
}

enum DistanceCache {
    /// `rows[t][a]` is the shortest time from `a` to `t`.
    Dense(Vec<Arc<Vec<f64>>>),
    Lazy(RwLock<HashMap<usize, Arc<Vec<f64>>>>),
}

pub struct StreetNetwork {
    ids: Vec<u64>,
    coords: Vec<(f64, f64)>,
    index: HashMap<u64, NodeId>,
    edges: Vec<Edge>,
    /// Best edge per (from, to) pair, sorted by target.
    out: Vec<Vec<usize>>,
    incoming: Vec<Vec<usize>>,
    cache: DistanceCache,
}

impl std::fmt::Debug for StreetNetwork {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StreetNetwork")
            .field("nodes", &self.ids.len())
            .field("edges", &self.edges.len())
            .finish()
    }
}

#[derive(Clone, Copy, PartialEq)]
struct HeapEntry {
    dist: f64,
    node: usize,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl StreetNetwork {
    /// Builds and validates a network from `(id, lat, lon)` nodes and
    /// `(from, to, seconds, meters)` edges.
    pub fn new(nodes: Vec<(u64, f64, f64)>, edges: Vec<(u64, u64, f64, f64)>) -> Result<Self> {
        Self::with_threshold(nodes, edges, DEFAULT_APSP_THRESHOLD)
    }

    pub fn with_threshold(
        mut nodes: Vec<(u64, f64, f64)>,
        raw_edges: Vec<(u64, u64, f64, f64)>,
        apsp_threshold: usize,
    ) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::InvalidNetwork("network has no nodes".into()));
        }
        nodes.sort_by_key(|n| n.0);
        for pair in nodes.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(Error::InvalidNetwork(format!("node {} declared twice", pair[0].0)));
            }
        }
        let ids: Vec<u64> = nodes.iter().map(|n| n.0).collect();
        let coords = nodes.iter().map(|n| (n.1, n.2)).collect();
        let index: HashMap<u64, NodeId> = ids.iter().enumerate().map(|(i, &id)| (id, NodeId(i))).collect();

        let mut edges = Vec::with_capacity(raw_edges.len());
        for (from, to, seconds, meters) in raw_edges {
            let f = *index
                .get(&from)
                .ok_or_else(|| Error::InvalidNetwork(format!("edge {from}->{to} references unknown node {from}")))?;
            let t = *index
                .get(&to)
                .ok_or_else(|| Error::InvalidNetwork(format!("edge {from}->{to} references unknown node {to}")))?;
            if !(seconds > 0.0 && seconds.is_finite()) {
                return Err(Error::InvalidNetwork(format!(
                    "edge {from}->{to} has non-positive travel time {seconds}"
                )));
            }
            if !(meters > 0.0 && meters.is_finite()) {
                return Err(Error::InvalidNetwork(format!(
                    "edge {from}->{to} has non-positive length {meters}"
                )));
            }
            if f == t {
                return Err(Error::InvalidNetwork(format!("self loop on node {from}")));
            }
            edges.push(Edge {
                from: f,
                to: t,
                seconds,
                meters,
            });
        }

        let n = ids.len();
        let mut best: HashMap<(usize, usize), usize> = HashMap::new();
        for (i, e) in edges.iter().enumerate() {
            best.entry((e.from.0, e.to.0))
                .and_modify(|j| {
                    if e.seconds < edges[*j].seconds {
                        *j = i;
                    }
                })
                .or_insert(i);
        }
        let mut out = vec![Vec::new(); n];
        let mut incoming = vec![Vec::new(); n];
        for (&(f, t), &i) in &best {
            out[f].push(i);
            incoming[t].push(i);
        }
        for list in out.iter_mut() {
            list.sort_by_key(|&i| edges[i].to);
        }
        for list in incoming.iter_mut() {
            list.sort_by_key(|&i| edges[i].from);
        }

        let dead: Vec<u64> = (0..n).filter(|&i| out[i].is_empty()).map(|i| ids[i]).collect();
        if !dead.is_empty() {
            return Err(Error::NoOutgoingEdges(dead));
        }

        let mut net = StreetNetwork {
            ids,
            coords,
            index,
            edges,
            out,
            incoming,
            cache: DistanceCache::Lazy(RwLock::new(HashMap::new())),
        };
        if n <= apsp_threshold {
            let rows = (0..n).map(|t| Arc::new(net.reverse_dijkstra(t))).collect();
            net.cache = DistanceCache::Dense(rows);
        }
        Ok(net)
    }

    pub fn node_count(&self) -> usize {
        self.ids.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.ids.len()).map(NodeId)
    }

    pub fn external_id(&self, node: NodeId) -> u64 {
        self.ids[node.0]
    }

    pub fn node(&self, external: u64) -> Result<NodeId> {
        self.index.get(&external).copied().ok_or(Error::UnknownNode(external))
    }

    pub fn coord(&self, node: NodeId) -> (f64, f64) {
        self.coords[node.0]
    }

    /// Outgoing edges of `node` (best edge per neighbour), sorted by target.
    pub fn out_edges(&self, node: NodeId) -> impl Iterator<Item = &Edge> + '_ {
        self.out[node.0].iter().map(move |&i| &self.edges[i])
    }

    /// Nearest node by planar distance on `(lat, lon)`; ties go to the smaller id.
    pub fn nearest_node(&self, lat: f64, lon: f64) -> NodeId {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, &(y, x)) in self.coords.iter().enumerate() {
            let d = (y - lat).powi(2) + (x - lon).powi(2);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        NodeId(best)
    }

    fn check(&self, node: NodeId) -> Result<()> {
        if node.0 < self.ids.len() {
            Ok(())
        } else {
            Err(Error::UnknownNode(node.0 as u64))
        }
    }

    fn reverse_dijkstra(&self, target: usize) -> Vec<f64> {
        let mut dist = vec![f64::INFINITY; self.ids.len()];
        let mut heap = BinaryHeap::new();
        dist[target] = 0.0;
        heap.push(HeapEntry {
            dist: 0.0,
            node: target,
        });
        while let Some(HeapEntry { dist: d, node }) = heap.pop() {
            if d > dist[node] {
                continue;
            }
            for &ei in &self.incoming[node] {
                let e = &self.edges[ei];
                let nd = d + e.seconds;
                if nd < dist[e.from.0] {
                    dist[e.from.0] = nd;
                    heap.push(HeapEntry {
                        dist: nd,
                        node: e.from.0,
                    });
                }
            }
        }
        dist
    }

    /// Shortest times from every node to `target`.
    fn times_to(&self, target: NodeId) -> Arc<Vec<f64>> {
        match &self.cache {
            DistanceCache::Dense(rows) => Arc::clone(&rows[target.0]),
            DistanceCache::Lazy(lock) => {
                if let Some(row) = lock.read().expect("distance cache poisoned").get(&target.0) {
                    return Arc::clone(row);
                }
                let row = Arc::new(self.reverse_dijkstra(target.0));
                lock.write()
                    .expect("distance cache poisoned")
                    .entry(target.0)
                    .or_insert(row)
                    .clone()
            }
        }
    }

    /// Shortest travel time in seconds, `f64::INFINITY` when unreachable.
    ///
    /// Panics on an out-of-range node; use [`Self::shortest_travel_time`] for
    /// checked access.
    pub fn time(&self, from: NodeId, to: NodeId) -> f64 {
        if from == to {
            return 0.0;
        }
        self.times_to(to)[from.0]
    }

    pub fn shortest_travel_time(&self, from: NodeId, to: NodeId) -> Result<f64> {
        self.check(from)?;
        self.check(to)?;
        let t = self.time(from, to);
        if t.is_finite() {
            Ok(t)
        } else {
            Err(self.unreachable(from, to))
        }
    }

    fn unreachable(&self, from: NodeId, to: NodeId) -> Error {
        Error::Unreachable {
            from: self.ids[from.0],
            to: self.ids[to.0],
        }
    }

    /// Shortest route; among equal-time routes the lexicographically smallest
    /// node sequence wins.
    pub fn shortest_route(&self, from: NodeId, to: NodeId) -> Result<Route> {
        self.check(from)?;
        self.check(to)?;
        if from == to {
            return Ok(Route::single(from));
        }
        let dist = self.times_to(to);
        if !dist[from.0].is_finite() {
            return Err(self.unreachable(from, to));
        }
        let mut route = Route::single(from);
        let mut cur = from;
        let mut elapsed = 0.0;
        while cur != to {
            if route.nodes.len() > self.ids.len() {
                return Err(Error::InvalidNetwork(format!(
                    "route reconstruction {}->{} did not terminate",
                    self.ids[from.0], self.ids[to.0]
                )));
            }
            let here = dist[cur.0];
            let tol = 1e-9 * here.max(1.0);
            // out edges are sorted by target, so the first edge on a shortest
            // path gives the lexicographically smallest continuation
            let edge = self
                .out_edges(cur)
                .find(|e| (e.seconds + dist[e.to.0] - here).abs() <= tol)
                .expect("a shortest-path successor exists for a reachable node");
            elapsed += edge.seconds;
            route.nodes.push(edge.to);
            route.offsets.push(elapsed);
            route.length_m += edge.meters;
            cur = edge.to;
        }
        Ok(route)
    }

    /// Serializes to the line-oriented network file format.
    pub fn to_file_string(&self) -> String {
        let mut s = String::from("# ridepool street network\n");
        for (i, &id) in self.ids.iter().enumerate() {
            let (lat, lon) = self.coords[i];
            let _ = writeln!(s, "N {id} {lat} {lon}");
        }
        for e in &self.edges {
            let _ = writeln!(
                s,
                "E {} {} {} {}",
                self.ids[e.from.0], self.ids[e.to.0], e.seconds, e.meters
            );
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }
}

/// Parses network text. `path` is only used in error messages.
pub fn parse_network(text: &str, path: &Path) -> Result<StreetNetwork> {
    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let perr = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields[0] {
            "N" => {
                if fields.len() != 4 {
                    return Err(perr(format!("expected `N <id> <lat> <lon>`, got `{line}`")));
                }
                let id = fields[1]
                    .parse::<u64>()
                    .map_err(|e| perr(format!("bad node id `{}`: {e}", fields[1])))?;
                let lat = parse_f64(fields[2]).map_err(&perr)?;
                let lon = parse_f64(fields[3]).map_err(&perr)?;
                nodes.push((id, lat, lon));
            }
            "E" => {
                if fields.len() != 5 {
                    return Err(perr(format!(
                        "expected `E <from> <to> <seconds> <meters>`, got `{line}`"
                    )));
                }
                let from = fields[1]
                    .parse::<u64>()
                    .map_err(|e| perr(format!("bad node id `{}`: {e}", fields[1])))?;
                let to = fields[2]
                    .parse::<u64>()
                    .map_err(|e| perr(format!("bad node id `{}`: {e}", fields[2])))?;
                let secs = parse_f64(fields[3]).map_err(&perr)?;
                let meters = parse_f64(fields[4]).map_err(&perr)?;
                edges.push((from, to, secs, meters));
            }
            other => return Err(perr(format!("unknown record type `{other}`"))),
        }
    }
    StreetNetwork::new(nodes, edges)
}

fn parse_f64(s: &str) -> std::result::Result<f64, String> {
    s.parse::<f64>().map_err(|e| format!("bad number `{s}`: {e}"))
}

pub fn load_network(path: impl AsRef<Path>) -> Result<StreetNetwork> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::from(e).context(format!("reading {}", path.display())))?;
    parse_network(&text, path)
}

/// A 4-connected bidirectional lattice with `rows * cols` nodes.
///
/// Node `(r, c)` has id `r * cols + c` and planar coordinates
/// `(r * spacing_km, c * spacing_km)`; every edge takes `edge_seconds`.
pub fn grid_network(rows: usize, cols: usize, spacing_km: f64, edge_seconds: f64) -> Result<StreetNetwork> {
    if rows == 0 || cols == 0 || rows * cols < 2 {
        return Err(Error::InvalidNetwork("a grid network needs at least two nodes".into()));
    }
    let id = |r: usize, c: usize| (r * cols + c) as u64;
    let mut nodes = Vec::with_capacity(rows * cols);
    let mut edges = Vec::new();
    let meters = spacing_km * 1000.0;
    for r in 0..rows {
        for c in 0..cols {
            nodes.push((id(r, c), r as f64 * spacing_km, c as f64 * spacing_km));
            if c + 1 < cols {
                edges.push((id(r, c), id(r, c + 1), edge_seconds, meters));
                edges.push((id(r, c + 1), id(r, c), edge_seconds, meters));
            }
            if r + 1 < rows {
                edges.push((id(r, c), id(r + 1, c), edge_seconds, meters));
                edges.push((id(r + 1, c), id(r, c), edge_seconds, meters));
            }
        }
    }
    StreetNetwork::new(nodes, edges)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line() -> StreetNetwork {
        StreetNetwork::new(
            vec![(1, 0.0, 0.0), (2, 0.0, 1.0), (3, 0.0, 2.0)],
            vec![(1, 2, 10.0, 100.0), (2, 3, 5.0, 50.0), (3, 1, 30.0, 300.0)],
        )
        .unwrap()
    }

    #[test]
    fn cycle_file_parses() {
        let text = "# square\nN 0 0 0\nN 1 0 1\nN 2 1 1\nN 3 1 0\n\
                    E 0 1 10 100\nE 1 2 10 100\nE 2 3 10 100\nE 3 0 10 100\n";
        let net = parse_network(text, Path::new("cycle.txt")).unwrap();
        assert_eq!(net.node_count(), 4);
        assert_eq!(net.edges().len(), 4);
    }

    #[test]
    fn dead_end_is_rejected_by_name() {
        let text = "N 0 0 0\nN 1 0 1\nN 7 1 1\nE 0 1 10 100\nE 1 0 10 100\nE 1 7 5 50\n";
        match parse_network(text, Path::new("x")) {
            Err(Error::NoOutgoingEdges(ids)) => assert_eq!(ids, vec![7]),
            other => panic!("expected dead-end error, got {other:?}"),
        }
    }

    #[test]
    fn parse_error_carries_line_number() {
        let text = "N 0 0 0\nN 1 0 x\n";
        match parse_network(text, Path::new("bad.txt")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_edge_endpoint() {
        let text = "N 0 0 0\nE 0 9 1 1\n";
        assert!(matches!(
            parse_network(text, Path::new("x")),
            Err(Error::InvalidNetwork(_))
        ));
    }

    #[test]
    fn grid_edge_count() {
        let net = grid_network(10, 10, 0.2, 60.0).unwrap();
        assert_eq!(net.node_count(), 100);
        assert_eq!(net.edges().len(), 360);
    }

    #[test]
    fn line_times() {
        let net = line();
        let a = net.node(1).unwrap();
        let c = net.node(3).unwrap();
        assert_eq!(net.shortest_travel_time(a, a).unwrap(), 0.0);
        assert_eq!(net.shortest_travel_time(a, c).unwrap(), 15.0);
        let r = net.shortest_route(a, a).unwrap();
        assert_eq!(r.nodes, vec![a]);
        assert_eq!(r.total_seconds(), 0.0);
    }

    #[test]
    fn unknown_node_is_an_error() {
        let net = line();
        assert!(matches!(
            net.shortest_travel_time(NodeId(0), NodeId(17)),
            Err(Error::UnknownNode(17))
        ));
    }

    #[test]
    fn unreachable_is_distinct() {
        // two disjoint 2-cycles
        let net = StreetNetwork::new(
            vec![(0, 0.0, 0.0), (1, 0.0, 1.0), (2, 5.0, 0.0), (3, 5.0, 1.0)],
            vec![(0, 1, 1.0, 1.0), (1, 0, 1.0, 1.0), (2, 3, 1.0, 1.0), (3, 2, 1.0, 1.0)],
        )
        .unwrap();
        assert!(net.time(NodeId(0), NodeId(2)).is_infinite());
        assert!(matches!(
            net.shortest_route(NodeId(0), NodeId(3)),
            Err(Error::Unreachable { from: 0, to: 3 })
        ));
    }

    #[test]
    fn equal_cost_tie_goes_to_smaller_node() {
        // a=0, b=1, c=2, d=3 ; a->b->d and a->c->d both cost 2
        let net = StreetNetwork::new(
            vec![(0, 0.0, 0.0), (1, 1.0, 0.0), (2, 0.0, 1.0), (3, 1.0, 1.0)],
            vec![
                (0, 2, 1.0, 1.0),
                (0, 1, 1.0, 1.0),
                (2, 3, 1.0, 1.0),
                (1, 3, 1.0, 1.0),
                (3, 0, 1.0, 1.0),
            ],
        )
        .unwrap();
        let r = net.shortest_route(NodeId(0), NodeId(3)).unwrap();
        assert_eq!(r.nodes, vec![NodeId(0), NodeId(1), NodeId(3)]);
        assert_eq!(r.offsets, vec![0.0, 1.0, 2.0]);
    }

    #[test]
    fn lazy_cache_matches_dense() {
        let dense = grid_network(6, 5, 0.2, 30.0).unwrap();
        let text = dense.to_file_string();
        let mut nodes = Vec::new();
        let mut edges = Vec::new();
        for l in text.lines().filter(|l| !l.starts_with('#')) {
            let f: Vec<&str> = l.split_whitespace().collect();
            if f[0] == "N" {
                nodes.push((f[1].parse().unwrap(), f[2].parse().unwrap(), f[3].parse().unwrap()));
            } else {
                edges.push((
                    f[1].parse().unwrap(),
                    f[2].parse().unwrap(),
                    f[3].parse().unwrap(),
                    f[4].parse().unwrap(),
                ));
            }
        }
        let lazy = StreetNetwork::with_threshold(nodes, edges, 0).unwrap();
        for a in dense.nodes() {
            for b in dense.nodes() {
                assert_eq!(dense.time(a, b), lazy.time(a, b));
                assert_eq!(dense.shortest_route(a, b).unwrap(), lazy.shortest_route(a, b).unwrap());
            }
        }
    }

    #[test]
    fn nearest_node_tie_prefers_smaller_id() {
        let net = grid_network(2, 2, 1.0, 10.0).unwrap();
        // equidistant from node 0 (0,0) and node 1 (0,1)
        assert_eq!(net.nearest_node(0.0, 0.5), NodeId(0));
    }
}
