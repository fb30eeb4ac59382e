//! Hexagonal dispatch regions in axial coordinates.
//!
//! Each vehicle may be dispatched to its own region or any region within two
//! hex rings of it, which gives at most 19 candidate actions.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{NodeId, StreetNetwork};

/// Size of the full two-ring action set.
pub const MAX_ACTIONS: usize = 19;

pub const DEFAULT_DIAMETER_KM: f64 = 0.36;

/// Dense region index; ordered like the external region ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RegionId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Axial {
    pub q: i64,
    pub r: i64,
}

impl Axial {
    pub fn distance(self, other: Axial) -> i64 {
        let dq = self.q - other.q;
        let dr = self.r - other.r;
        (dq.abs() + dr.abs() + (dq + dr).abs()) / 2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HexGrid {
    ids: Vec<u64>,
    axial: Vec<Axial>,
    node_region: Vec<RegionId>,
    region_nodes: Vec<Vec<NodeId>>,
    ring1: Vec<Vec<RegionId>>,
    ring2: Vec<Vec<RegionId>>,
    diameter_km: f64,
}

/// Ordered dispatch candidates: own region, then ring 1, then ring 2, each
/// ring sorted by region id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionSet(Vec<RegionId>);

impl ActionSet {
    pub fn regions(&self) -> &[RegionId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, action: usize) -> Option<RegionId> {
        self.0.get(action).copied()
    }

    pub fn position(&self, region: RegionId) -> Option<usize> {
        self.0.iter().position(|&r| r == region)
    }
}

impl HexGrid {
    /// Assembles a grid from regions `(external id, axial)` and a total
    /// node-to-region map given as region indices into `regions`.
    fn assemble(mut regions: Vec<(u64, Axial)>, node_region_ext: Vec<u64>, diameter_km: f64) -> Result<Self> {
        if regions.is_empty() {
            return Err(Error::InvalidGrid("grid has no regions".into()));
        }
        if !(diameter_km > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "region diameter must be positive, got {diameter_km}"
            )));
        }
        regions.sort_by_key(|r| r.0);
        let mut seen_axial = HashMap::new();
        for (i, (id, ax)) in regions.iter().enumerate() {
            if i > 0 && regions[i - 1].0 == *id {
                return Err(Error::InvalidGrid(format!("region {id} declared twice")));
            }
            if let Some(other) = seen_axial.insert(*ax, *id) {
                return Err(Error::InvalidGrid(format!(
                    "regions {other} and {id} share axial coordinate ({}, {})",
                    ax.q, ax.r
                )));
            }
        }
        let ids: Vec<u64> = regions.iter().map(|r| r.0).collect();
        let axial: Vec<Axial> = regions.iter().map(|r| r.1).collect();
        let index: HashMap<u64, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();

        let mut node_region = Vec::with_capacity(node_region_ext.len());
        let mut region_nodes = vec![Vec::new(); ids.len()];
        for (node, ext) in node_region_ext.iter().enumerate() {
            let r = *index.get(ext).ok_or(Error::UnknownRegion(*ext))?;
            node_region.push(RegionId(r));
            region_nodes[r].push(NodeId(node));
        }

        let n = ids.len();
        let mut ring1 = vec![Vec::new(); n];
        let mut ring2 = vec![Vec::new(); n];
        for a in 0..n {
            for b in 0..n {
                match axial[a].distance(axial[b]) {
                    1 => ring1[a].push(RegionId(b)),
                    2 => ring2[a].push(RegionId(b)),
                    _ => {}
                }
            }
        }
        Ok(HexGrid {
            ids,
            axial,
            node_region,
            region_nodes,
            ring1,
            ring2,
            diameter_km,
        })
    }

    pub fn region_count(&self) -> usize {
        self.ids.len()
    }

    pub fn regions(&self) -> impl Iterator<Item = RegionId> {
        (0..self.ids.len()).map(RegionId)
    }

    pub fn external_id(&self, region: RegionId) -> u64 {
        self.ids[region.0]
    }

    pub fn axial(&self, region: RegionId) -> Axial {
        self.axial[region.0]
    }

    pub fn diameter_km(&self) -> f64 {
        self.diameter_km
    }

    pub fn region_of(&self, node: NodeId) -> RegionId {
        self.node_region[node.0]
    }

    /// Nodes of a region in ascending id order.
    pub fn nodes_in(&self, region: RegionId) -> &[NodeId] {
        &self.region_nodes[region.0]
    }

    pub fn ring1(&self, region: RegionId) -> &[RegionId] {
        &self.ring1[region.0]
    }

    pub fn ring2(&self, region: RegionId) -> &[RegionId] {
        &self.ring2[region.0]
    }

    pub fn action_set(&self, region: RegionId) -> Result<ActionSet> {
        if region.0 >= self.ids.len() {
            return Err(Error::UnknownRegion(region.0 as u64));
        }
        let mut v = Vec::with_capacity(MAX_ACTIONS);
        v.push(region);
        v.extend_from_slice(&self.ring1[region.0]);
        v.extend_from_slice(&self.ring2[region.0]);
        Ok(ActionSet(v))
    }

    pub fn to_file_string(&self, net: &StreetNetwork) -> String {
        let mut s = String::from("# ridepool hex grid\n");
        let _ = writeln!(s, "D {}", self.diameter_km);
        for (i, &id) in self.ids.iter().enumerate() {
            let _ = writeln!(s, "R {id} {} {}", self.axial[i].q, self.axial[i].r);
        }
        for (node, region) in self.node_region.iter().enumerate() {
            let _ = writeln!(s, "M {} {}", net.external_id(NodeId(node)), self.ids[region.0]);
        }
        s
    }

    pub fn save(&self, net: &StreetNetwork, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_file_string(net))?;
        Ok(())
    }
}

/// Offset row/column to axial for an "odd-r" rectangular hex layout.
pub fn offset_to_axial(row: usize, col: usize) -> Axial {
    let r = row as i64;
    Axial {
        q: col as i64 - (r - (r & 1)) / 2,
        r,
    }
}

pub fn build_synthetic_grid(rows: usize, cols: usize, net: &StreetNetwork) -> Result<HexGrid> {
    build_synthetic_grid_with(rows, cols, net, DEFAULT_DIAMETER_KM)
}

/// Lays a `rows x cols` pointy-top hex lattice of the given corner-to-corner
/// diameter over the network, centred on the network's bounding box, and
/// assigns each node to the nearest region centre (ties to the smaller
/// region id). Network coordinates are read as planar `(y, x)` kilometres.
pub fn build_synthetic_grid_with(rows: usize, cols: usize, net: &StreetNetwork, diameter_km: f64) -> Result<HexGrid> {
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidGrid("grid needs at least one row and column".into()));
    }
    if net.node_count() == 0 {
        return Err(Error::InvalidGrid("empty network".into()));
    }
    let size = diameter_km / 2.0;
    let sqrt3 = 3f64.sqrt();
    let mut regions = Vec::with_capacity(rows * cols);
    let mut centers = Vec::with_capacity(rows * cols);
    for row in 0..rows {
        for col in 0..cols {
            let ax = offset_to_axial(row, col);
            let x = size * sqrt3 * (ax.q as f64 + ax.r as f64 / 2.0);
            let y = size * 1.5 * ax.r as f64;
            regions.push(((row * cols + col) as u64, ax));
            centers.push((y, x));
        }
    }
    let bbox = |pts: &mut dyn Iterator<Item = (f64, f64)>| {
        pts.fold(
            (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY),
            |(y0, y1, x0, x1), (y, x)| (y0.min(y), y1.max(y), x0.min(x), x1.max(x)),
        )
    };
    let (cy0, cy1, cx0, cx1) = bbox(&mut centers.iter().copied());
    let (ny0, ny1, nx0, nx1) = bbox(&mut net.nodes().map(|n| net.coord(n)));
    let dy = (ny0 + ny1) / 2.0 - (cy0 + cy1) / 2.0;
    let dx = (nx0 + nx1) / 2.0 - (cx0 + cx1) / 2.0;
    for c in centers.iter_mut() {
        c.0 += dy;
        c.1 += dx;
    }

    let mut mapping = Vec::with_capacity(net.node_count());
    for node in net.nodes() {
        let (y, x) = net.coord(node);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, &(cy, cx)) in centers.iter().enumerate() {
            let d = (cy - y).powi(2) + (cx - x).powi(2);
            if d < best_d - 1e-12 {
                best_d = d;
                best = i;
            }
        }
        mapping.push(regions[best].0);
    }
    HexGrid::assemble(regions, mapping, diameter_km)
}

/// Parses grid text (`R <id> <q> <r>`, `M <node> <region>`, optional
/// `D <diameter-km>`) against a network.
pub fn parse_grid(text: &str, path: &Path, net: &StreetNetwork) -> Result<HexGrid> {
    let mut regions = Vec::new();
    let mut diameter = DEFAULT_DIAMETER_KM;
    let mut mapping: BTreeMap<usize, u64> = BTreeMap::new();
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
        let f: Vec<&str> = line.split_whitespace().collect();
        let int = |s: &str| s.parse::<i64>().map_err(|e| perr(format!("bad integer `{s}`: {e}")));
        let uint = |s: &str| s.parse::<u64>().map_err(|e| perr(format!("bad id `{s}`: {e}")));
        match (f[0], f.len()) {
            ("D", 2) => {
                diameter = f[1]
                    .parse::<f64>()
                    .map_err(|e| perr(format!("bad diameter `{}`: {e}", f[1])))?;
            }
            ("R", 4) => regions.push((
                uint(f[1])?,
                Axial {
                    q: int(f[2])?,
                    r: int(f[3])?,
                },
            )),
            ("M", 3) => {
                let ext = uint(f[1])?;
                let node = net.node(ext)?;
                let region = uint(f[2])?;
                if mapping.insert(node.0, region).is_some() {
                    return Err(Error::DuplicateMapping(ext));
                }
            }
            _ => return Err(perr(format!("unrecognised record `{line}`"))),
        }
    }
    let mut node_region = Vec::with_capacity(net.node_count());
    for node in net.nodes() {
        match mapping.get(&node.0) {
            Some(&r) => node_region.push(r),
            None => return Err(Error::UnmappedNode(net.external_id(node))),
        }
    }
    HexGrid::assemble(regions, node_region, diameter)
}

pub fn load_grid(path: impl AsRef<Path>, net: &StreetNetwork) -> Result<HexGrid> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::from(e).context(format!("reading {}", path.display())))?;
    parse_grid(&text, path, net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::grid_network;

    fn net() -> StreetNetwork {
        grid_network(10, 10, 0.2, 60.0).unwrap()
    }

    #[test]
    fn single_region() {
        let net = net();
        let g = build_synthetic_grid(1, 1, &net).unwrap();
        assert_eq!(g.region_count(), 1);
        assert!(net.nodes().all(|n| g.region_of(n) == RegionId(0)));
        assert_eq!(g.action_set(RegionId(0)).unwrap().len(), 1);
    }

    #[test]
    fn center_of_seven_by_seven_has_nineteen_actions() {
        let g = build_synthetic_grid(7, 7, &net()).unwrap();
        let center = RegionId(3 * 7 + 3);
        let a = g.action_set(center).unwrap();
        assert_eq!(a.len(), MAX_ACTIONS);
        assert_eq!(a.get(0), Some(center));
        assert_eq!(g.ring1(center).len(), 6);
        assert_eq!(g.ring2(center).len(), 12);
    }

    #[test]
    fn rings_are_sorted_and_symmetric() {
        let g = build_synthetic_grid(5, 6, &net()).unwrap();
        for r in g.regions() {
            assert!(g.ring1(r).windows(2).all(|w| w[0] < w[1]));
            assert!(g.ring2(r).windows(2).all(|w| w[0] < w[1]));
            for &o in g.ring1(r) {
                assert!(g.ring1(o).contains(&r));
            }
            for &o in g.ring2(r) {
                assert!(g.ring2(o).contains(&r));
            }
        }
    }

    #[test]
    fn unknown_region() {
        let g = build_synthetic_grid(2, 2, &net()).unwrap();
        assert!(matches!(g.action_set(RegionId(4)), Err(Error::UnknownRegion(4))));
    }

    #[test]
    fn all_nodes_in_region_zero() {
        let net = grid_network(2, 2, 1.0, 10.0).unwrap();
        let text = "R 0 0 0\nM 0 0\nM 1 0\nM 2 0\nM 3 0\n";
        let g = parse_grid(text, Path::new("g"), &net).unwrap();
        assert_eq!(g.region_count(), 1);
        assert_eq!(g.nodes_in(RegionId(0)).len(), 4);
    }

    #[test]
    fn omitted_node_is_named() {
        let net = grid_network(2, 2, 1.0, 10.0).unwrap();
        let text = "R 0 0 0\nM 0 0\nM 1 0\nM 3 0\n";
        assert!(matches!(
            parse_grid(text, Path::new("g"), &net),
            Err(Error::UnmappedNode(2))
        ));
    }

    #[test]
    fn duplicate_mapping_is_rejected() {
        let net = grid_network(2, 2, 1.0, 10.0).unwrap();
        let text = "R 0 0 0\nR 1 1 0\nM 0 0\nM 1 0\nM 2 0\nM 3 0\nM 3 1\n";
        assert!(matches!(
            parse_grid(text, Path::new("g"), &net),
            Err(Error::DuplicateMapping(3))
        ));
    }

    #[test]
    fn save_load_round_trip() {
        let net = net();
        let g = build_synthetic_grid(5, 5, &net).unwrap();
        let text = g.to_file_string(&net);
        let back = parse_grid(&text, Path::new("g"), &net).unwrap();
        assert_eq!(g, back);
    }
}
