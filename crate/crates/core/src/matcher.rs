//! Exact vehicle/trip assignment.
//!
//! Maximises the total value of chosen trips subject to: every vehicle takes
//! exactly one of its candidate trips (the empty trip included), and every
//! request is served by at most one chosen trip. The instance is split into
//! independent components (vehicles linked by a shared request) and each is
//! solved by depth-first branch and bound.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for objective comparisons.
pub const OBJ_EPS: f64 = 1e-9;

/// Default cap on branch-and-bound nodes per component.
pub const DEFAULT_NODE_BUDGET: usize = 2_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateTrip {
    pub requests: Vec<u64>,
    pub value: f64,
}

impl CandidateTrip {
    pub fn empty() -> Self {
        CandidateTrip {
            requests: Vec::new(),
            value: 0.0,
        }
    }

    pub fn new(requests: Vec<u64>, value: f64) -> Self {
        CandidateTrip { requests, value }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingInstance {
    /// `vehicles[v]` is the candidate list of vehicle `v`.
    pub vehicles: Vec<Vec<CandidateTrip>>,
}

impl MatchingInstance {
    pub fn validate(&self) -> Result<()> {
        for (v, trips) in self.vehicles.iter().enumerate() {
            if !trips.iter().any(|t| t.requests.is_empty()) {
                return Err(Error::MalformedInstance(format!("vehicle {v} has no empty trip")));
            }
            if let Some(t) = trips.iter().find(|t| !t.value.is_finite()) {
                return Err(Error::MalformedInstance(format!(
                    "vehicle {v} has non-finite trip value {}",
                    t.value
                )));
            }
            for t in trips {
                let uniq: HashSet<_> = t.requests.iter().collect();
                if uniq.len() != t.requests.len() {
                    return Err(Error::MalformedInstance(format!(
                        "vehicle {v} has a trip repeating a request"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("instance serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn objective_of(&self, chosen: &[usize]) -> f64 {
        chosen.iter().enumerate().map(|(v, &i)| self.vehicles[v][i].value).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// Index into each vehicle's candidate list.
    pub chosen: Vec<usize>,
    pub objective: f64,
    /// False when some component hit the node budget and was solved greedily.
    pub optimal: bool,
}

impl Assignment {
    /// Expands to binary decision variables `x[v][f]`.
    pub fn decisions(&self, instance: &MatchingInstance) -> Vec<Vec<u8>> {
        instance
            .vehicles
            .iter()
            .zip(&self.chosen)
            .map(|(trips, &c)| (0..trips.len()).map(|f| u8::from(f == c)).collect())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SolverOptions {
    pub node_budget: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            node_budget: DEFAULT_NODE_BUDGET,
        }
    }
}

pub fn solve(instance: &MatchingInstance) -> Result<Assignment> {
    solve_with(instance, SolverOptions::default())
}

pub fn solve_with(instance: &MatchingInstance, opts: SolverOptions) -> Result<Assignment> {
    instance.validate()?;
    let n = instance.vehicles.len();
    let mut chosen = vec![0usize; n];
    let mut optimal = true;
    for comp in components(instance) {
        let (picks, exact) = solve_component(instance, &comp, opts.node_budget);
        if !exact {
            log::warn!(
                "matching component of {} vehicles exceeded {} nodes; using greedy assignment",
                comp.len(),
                opts.node_budget
            );
            optimal = false;
        }
        for (v, c) in comp.into_iter().zip(picks) {
            chosen[v] = c;
        }
    }
    let objective = instance.objective_of(&chosen);
    Ok(Assignment {
        chosen,
        objective,
        optimal,
    })
}

/// Vehicles grouped by shared candidate requests, each group ascending.
fn components(instance: &MatchingInstance) -> Vec<Vec<usize>> {
    let n = instance.vehicles.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let mut owner: HashMap<u64, usize> = HashMap::new();
    for (v, trips) in instance.vehicles.iter().enumerate() {
        for r in trips.iter().flat_map(|t| &t.requests) {
            match owner.get(r) {
                Some(&u) => {
                    let (a, b) = (find(&mut parent, u), find(&mut parent, v));
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                    }
                }
                None => {
                    owner.insert(*r, v);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for v in 0..n {
        let root = find(&mut parent, v);
        groups.entry(root).or_default().push(v);
    }
    groups.into_values().collect()
}

struct Bnb<'a> {
    trips: Vec<&'a [CandidateTrip]>,
    /// Per vehicle, the order in which trips are branched on.
    order: Vec<Vec<usize>>,
    /// Per vehicle, trip indices by value descending (ties by index).
    by_value: Vec<Vec<usize>>,
    used: HashSet<u64>,
    current: Vec<usize>,
    nodes: usize,
    budget: usize,
}

enum Goal {
    /// Best objective so far; only strictly better leaves are accepted.
    Maximize(Option<f64>),
    /// First leaf, in branching order, reaching this objective.
    Reach(f64),
}

impl Bnb<'_> {
    fn compatible(&self, t: &CandidateTrip) -> bool {
        t.requests.iter().all(|r| !self.used.contains(r))
    }

    /// Conflict-relaxed bound: each remaining vehicle takes its best trip
    /// that avoids requests already used above it in the tree.
    fn bound(&self, from: usize) -> f64 {
        (from..self.trips.len())
            .map(|v| {
                self.by_value[v]
                    .iter()
                    .map(|&i| &self.trips[v][i])
                    .find(|t| self.compatible(t))
                    .map_or(f64::NEG_INFINITY, |t| t.value)
            })
            .sum()
    }

    /// Returns `Err(())` when the node budget runs out, `Ok(true)` when a
    /// `Reach` goal is met.
    fn dfs(&mut self, v: usize, value: f64, goal: &mut Goal, found: &mut Vec<usize>) -> std::result::Result<bool, ()> {
        self.nodes += 1;
        if self.nodes > self.budget {
            return Err(());
        }
        if v == self.trips.len() {
            return Ok(match goal {
                Goal::Maximize(best) => {
                    if best.is_none_or(|b| value > b + OBJ_EPS) {
                        *best = Some(value);
                        found.clone_from(&self.current);
                    }
                    false
                }
                Goal::Reach(target) => {
                    let hit = value >= *target - OBJ_EPS;
                    if hit {
                        found.clone_from(&self.current);
                    }
                    hit
                }
            });
        }
        let bound = value + self.bound(v);
        let prune = match goal {
            Goal::Maximize(Some(b)) => bound <= *b + OBJ_EPS,
            Goal::Maximize(None) => false,
            Goal::Reach(target) => bound < *target - OBJ_EPS,
        };
        if prune {
            return Ok(false);
        }
        for k in 0..self.order[v].len() {
            let i = self.order[v][k];
            let trip = &self.trips[v][i];
            if !self.compatible(trip) {
                continue;
            }
            for r in &trip.requests {
                self.used.insert(*r);
            }
            self.current.push(i);
            let res = self.dfs(v + 1, value + trip.value, goal, found);
            self.current.pop();
            for r in &trip.requests {
                self.used.remove(r);
            }
            if res? {
                return Ok(true);
            }
        }
        Ok(false)
    }
}

/// Optimal value first (best-first branching, strict pruning), then the
/// lexicographically smallest choice vector reaching it (index-order
/// branching, stopping at the first hit).
fn solve_component(instance: &MatchingInstance, comp: &[usize], budget: usize) -> (Vec<usize>, bool) {
    let trips: Vec<&[CandidateTrip]> = comp.iter().map(|&v| instance.vehicles[v].as_slice()).collect();
    let by_value: Vec<Vec<usize>> = trips
        .iter()
        .map(|ts| {
            let mut idx: Vec<usize> = (0..ts.len()).collect();
            idx.sort_by(|&a, &b| ts[b].value.total_cmp(&ts[a].value).then(a.cmp(&b)));
            idx
        })
        .collect();
    let mut bnb = Bnb {
        order: by_value.clone(),
        by_value,
        trips,
        used: HashSet::new(),
        current: Vec::with_capacity(comp.len()),
        nodes: 0,
        budget,
    };
    let mut best = Vec::new();
    let mut goal = Goal::Maximize(None);
    if bnb.dfs(0, 0.0, &mut goal, &mut best).is_err() {
        return (greedy(&bnb.trips), false);
    }
    let Goal::Maximize(Some(optimum)) = goal else {
        unreachable!("the all-empty assignment is always feasible")
    };
    bnb.order = bnb.trips.iter().map(|ts| (0..ts.len()).collect()).collect();
    bnb.nodes = 0;
    let mut smallest = Vec::new();
    match bnb.dfs(0, 0.0, &mut Goal::Reach(optimum), &mut smallest) {
        Ok(true) => (smallest, true),
        // the optimum is known, so keep it even without the tie-break
        _ => (best, true),
    }
}

/// Best-value-first greedy fallback over one component.
fn greedy(trips: &[&[CandidateTrip]]) -> Vec<usize> {
    let mut all: Vec<(usize, usize)> = trips
        .iter()
        .enumerate()
        .flat_map(|(v, ts)| (0..ts.len()).map(move |i| (v, i)))
        .collect();
    all.sort_by(|&(va, ia), &(vb, ib)| {
        trips[vb][ib]
            .value
            .total_cmp(&trips[va][ia].value)
            .then((va, ia).cmp(&(vb, ib)))
    });
    let mut picks: Vec<Option<usize>> = vec![None; trips.len()];
    let mut used = HashSet::new();
    for (v, i) in all {
        if picks[v].is_some() {
            continue;
        }
        let t = &trips[v][i];
        if t.requests.iter().any(|r| used.contains(r)) {
            continue;
        }
        used.extend(t.requests.iter().copied());
        picks[v] = Some(i);
    }
    picks
        .into_iter()
        .enumerate()
        .map(|(v, p)| {
            p.unwrap_or_else(|| {
                trips[v]
                    .iter()
                    .position(|t| t.requests.is_empty())
                    .expect("validated instance has an empty trip")
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "constraint", rename_all = "snake_case")]
pub enum Violation {
    /// Decision matrix shape does not match the instance.
    Shape {
        vehicle: Option<usize>,
        expected: usize,
        found: usize,
    },
    /// A vehicle does not take exactly one trip.
    OneTripPerVehicle { vehicle: usize, count: u32 },
    /// A request is covered by more than one chosen trip.
    RequestOnce { request: u64, vehicles: Vec<usize> },
    /// A decision variable is neither 0 nor 1.
    Binary { vehicle: usize, trip: usize, value: u8 },
}

/// Checks decision variables against the three constraint families.
/// An empty report means the assignment is valid.
pub fn verify(instance: &MatchingInstance, x: &[Vec<u8>]) -> Vec<Violation> {
    let mut out = Vec::new();
    if x.len() != instance.vehicles.len() {
        out.push(Violation::Shape {
            vehicle: None,
            expected: instance.vehicles.len(),
            found: x.len(),
        });
        return out;
    }
    let mut cover: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (v, (row, trips)) in x.iter().zip(&instance.vehicles).enumerate() {
        if row.len() != trips.len() {
            out.push(Violation::Shape {
                vehicle: Some(v),
                expected: trips.len(),
                found: row.len(),
            });
            continue;
        }
        let mut count = 0u32;
        for (f, &val) in row.iter().enumerate() {
            if val > 1 {
                out.push(Violation::Binary {
                    vehicle: v,
                    trip: f,
                    value: val,
                });
            }
            if val != 0 {
                count += u32::from(val);
                for r in &trips[f].requests {
                    cover.entry(*r).or_default().push(v);
                }
            }
        }
        if count != 1 {
            out.push(Violation::OneTripPerVehicle { vehicle: v, count });
        }
    }
    for (request, vehicles) in cover {
        if vehicles.len() > 1 {
            out.push(Violation::RequestOnce { request, vehicles });
        }
    }
    out
}
