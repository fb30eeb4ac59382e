//! Feasible request combinations ("trips") for one vehicle.
//!
//! A trip is feasible when some ordering of all the vehicle's stops, existing
//! and new, keeps every passenger's pickup delay within `max_pickup_s` and
//! detour delay within `max_detour_s`:
//!
//! - pickup delay = arrival at the origin - request arrival time
//! - detour delay = (drop-off time - pickup time) - direct shortest time
//!
//! Orderings are searched exhaustively up to [`EXHAUSTIVE_STOP_LIMIT`] stops;
//! larger plans fall back to cheapest insertion into the current plan.
//! Among feasible orderings the one with the smallest sum of drop-off times
//! wins, ties going to the lexicographically smallest stop sequence.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::demand::Request;
use crate::hexgrid::{HexGrid, RegionId};
use crate::network::{NodeId, StreetNetwork};

pub const EXHAUSTIVE_STOP_LIMIT: usize = 6;

/// Slack applied to every delay comparison.
pub const DELAY_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayParams {
    /// Maximum pickup delay in seconds.
    pub max_pickup_s: f64,
    /// Maximum detour delay in seconds.
    pub max_detour_s: f64,
}

impl DelayParams {
    pub fn new(max_pickup_s: f64, max_detour_s: f64) -> crate::Result<Self> {
        if !(max_pickup_s > 0.0 && max_detour_s > 0.0) {
            return Err(crate::Error::Config(format!(
                "delay limits must be positive (pickup {max_pickup_s}, detour {max_detour_s})"
            )));
        }
        Ok(DelayParams {
            max_pickup_s,
            max_detour_s,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopKind {
    Pickup,
    Dropoff,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Stop {
    pub request: u64,
    pub node: NodeId,
    pub kind: StopKind,
}

impl Stop {
    fn key(&self) -> (u64, StopKind) {
        (self.request, self.kind)
    }
}

/// A passenger the vehicle has committed to, or is being asked to take.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanPassenger {
    pub request: u64,
    pub origin: NodeId,
    pub destination: NodeId,
    pub arrival_s: f64,
    pub direct_s: f64,
    /// Set once the passenger is on board.
    pub picked_up_at: Option<f64>,
}

impl PlanPassenger {
    pub fn from_request(r: &Request, net: &StreetNetwork) -> Self {
        PlanPassenger {
            request: r.id,
            origin: r.origin,
            destination: r.destination,
            arrival_s: r.arrival_s,
            direct_s: net.time(r.origin, r.destination),
            picked_up_at: None,
        }
    }
}

/// What trip generation needs to know about a vehicle at decision time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleView {
    pub vehicle: usize,
    pub capacity: usize,
    /// First node the vehicle can be rerouted from.
    pub start: NodeId,
    /// Absolute time at which it reaches `start`.
    pub start_time: f64,
    pub passengers: Vec<PlanPassenger>,
    /// Remaining stops in their current order.
    pub planned: Vec<Stop>,
}

impl VehicleView {
    pub fn remaining_capacity(&self) -> usize {
        self.capacity.saturating_sub(self.passengers.len())
    }
}

/// A feasible ordering of a vehicle's stops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Insertion {
    pub ordering: Vec<Stop>,
    /// Sum of drop-off times.
    pub cost: f64,
    pub worst_pickup_s: f64,
    pub worst_detour_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trip {
    /// Request ids, ascending. Empty for the no-op trip.
    pub requests: Vec<u64>,
    pub ordering: Vec<Stop>,
    /// Sum of request prices.
    pub revenue: f64,
    /// Matching weight; equals `revenue` until reweighted with [`trip_value`].
    pub value: f64,
    pub worst_pickup_s: f64,
    pub worst_detour_s: f64,
}

impl Trip {
    /// The always-feasible trip that adds nothing and keeps the current plan.
    pub fn empty(view: &VehicleView) -> Self {
        Trip {
            requests: Vec::new(),
            ordering: view.planned.clone(),
            revenue: 0.0,
            value: 0.0,
            worst_pickup_s: 0.0,
            worst_detour_s: 0.0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.requests.is_empty()
    }
}

/// Linear trip objective `alpha * sum(prices) + beta`.
pub fn trip_value(trip: &Trip, alpha: f64, beta: f64) -> f64 {
    alpha * trip.revenue + beta
}

struct Ctx<'a> {
    net: &'a StreetNetwork,
    params: DelayParams,
    passengers: &'a [PlanPassenger],
    slot: HashMap<u64, usize>,
}

impl<'a> Ctx<'a> {
    fn new(net: &'a StreetNetwork, params: DelayParams, passengers: &'a [PlanPassenger]) -> Self {
        let slot = passengers.iter().enumerate().map(|(i, p)| (p.request, i)).collect();
        Ctx {
            net,
            params,
            passengers,
            slot,
        }
    }

    /// Checks one stop reached at `time`; returns the delay it incurs.
    fn check(&self, stop: &Stop, time: f64, pickups: &[Option<f64>]) -> Option<f64> {
        let p = &self.passengers[self.slot[&stop.request]];
        match stop.kind {
            StopKind::Pickup => {
                let delay = time - p.arrival_s;
                (delay <= self.params.max_pickup_s + DELAY_EPS).then_some(delay)
            }
            StopKind::Dropoff => {
                let picked = pickups[self.slot[&stop.request]]?;
                let delay = time - picked - p.direct_s;
                (delay <= self.params.max_detour_s + DELAY_EPS).then_some(delay)
            }
        }
    }

    fn initial_pickups(&self) -> Vec<Option<f64>> {
        self.passengers.iter().map(|p| p.picked_up_at).collect()
    }

    /// Evaluates a complete ordering from `(start, t0)`.
    fn simulate(&self, start: NodeId, t0: f64, order: &[Stop]) -> Option<Insertion> {
        let mut pickups = self.initial_pickups();
        let mut node = start;
        let mut time = t0;
        let mut cost = 0.0;
        let mut worst_p: f64 = 0.0;
        let mut worst_d: f64 = 0.0;
        for stop in order {
            time += self.net.time(node, stop.node);
            if !time.is_finite() {
                return None;
            }
            node = stop.node;
            let delay = self.check(stop, time, &pickups)?;
            let slot = self.slot[&stop.request];
            match stop.kind {
                StopKind::Pickup => {
                    pickups[slot] = Some(time);
                    worst_p = worst_p.max(delay);
                }
                StopKind::Dropoff => {
                    cost += time;
                    worst_d = worst_d.max(delay);
                }
            }
        }
        Some(Insertion {
            ordering: order.to_vec(),
            cost,
            worst_pickup_s: worst_p,
            worst_detour_s: worst_d,
        })
    }
}

struct Search<'c, 'a> {
    ctx: &'c Ctx<'a>,
    stops: Vec<Stop>,
    order: Vec<usize>,
    pickups: Vec<Option<f64>>,
    best: Option<(f64, Vec<usize>)>,
}

impl Search<'_, '_> {
    fn dfs(&mut self, used: u32, node: NodeId, time: f64, cost: f64) {
        if self.order.len() == self.stops.len() {
            let better = match &self.best {
                None => true,
                Some((c, _)) => cost < *c - DELAY_EPS,
            };
            if better {
                self.best = Some((cost, self.order.clone()));
            }
            return;
        }
        for i in 0..self.stops.len() {
            if used & (1 << i) != 0 {
                continue;
            }
            let stop = self.stops[i];
            let slot = self.ctx.slot[&stop.request];
            if stop.kind == StopKind::Dropoff && self.pickups[slot].is_none() {
                continue;
            }
            let t = time + self.ctx.net.time(node, stop.node);
            if !t.is_finite() || self.ctx.check(&stop, t, &self.pickups).is_none() {
                continue;
            }
            let saved = self.pickups[slot];
            let mut c = cost;
            match stop.kind {
                StopKind::Pickup => self.pickups[slot] = Some(t),
                StopKind::Dropoff => c += t,
            }
            self.order.push(i);
            self.dfs(used | (1 << i), stop.node, t, c);
            self.order.pop();
            self.pickups[slot] = saved;
        }
    }
}

fn all_stops(passengers: &[PlanPassenger]) -> Vec<Stop> {
    let mut stops = Vec::with_capacity(passengers.len() * 2);
    for p in passengers {
        if p.picked_up_at.is_none() {
            stops.push(Stop {
                request: p.request,
                node: p.origin,
                kind: StopKind::Pickup,
            });
        }
        stops.push(Stop {
            request: p.request,
            node: p.destination,
            kind: StopKind::Dropoff,
        });
    }
    stops.sort_by_key(|s| s.key());
    stops
}

/// Finds the best feasible ordering serving the vehicle's current passengers
/// plus `new`, or `None` if no ordering (or no capacity) allows it.
pub fn evaluate_insertion(
    view: &VehicleView,
    new: &[&Request],
    net: &StreetNetwork,
    params: &DelayParams,
) -> Option<Insertion> {
    if view.passengers.len() + new.len() > view.capacity {
        return None;
    }
    let mut passengers = view.passengers.clone();
    passengers.extend(new.iter().map(|r| PlanPassenger::from_request(r, net)));
    let ctx = Ctx::new(net, *params, &passengers);
    let stops = all_stops(&passengers);

    if stops.len() <= EXHAUSTIVE_STOP_LIMIT {
        let mut search = Search {
            ctx: &ctx,
            pickups: ctx.initial_pickups(),
            stops,
            order: Vec::new(),
            best: None,
        };
        search.dfs(0, view.start, view.start_time, 0.0);
        let (_, idx) = search.best?;
        let order: Vec<Stop> = idx.iter().map(|&i| search.stops[i]).collect();
        return ctx.simulate(view.start, view.start_time, &order);
    }

    // cheapest insertion of each new request into the current plan
    let mut plan = view.planned.clone();
    let mut current = ctx.simulate(view.start, view.start_time, &plan)?;
    let mut fresh: Vec<&&Request> = new.iter().collect();
    fresh.sort_by_key(|r| r.id);
    for r in fresh {
        let pickup = Stop {
            request: r.id,
            node: r.origin,
            kind: StopKind::Pickup,
        };
        let dropoff = Stop {
            request: r.id,
            node: r.destination,
            kind: StopKind::Dropoff,
        };
        let mut best: Option<Insertion> = None;
        for i in 0..=plan.len() {
            for j in i..=plan.len() {
                let mut cand = plan.clone();
                cand.insert(i, pickup);
                cand.insert(j + 1, dropoff);
                if let Some(ins) = ctx.simulate(view.start, view.start_time, &cand) {
                    if best.as_ref().is_none_or(|b| ins.cost < b.cost - DELAY_EPS) {
                        best = Some(ins);
                    }
                }
            }
        }
        current = best?;
        plan = current.ordering.clone();
    }
    Some(current)
}

/// Trip serving `reqs` with the given ordering.
pub fn make_trip(reqs: &[&Request], ins: Insertion) -> Trip {
    let mut ids: Vec<u64> = reqs.iter().map(|r| r.id).collect();
    ids.sort_unstable();
    let revenue = reqs.iter().map(|r| r.price).sum();
    Trip {
        requests: ids,
        ordering: ins.ordering,
        revenue,
        value: revenue,
        worst_pickup_s: ins.worst_pickup_s,
        worst_detour_s: ins.worst_detour_s,
    }
}

/// All feasible trips for one vehicle, grown level by level: a combination of
/// size `k` is only evaluated when every size `k - 1` subset was feasible.
///
/// With `region = Some(d)` only requests originating in `d` are considered.
/// The first trip is always the empty trip; the rest are ordered by size and
/// then by request ids.
pub fn feasible_trips(
    view: &VehicleView,
    net: &StreetNetwork,
    grid: &HexGrid,
    region: Option<RegionId>,
    batch: &[Request],
    params: &DelayParams,
) -> Vec<Trip> {
    let committed: HashSet<u64> = view.passengers.iter().map(|p| p.request).collect();
    let mut candidates: Vec<&Request> = batch
        .iter()
        .filter(|r| region.is_none_or(|d| grid.region_of(r.origin) == d))
        .filter(|r| !committed.contains(&r.id))
        .collect();
    candidates.sort_by_key(|r| r.id);
    grow_trips(view, net, &candidates, params)
}

/// Level-wise growth over an explicit candidate list.
pub fn grow_trips(view: &VehicleView, net: &StreetNetwork, candidates: &[&Request], params: &DelayParams) -> Vec<Trip> {
    let mut trips = vec![Trip::empty(view)];
    let room = view.remaining_capacity();
    if room == 0 || candidates.is_empty() {
        return trips;
    }

    let mut level: Vec<Vec<usize>> = Vec::new();
    for (i, r) in candidates.iter().enumerate() {
        if let Some(ins) = evaluate_insertion(view, &[r], net, params) {
            trips.push(make_trip(&[r], ins));
            level.push(vec![i]);
        }
    }

    for _size in 2..=room {
        if level.len() < 2 {
            break;
        }
        let feasible: HashSet<&Vec<usize>> = level.iter().collect();
        let mut next = Vec::new();
        for a in 0..level.len() {
            for b in a + 1..level.len() {
                let (x, y) = (&level[a], &level[b]);
                let k = x.len();
                if x[..k - 1] != y[..k - 1] {
                    // level is sorted, so no later y shares x's prefix
                    break;
                }
                let mut combo = x.clone();
                combo.push(y[k - 1]);
                let closed = (0..combo.len()).all(|skip| {
                    let sub: Vec<usize> = combo
                        .iter()
                        .enumerate()
                        .filter(|&(j, _)| j != skip)
                        .map(|(_, &v)| v)
                        .collect();
                    feasible.contains(&sub)
                });
                if !closed {
                    continue;
                }
                let reqs: Vec<&Request> = combo.iter().map(|&i| candidates[i]).collect();
                if let Some(ins) = evaluate_insertion(view, &reqs, net, params) {
                    trips.push(make_trip(&reqs, ins));
                    next.push(combo);
                }
            }
        }
        level = next;
    }
    trips
}

/// Debug dump of a trip set for offline comparison.
pub fn trips_to_json(trips: &[Trip]) -> String {
    serde_json::to_string_pretty(trips).expect("trips serialize")
}
