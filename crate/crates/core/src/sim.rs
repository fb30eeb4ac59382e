//! Discrete-time fleet simulator.
//!
//! Vehicles follow shortest-path routes through their planned stops. The
//! clock advances one epoch at a time and stops fire when the route reaches
//! them. Positions are derived from accumulated travel time only.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::demand::Request;
use crate::error::{Error, Result};
use crate::hexgrid::{HexGrid, RegionId, MAX_ACTIONS};
use crate::network::{NodeId, Route, StreetNetwork};
use crate::trips::{DelayParams, PlanPassenger, Stop, StopKind, Trip, VehicleView};

/// Allowed slack when replaying realized delays against the limits.
pub const REPLAY_TOLERANCE_S: f64 = 1.0;

const SECONDS_PER_DAY: f64 = 86_400.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RevenueTiming {
    #[default]
    Dropoff,
    Match,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub delta_s: f64,
    pub delays: DelayParams,
    pub revenue_timing: RevenueTiming,
    /// Wall-clock time of day at simulation time zero.
    pub day_start_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Passenger {
    pub request: u64,
    pub origin: NodeId,
    pub destination: NodeId,
    pub arrival_s: f64,
    pub direct_s: f64,
    pub price: f64,
    pub picked_up_at: Option<f64>,
    /// Absolute latest pickup time.
    pub pickup_deadline_s: f64,
    /// Absolute latest drop-off time; tightened at pickup.
    pub dropoff_deadline_s: f64,
}

impl Passenger {
    pub fn onboard(&self) -> bool {
        self.picked_up_at.is_some()
    }

    fn plan_view(&self) -> PlanPassenger {
        PlanPassenger {
            request: self.request,
            origin: self.origin,
            destination: self.destination,
            arrival_s: self.arrival_s,
            direct_s: self.direct_s,
            picked_up_at: self.picked_up_at,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct PlannedStop {
    stop: Stop,
    /// Index into the route's node list.
    index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Location {
    Node(NodeId),
    Edge { from: NodeId, to: NodeId, elapsed_s: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vehicle {
    pub id: usize,
    pub capacity: usize,
    route: Route,
    /// Absolute time at which the vehicle was at `route.nodes[0]`.
    route_start: f64,
    stops: Vec<PlannedStop>,
    passengers: Vec<Passenger>,
    /// Region of the next node the vehicle reaches.
    pub region: RegionId,
    pub dispatched: Option<RegionId>,
}

impl Vehicle {
    fn new(id: usize, capacity: usize, node: NodeId, region: RegionId, clock: f64) -> Self {
        Vehicle {
            id,
            capacity,
            route: Route::single(node),
            route_start: clock,
            stops: Vec::new(),
            passengers: Vec::new(),
            region,
            dispatched: None,
        }
    }

    pub fn route(&self) -> &Route {
        &self.route
    }

    pub fn passengers(&self) -> &[Passenger] {
        &self.passengers
    }

    pub fn onboard_count(&self) -> usize {
        self.passengers.iter().filter(|p| p.onboard()).count()
    }

    pub fn pending_count(&self) -> usize {
        self.passengers.len() - self.onboard_count()
    }

    pub fn planned_stops(&self) -> Vec<Stop> {
        self.stops.iter().map(|p| p.stop).collect()
    }

    pub fn is_idle(&self) -> bool {
        self.stops.is_empty()
    }

    /// Seconds left before each onboard passenger's drop-off deadline.
    pub fn onboard_deadlines(&self, clock: f64) -> Vec<(u64, f64)> {
        self.passengers
            .iter()
            .filter(|p| p.onboard())
            .map(|p| (p.request, p.dropoff_deadline_s - clock))
            .collect()
    }

    /// Seconds left before each pending pickup's deadline.
    pub fn pickup_deadlines(&self, clock: f64) -> Vec<(u64, f64)> {
        self.passengers
            .iter()
            .filter(|p| !p.onboard())
            .map(|p| (p.request, p.pickup_deadline_s - clock))
            .collect()
    }

    /// Index of the last route node reached by `clock`.
    fn segment(&self, clock: f64) -> usize {
        let elapsed = clock - self.route_start;
        self.route.offsets.partition_point(|&o| o <= elapsed).max(1) - 1
    }

    pub fn location(&self, clock: f64) -> Location {
        let i = self.segment(clock);
        let elapsed = clock - self.route_start - self.route.offsets[i];
        if i + 1 == self.route.nodes.len() || elapsed <= 0.0 {
            Location::Node(self.route.nodes[i])
        } else {
            Location::Edge {
                from: self.route.nodes[i],
                to: self.route.nodes[i + 1],
                elapsed_s: elapsed,
            }
        }
    }

    /// First node the vehicle can be rerouted from, and when it gets there.
    pub fn anchor(&self, clock: f64) -> (NodeId, f64) {
        match self.location(clock) {
            Location::Node(n) => (n, clock),
            Location::Edge { .. } => {
                let i = self.segment(clock) + 1;
                (self.route.nodes[i], self.route_start + self.route.offsets[i])
            }
        }
    }

    pub fn view(&self, clock: f64) -> VehicleView {
        let (start, start_time) = self.anchor(clock);
        VehicleView {
            vehicle: self.id,
            capacity: self.capacity,
            start,
            start_time,
            passengers: self.passengers.iter().map(Passenger::plan_view).collect(),
            planned: self.planned_stops(),
        }
    }

    /// Replaces the route with one through `stops`, keeping the edge
    /// currently being traversed.
    fn replan(&mut self, net: &StreetNetwork, clock: f64, stops: &[Stop], target: Option<NodeId>) -> Result<()> {
        let i = self.segment(clock);
        let at_node = matches!(self.location(clock), Location::Node(_));
        let (mut route, start) = if at_node {
            (Route::single(self.route.nodes[i]), clock)
        } else {
            let head = Route {
                nodes: vec![self.route.nodes[i], self.route.nodes[i + 1]],
                offsets: vec![0.0, self.route.offsets[i + 1] - self.route.offsets[i]],
                length_m: 0.0,
            };
            (head, self.route_start + self.route.offsets[i])
        };
        let mut planned = Vec::with_capacity(stops.len());
        for stop in stops {
            let leg = net.shortest_route(route.end(), stop.node)?;
            route.extend(&leg);
            planned.push(PlannedStop {
                stop: *stop,
                index: route.nodes.len() - 1,
            });
        }
        if let Some(t) = target {
            let leg = net.shortest_route(route.end(), t)?;
            route.extend(&leg);
        }
        self.route = route;
        self.route_start = start;
        self.stops = planned;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Match {
        epoch: usize,
        vehicle: usize,
        request: u64,
        price: f64,
    },
    Pickup {
        epoch: usize,
        vehicle: usize,
        request: u64,
        time_s: f64,
        delay_s: f64,
    },
    Dropoff {
        epoch: usize,
        vehicle: usize,
        request: u64,
        time_s: f64,
        detour_s: f64,
        price: f64,
    },
    DropRequest {
        epoch: usize,
        request: u64,
    },
    Reposition {
        epoch: usize,
        vehicle: usize,
        region: usize,
        node: u64,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub revenue: f64,
    pub served: u64,
    pub dropped: u64,
    pub matched: u64,
}

/// Realized service of one delivered passenger.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompletedRide {
    pub request: u64,
    pub vehicle: usize,
    pub pickup_delay_s: f64,
    pub detour_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub revenue: f64,
    pub served: u64,
    pub active: u64,
    pub dropped: u64,
}

#[derive(Debug, Clone)]
pub struct SimState {
    pub epoch: usize,
    pub clock: f64,
    pub config: SimConfig,
    pub vehicles: Vec<Vehicle>,
    /// Requests awaiting a decision this epoch.
    pub active: Vec<Request>,
    pub metrics: Metrics,
    pub completed: Vec<CompletedRide>,
    pub rng: ChaCha8Rng,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Own region.
    pub region: RegionId,
    /// Nearest-neighbour vehicles per action region.
    pub neighbor_counts: [u32; MAX_ACTIONS],
    /// Passengers on board.
    pub onboard: u32,
    /// Batch requests per action region (by origin).
    pub request_counts: [u32; MAX_ACTIONS],
    /// All vehicles per action region.
    pub vehicle_counts: [u32; MAX_ACTIONS],
    pub epoch: usize,
    /// Time of day in [0, 1).
    pub day_fraction: f64,
    /// Number of valid actions; entries past it are zero padding.
    pub n_actions: usize,
}

pub fn init_sim(
    net: &StreetNetwork,
    grid: &HexGrid,
    count: usize,
    capacity: usize,
    config: SimConfig,
    seed: u64,
) -> Result<SimState> {
    if count == 0 || capacity == 0 {
        return Err(Error::Config(format!(
            "need at least one vehicle and one seat (vehicles {count}, capacity {capacity})"
        )));
    }
    if !(config.delta_s > 0.0) {
        return Err(Error::Config(format!(
            "epoch length must be positive, got {}",
            config.delta_s
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = net.node_count();
    let vehicles = (0..count)
        .map(|id| {
            let node = NodeId(rng.random_range(0..n));
            Vehicle::new(id, capacity, node, grid.region_of(node), 0.0)
        })
        .collect();
    Ok(SimState {
        epoch: 0,
        clock: 0.0,
        config,
        vehicles,
        active: Vec::new(),
        metrics: Metrics::default(),
        completed: Vec::new(),
        rng,
    })
}

impl SimState {
    pub fn vehicle(&self, v: usize) -> Result<&Vehicle> {
        self.vehicles.get(v).ok_or(Error::UnknownVehicle(v))
    }

    /// Matched passengers not yet delivered.
    pub fn active_passengers(&self) -> u64 {
        self.vehicles.iter().map(|v| v.passengers.len() as u64).sum()
    }

    pub fn day_fraction(&self) -> f64 {
        (self.config.day_start_s + self.clock).rem_euclid(SECONDS_PER_DAY) / SECONDS_PER_DAY
    }

    pub fn metrics_row(&self) -> MetricsRow {
        MetricsRow {
            epoch: self.epoch,
            revenue: self.metrics.revenue,
            served: self.metrics.served,
            active: self.active_passengers(),
            dropped: self.metrics.dropped,
        }
    }

    pub fn views(&self) -> Vec<VehicleView> {
        self.vehicles.iter().map(|v| v.view(self.clock)).collect()
    }

    /// The `k` vehicles closest to `v` by travel time from `v`'s anchor node,
    /// ties by id, excluding `v`.
    pub fn nearest_vehicles(&self, net: &StreetNetwork, v: usize, k: usize) -> Result<Vec<usize>> {
        let me = self.vehicle(v)?.anchor(self.clock).0;
        let mut others: Vec<(f64, usize)> = self
            .vehicles
            .iter()
            .filter(|u| u.id != v)
            .map(|u| (net.time(me, u.anchor(self.clock).0), u.id))
            .collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Ok(others.into_iter().take(k).map(|(_, id)| id).collect())
    }

    pub fn observe(&self, net: &StreetNetwork, grid: &HexGrid, v: usize, k: usize) -> Result<Observation> {
        let vehicle = self.vehicle(v)?;
        let actions = grid.action_set(vehicle.region)?;
        let slot: HashMap<RegionId, usize> = actions.regions().iter().enumerate().map(|(i, &r)| (r, i)).collect();
        let mut obs = Observation {
            region: vehicle.region,
            neighbor_counts: [0; MAX_ACTIONS],
            onboard: vehicle.onboard_count() as u32,
            request_counts: [0; MAX_ACTIONS],
            vehicle_counts: [0; MAX_ACTIONS],
            epoch: self.epoch,
            day_fraction: self.day_fraction(),
            n_actions: actions.len(),
        };
        for u in &self.vehicles {
            if let Some(&i) = slot.get(&u.region) {
                obs.vehicle_counts[i] += 1;
            }
        }
        for u in self.nearest_vehicles(net, v, k)? {
            if let Some(&i) = slot.get(&self.vehicles[u].region) {
                obs.neighbor_counts[i] += 1;
            }
        }
        for r in &self.active {
            if let Some(&i) = slot.get(&grid.region_of(r.origin)) {
                obs.request_counts[i] += 1;
            }
        }
        Ok(obs)
    }

    /// Commits `trip` to vehicle `v`. An empty trip leaves the passengers
    /// alone; an idle vehicle then heads to the lowest-id node of
    /// `dispatched`.
    pub fn apply_assignment(
        &mut self,
        net: &StreetNetwork,
        grid: &HexGrid,
        v: usize,
        trip: &Trip,
        dispatched: Option<RegionId>,
    ) -> Result<Vec<Event>> {
        let clock = self.clock;
        let epoch = self.epoch;
        let delays = self.config.delays;
        let at_match = self.config.revenue_timing == RevenueTiming::Match;
        let lookup: HashMap<u64, &Request> = self.active.iter().map(|r| (r.id, r)).collect();
        let vehicle = self.vehicles.get_mut(v).ok_or(Error::UnknownVehicle(v))?;
        vehicle.dispatched = dispatched;
        let mut events = Vec::new();

        if trip.is_empty() {
            if vehicle.is_idle() {
                if let Some(d) = dispatched {
                    let target = grid.nodes_in(d).first().copied();
                    if let Some(t) = target.filter(|&t| t != vehicle.route.end()) {
                        vehicle.replan(net, clock, &[], Some(t))?;
                        events.push(Event::Reposition {
                            epoch,
                            vehicle: v,
                            region: d.0,
                            node: net.external_id(t),
                        });
                    }
                }
            }
            return Ok(events);
        }

        let load = vehicle.passengers.len() + trip.requests.len();
        if load > vehicle.capacity {
            return Err(Error::CapacityExceeded {
                vehicle: v,
                load,
                capacity: vehicle.capacity,
            });
        }
        let mut revenue = 0.0;
        for id in &trip.requests {
            let r = lookup.get(id).ok_or_else(|| Error::InvalidRequest {
                id: *id,
                msg: "not in the active batch".into(),
            })?;
            let direct_s = net.time(r.origin, r.destination);
            vehicle.passengers.push(Passenger {
                request: r.id,
                origin: r.origin,
                destination: r.destination,
                arrival_s: r.arrival_s,
                direct_s,
                price: r.price,
                picked_up_at: None,
                pickup_deadline_s: r.arrival_s + delays.max_pickup_s,
                dropoff_deadline_s: r.arrival_s + delays.max_pickup_s + direct_s + delays.max_detour_s,
            });
            events.push(Event::Match {
                epoch,
                vehicle: v,
                request: r.id,
                price: r.price,
            });
            revenue += r.price;
        }
        vehicle.replan(net, clock, &trip.ordering, None)?;
        self.metrics.matched += trip.requests.len() as u64;
        if at_match {
            self.metrics.revenue += revenue;
        }
        Ok(events)
    }

    /// Records every request of the active batch not in `matched` as dropped.
    pub fn drop_unmatched(&mut self, matched: &std::collections::HashSet<u64>) -> Vec<Event> {
        let epoch = self.epoch;
        let mut events = Vec::new();
        for r in &self.active {
            if !matched.contains(&r.id) {
                events.push(Event::DropRequest { epoch, request: r.id });
            }
        }
        self.metrics.dropped += events.len() as u64;
        events
    }

    /// Moves the clock forward one epoch, firing every stop reached.
    pub fn advance_epoch(&mut self, grid: &HexGrid) -> Vec<Event> {
        let new_clock = self.clock + self.config.delta_s;
        let epoch = self.epoch;
        let delays = self.config.delays;
        let credit_at_dropoff = self.config.revenue_timing == RevenueTiming::Dropoff;
        let mut events = Vec::new();
        for vehicle in &mut self.vehicles {
            let mut fired = 0;
            for ps in &vehicle.stops {
                let t = vehicle.route_start + vehicle.route.offsets[ps.index];
                if t > new_clock {
                    break;
                }
                fired += 1;
                let Some(pos) = vehicle.passengers.iter().position(|p| p.request == ps.stop.request) else {
                    log::warn!(
                        "vehicle {} has a stop for unknown request {}",
                        vehicle.id,
                        ps.stop.request
                    );
                    continue;
                };
                match ps.stop.kind {
                    StopKind::Pickup => {
                        let p = &mut vehicle.passengers[pos];
                        p.picked_up_at = Some(t);
                        p.dropoff_deadline_s = t + p.direct_s + delays.max_detour_s;
                        let delay_s = t - p.arrival_s;
                        if delay_s > delays.max_pickup_s + REPLAY_TOLERANCE_S {
                            log::warn!("request {} picked up {delay_s:.1} s after arrival", p.request);
                        }
                        events.push(Event::Pickup {
                            epoch,
                            vehicle: vehicle.id,
                            request: p.request,
                            time_s: t,
                            delay_s,
                        });
                    }
                    StopKind::Dropoff => {
                        let p = vehicle.passengers.remove(pos);
                        let picked = p.picked_up_at.unwrap_or(t);
                        let detour_s = (t - picked) - p.direct_s;
                        if detour_s > delays.max_detour_s + REPLAY_TOLERANCE_S {
                            log::warn!("request {} delivered with {detour_s:.1} s detour", p.request);
                        }
                        self.metrics.served += 1;
                        if credit_at_dropoff {
                            self.metrics.revenue += p.price;
                        }
                        self.completed.push(CompletedRide {
                            request: p.request,
                            vehicle: vehicle.id,
                            pickup_delay_s: picked - p.arrival_s,
                            detour_s,
                        });
                        events.push(Event::Dropoff {
                            epoch,
                            vehicle: vehicle.id,
                            request: p.request,
                            time_s: t,
                            detour_s,
                            price: p.price,
                        });
                    }
                }
            }
            vehicle.stops.drain(..fired);
            debug_assert!(vehicle.onboard_count() <= vehicle.capacity);

            // drop the part of the route already driven
            let i = vehicle.segment(new_clock);
            if i > 0 {
                let base = vehicle.route.offsets[i];
                vehicle.route.nodes.drain(..i);
                vehicle.route.offsets.drain(..i);
                vehicle.route.offsets.iter_mut().for_each(|o| *o -= base);
                vehicle.route_start += base;
                vehicle.stops.iter_mut().for_each(|s| s.index -= i);
            }
            if vehicle.route.nodes.len() == 1 {
                vehicle.route_start = new_clock;
                vehicle.route.length_m = 0.0;
            }
            vehicle.region = grid.region_of(vehicle.anchor(new_clock).0);
        }
        self.clock = new_clock;
        self.epoch += 1;
        events
    }
}

pub fn write_events(path: impl AsRef<Path>, events: &[Event]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_metrics(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(["epoch", "revenue", "served", "active", "dropped"])?;
    }
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hexgrid::build_synthetic_grid;
    use crate::network::grid_network;
    use crate::trips::feasible_trips;

    fn cfg() -> SimConfig {
        SimConfig {
            delta_s: 60.0,
            delays: DelayParams::new(300.0, 600.0).unwrap(),
            revenue_timing: RevenueTiming::Dropoff,
            day_start_s: 0.0,
        }
    }

    fn line() -> (StreetNetwork, HexGrid) {
        // 1 x 11 line, 30 s per edge
        let net = grid_network(1, 11, 0.2, 30.0).unwrap();
        let grid = build_synthetic_grid(1, 1, &net).unwrap();
        (net, grid)
    }

    fn request(id: u64, o: usize, d: usize, at: f64) -> Request {
        Request {
            id,
            origin: NodeId(o),
            destination: NodeId(d),
            arrival_s: at,
            price: 5.0,
        }
    }

    fn place(state: &mut SimState, v: usize, node: usize) {
        state.vehicles[v].route = Route::single(NodeId(node));
        state.vehicles[v].route_start = state.clock;
    }

    #[test]
    fn same_seed_same_placement() {
        let (net, grid) = line();
        let a = init_sim(&net, &grid, 5, 4, cfg(), 11).unwrap();
        let b = init_sim(&net, &grid, 5, 4, cfg(), 11).unwrap();
        assert_eq!(a.vehicles, b.vehicles);
        assert!(init_sim(&net, &grid, 0, 4, cfg(), 1).is_err());
    }

    #[test]
    fn idle_vehicle_stays_put() {
        let (net, grid) = line();
        let mut s = init_sim(&net, &grid, 1, 4, cfg(), 3).unwrap();
        let before = s.vehicles[0].location(s.clock);
        let events = s.advance_epoch(&grid);
        assert!(events.is_empty());
        assert_eq!(s.epoch, 1);
        assert_eq!(s.vehicles[0].location(s.clock), before);
    }

    #[test]
    fn pickup_thirty_seconds_out() {
        let (net, grid) = line();
        let mut s = init_sim(&net, &grid, 1, 4, cfg(), 3).unwrap();
        place(&mut s, 0, 0);
        s.active = vec![request(1, 1, 5, 0.0)];
        let view = s.vehicles[0].view(s.clock);
        let trips = feasible_trips(&view, &net, &grid, None, &s.active, &cfg().delays);
        let events = s.apply_assignment(&net, &grid, 0, &trips[1], None).unwrap();
        assert_eq!(events.len(), 1);
        assert_eq!(s.vehicles[0].pending_count(), 1);
        s.advance_epoch(&grid);
        assert_eq!(s.vehicles[0].onboard_count(), 1);
        // 30 s to reach node 1, then 30 s further: exactly at node 2
        assert_eq!(s.vehicles[0].location(s.clock), Location::Node(NodeId(2)));
        s.advance_epoch(&grid);
        assert_eq!(s.vehicles[0].location(s.clock), Location::Node(NodeId(4)));
        s.advance_epoch(&grid);
        assert_eq!(s.metrics.served, 1);
        assert_eq!(s.metrics.revenue, 5.0);
        assert_eq!(s.completed[0].pickup_delay_s, 30.0);
        assert_eq!(s.completed[0].detour_s, 0.0);
    }

    #[test]
    fn mid_edge_location() {
        let net = grid_network(1, 4, 0.2, 40.0).unwrap();
        let grid = build_synthetic_grid(1, 1, &net).unwrap();
        let mut s = init_sim(&net, &grid, 1, 2, cfg(), 0).unwrap();
        place(&mut s, 0, 0);
        s.active = vec![request(7, 3, 0, 0.0)];
        let view = s.vehicles[0].view(s.clock);
        let trips = feasible_trips(&view, &net, &grid, None, &s.active, &cfg().delays);
        s.apply_assignment(&net, &grid, 0, &trips[1], None).unwrap();
        s.advance_epoch(&grid);
        assert_eq!(
            s.vehicles[0].location(s.clock),
            Location::Edge {
                from: NodeId(1),
                to: NodeId(2),
                elapsed_s: 20.0
            }
        );
        assert_eq!(s.vehicles[0].anchor(s.clock), (NodeId(2), 80.0));
    }

    #[test]
    fn empty_trip_repositions_idle_vehicle() {
        let net = grid_network(4, 4, 0.2, 60.0).unwrap();
        let grid = build_synthetic_grid(2, 2, &net).unwrap();
        let mut s = init_sim(&net, &grid, 1, 4, cfg(), 0).unwrap();
        place(&mut s, 0, 0);
        let far = grid.region_of(NodeId(15));
        let trip = Trip::empty(&s.vehicles[0].view(0.0));
        let events = s.apply_assignment(&net, &grid, 0, &trip, Some(far)).unwrap();
        assert!(matches!(events[..], [Event::Reposition { .. }]));
        assert!(s.vehicles[0].passengers().is_empty());
        assert_eq!(s.vehicles[0].route().end(), grid.nodes_in(far)[0]);
        // same dispatch again is not a new reposition
        let again = s.apply_assignment(&net, &grid, 0, &trip, Some(far)).unwrap();
        assert!(again.is_empty());
    }

    #[test]
    fn single_vehicle_observation() {
        let (net, grid) = line();
        let s = init_sim(&net, &grid, 1, 4, cfg(), 0).unwrap();
        let obs = s.observe(&net, &grid, 0, 6).unwrap();
        assert_eq!(obs.vehicle_counts[0], 1);
        assert_eq!(obs.vehicle_counts.iter().sum::<u32>(), 1);
        assert!(obs.neighbor_counts.iter().all(|&c| c == 0));
        assert!(obs.request_counts.iter().all(|&c| c == 0));
        assert!(s.observe(&net, &grid, 3, 6).is_err());
    }

    #[test]
    fn capacity_is_defended() {
        let (net, grid) = line();
        let mut s = init_sim(&net, &grid, 1, 1, cfg(), 0).unwrap();
        s.active = vec![request(1, 1, 2, 0.0), request(2, 1, 3, 0.0)];
        let trip = Trip {
            requests: vec![1, 2],
            ordering: Vec::new(),
            revenue: 10.0,
            value: 10.0,
            worst_pickup_s: 0.0,
            worst_detour_s: 0.0,
        };
        assert!(matches!(
            s.apply_assignment(&net, &grid, 0, &trip, None),
            Err(Error::CapacityExceeded { .. })
        ));
    }

    #[test]
    fn unmatched_requests_are_dropped() {
        let (net, grid) = line();
        let mut s = init_sim(&net, &grid, 1, 1, cfg(), 0).unwrap();
        s.active = vec![request(1, 1, 2, 0.0), request(2, 1, 3, 0.0)];
        let matched = [2u64].into_iter().collect();
        let ev = s.drop_unmatched(&matched);
        assert_eq!(ev, vec![Event::DropRequest { epoch: 0, request: 1 }]);
        assert_eq!(s.metrics.dropped, 1);
    }
}
