//! Slow, independent reference implementations used to check the fast
//! paths: Bellman-Ford travel times, subset-and-permutation trip search,
//! full matching enumeration, exact mutual information, compensated
//! entropy and a brute-force hex neighbourhood scan.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::demand::Request;
use crate::hexgrid::{build_synthetic_grid, HexGrid, RegionId};
use crate::matcher::{CandidateTrip, MatchingInstance};
use crate::mi::{normalize_counts, RegionDistributions};
use crate::network::{NodeId, StreetNetwork};
use crate::trips::{evaluate_insertion, feasible_trips, DelayParams, PlanPassenger, StopKind, VehicleView, DELAY_EPS};

/// All-pairs travel times by edge relaxation; `d[a][b]` from `a` to `b`.
pub fn bellman_ford_all_pairs(net: &StreetNetwork) -> Vec<Vec<f64>> {
    let n = net.node_count();
    let mut all = Vec::with_capacity(n);
    for s in 0..n {
        let mut d = vec![f64::INFINITY; n];
        d[s] = 0.0;
        for _ in 0..n {
            let mut changed = false;
            for e in net.edges() {
                let cand = d[e.from.0] + e.seconds;
                if cand < d[e.to.0] {
                    d[e.to.0] = cand;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        all.push(d);
    }
    all
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct OStop {
    passenger: usize,
    pickup: bool,
}

struct OPass {
    origin: usize,
    destination: usize,
    arrival: f64,
    direct: f64,
    picked: Option<f64>,
}

/// Best feasible plan cost over every stop permutation, or `None`.
fn best_plan(view: &VehicleView, pass: &[OPass], d: &[Vec<f64>], params: &DelayParams) -> Option<f64> {
    let mut stops = Vec::new();
    for (i, p) in pass.iter().enumerate() {
        if p.picked.is_none() {
            stops.push(OStop {
                passenger: i,
                pickup: true,
            });
        }
        stops.push(OStop {
            passenger: i,
            pickup: false,
        });
    }
    let mut best: Option<f64> = None;
    permute(&mut stops, 0, &mut |order| {
        if let Some(c) = evaluate(view, pass, d, params, order) {
            if best.is_none_or(|b| c < b) {
                best = Some(c);
            }
        }
    });
    best
}

fn permute(v: &mut Vec<OStop>, k: usize, f: &mut impl FnMut(&[OStop])) {
    if k == v.len() {
        f(v);
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permute(v, k + 1, f);
        v.swap(k, i);
    }
}

fn evaluate(view: &VehicleView, pass: &[OPass], d: &[Vec<f64>], params: &DelayParams, order: &[OStop]) -> Option<f64> {
    let mut pickup_time: Vec<Option<f64>> = pass.iter().map(|p| p.picked).collect();
    let mut node = view.start.0;
    let mut t = view.start_time;
    let mut cost = 0.0;
    for s in order {
        let p = &pass[s.passenger];
        if s.pickup {
            t += d[node][p.origin];
            node = p.origin;
            if t - p.arrival > params.max_pickup_s + DELAY_EPS {
                return None;
            }
            pickup_time[s.passenger] = Some(t);
        } else {
            let pu = pickup_time[s.passenger]?;
            t += d[node][p.destination];
            node = p.destination;
            if (t - pu) - p.direct > params.max_detour_s + DELAY_EPS {
                return None;
            }
            cost += t;
        }
    }
    Some(cost)
}

/// Every feasible request subset (ids ascending) with its best plan cost.
/// Only meant for a handful of requests.
pub fn trip_oracle(
    view: &VehicleView,
    d: &[Vec<f64>],
    candidates: &[&Request],
    params: &DelayParams,
) -> BTreeMap<Vec<u64>, f64> {
    let base: Vec<OPass> = view
        .passengers
        .iter()
        .map(|p| OPass {
            origin: p.origin.0,
            destination: p.destination.0,
            arrival: p.arrival_s,
            direct: d[p.origin.0][p.destination.0],
            picked: p.picked_up_at,
        })
        .collect();
    let room = view.capacity.saturating_sub(view.passengers.len());
    let mut out = BTreeMap::new();
    for mask in 0u32..(1 << candidates.len()) {
        let chosen: Vec<&Request> = (0..candidates.len())
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| candidates[i])
            .collect();
        if chosen.len() > room {
            continue;
        }
        let mut pass: Vec<OPass> = base
            .iter()
            .map(|p| OPass {
                origin: p.origin,
                destination: p.destination,
                arrival: p.arrival,
                direct: p.direct,
                picked: p.picked,
            })
            .collect();
        pass.extend(chosen.iter().map(|r| OPass {
            origin: r.origin.0,
            destination: r.destination.0,
            arrival: r.arrival_s,
            direct: d[r.origin.0][r.destination.0],
            picked: None,
        }));
        if let Some(cost) = best_plan(view, &pass, d, params) {
            let mut ids: Vec<u64> = chosen.iter().map(|r| r.id).collect();
            ids.sort_unstable();
            out.insert(ids, cost);
        }
    }
    out
}

/// Checks a stop ordering against the limits and returns its drop-off
/// time sum, recomputed from scratch.
pub fn replay_ordering(
    view: &VehicleView,
    d: &[Vec<f64>],
    new: &[&Request],
    ordering: &[crate::trips::Stop],
    params: &DelayParams,
) -> Option<f64> {
    let mut pass: Vec<OPass> = Vec::new();
    let mut slot: HashMap<u64, usize> = HashMap::new();
    for p in &view.passengers {
        slot.insert(p.request, pass.len());
        pass.push(OPass {
            origin: p.origin.0,
            destination: p.destination.0,
            arrival: p.arrival_s,
            direct: d[p.origin.0][p.destination.0],
            picked: p.picked_up_at,
        });
    }
    for r in new {
        slot.insert(r.id, pass.len());
        pass.push(OPass {
            origin: r.origin.0,
            destination: r.destination.0,
            arrival: r.arrival_s,
            direct: d[r.origin.0][r.destination.0],
            picked: None,
        });
    }
    let order: Vec<OStop> = ordering
        .iter()
        .map(|s| {
            Some(OStop {
                passenger: *slot.get(&s.request)?,
                pickup: s.kind == StopKind::Pickup,
            })
        })
        .collect::<Option<_>>()?;
    evaluate(view, &pass, d, params, &order)
}

/// Optimal objective by trying every combination of one trip per vehicle.
pub fn enumerate_matching(instance: &MatchingInstance) -> f64 {
    fn go(inst: &MatchingInstance, v: usize, used: &mut BTreeSet<u64>, acc: f64, best: &mut f64) {
        if v == inst.vehicles.len() {
            *best = best.max(acc);
            return;
        }
        for t in &inst.vehicles[v] {
            if t.requests.iter().any(|r| used.contains(r)) {
                continue;
            }
            used.extend(t.requests.iter().copied());
            go(inst, v + 1, used, acc + t.value, best);
            for r in &t.requests {
                used.remove(r);
            }
        }
    }
    let mut best = f64::NEG_INFINITY;
    go(instance, 0, &mut BTreeSet::new(), 0.0, &mut best);
    best
}

/// Exact mutual information of the empirical joint: contexts are the
/// distinct `p_e` vectors, each sample weighing `1/n`.
pub fn exact_mi(samples: &[RegionDistributions]) -> f64 {
    let n = samples.len() as f64;
    let dim = samples[0].p_v.len();
    let mut groups: BTreeMap<Vec<u64>, Vec<&RegionDistributions>> = BTreeMap::new();
    for s in samples {
        groups
            .entry(s.p_e.iter().map(|x| x.to_bits()).collect())
            .or_default()
            .push(s);
    }
    let mut marginal = vec![0.0; dim];
    for s in samples {
        for v in 0..dim {
            marginal[v] += s.p_v[v] / n;
        }
    }
    let mut mi = 0.0;
    for members in groups.values() {
        let pe = members.len() as f64 / n;
        for v in 0..dim {
            let cond = members.iter().map(|s| s.p_v[v]).sum::<f64>() / members.len() as f64;
            let joint = pe * cond;
            if joint > 0.0 {
                mi += joint * (joint / (pe * marginal[v])).ln();
            }
        }
    }
    mi
}

/// Entropy with Neumaier-compensated summation.
pub fn compensated_entropy(p: &[f64]) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for &x in p {
        if x <= 0.0 {
            continue;
        }
        let term = -x * x.ln();
        let t = sum + term;
        if sum.abs() >= term.abs() {
            comp += (sum - t) + term;
        } else {
            comp += (term - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Regions within hex distance 2 of `region`, ordered by distance then id.
pub fn action_set_scan(grid: &HexGrid, region: RegionId) -> Vec<RegionId> {
    let me = grid.axial(region);
    let mut found: Vec<(i64, RegionId)> = grid
        .regions()
        .map(|r| (grid.axial(r).distance(me), r))
        .filter(|&(d, _)| d <= 2)
        .collect();
    found.sort();
    found.into_iter().map(|(_, r)| r).collect()
}

/// Outcome of one randomized comparison suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub cases: usize,
    pub failures: usize,
    pub detail: Option<String>,
}

/// Strongly connected random network: a directed ring plus random chords,
/// travel times in [5, 120) seconds.
pub fn random_network<R: Rng>(rng: &mut R, n: usize) -> StreetNetwork {
    let nodes: Vec<(u64, f64, f64)> = (0..n as u64)
        .map(|i| (i, rng.random_range(0.0..2.0), rng.random_range(0.0..2.0)))
        .collect();
    let mut edges = Vec::new();
    for i in 0..n as u64 {
        edges.push((i, (i + 1) % n as u64, rng.random_range(5.0..120.0), 100.0));
    }
    for _ in 0..2 * n {
        let a = rng.random_range(0..n as u64);
        let b = rng.random_range(0..n as u64);
        if a != b {
            edges.push((a, b, rng.random_range(5.0..120.0), 100.0));
        }
    }
    StreetNetwork::new(nodes, edges).expect("ring keeps every node connected")
}

/// Random instance with up to `max_vehicles` vehicles, `max_requests`
/// requests and `max_trips` candidate trips per vehicle.
pub fn random_matching_instance<R: Rng>(
    rng: &mut R,
    max_vehicles: usize,
    max_requests: usize,
    max_trips: usize,
) -> MatchingInstance {
    let nv = rng.random_range(1..=max_vehicles);
    let nr = rng.random_range(1..=max_requests) as u64;
    let vehicles = (0..nv)
        .map(|_| {
            let mut trips = vec![CandidateTrip::empty()];
            let extra = rng.random_range(0..max_trips);
            let mut seen = BTreeSet::new();
            for _ in 0..extra {
                let size = rng.random_range(1..=3.min(nr as usize));
                let mut reqs: Vec<u64> = (0..nr).collect();
                reqs.shuffle(rng);
                reqs.truncate(size);
                reqs.sort_unstable();
                if seen.insert(reqs.clone()) {
                    // integer values make exact ties common
                    let value = f64::from(rng.random_range(1..20u32));
                    trips.push(CandidateTrip::new(reqs, value));
                }
            }
            trips
        })
        .collect();
    MatchingInstance { vehicles }
}

/// A vehicle, a batch and delay limits small enough for [`trip_oracle`].
pub struct TripCase {
    pub net: StreetNetwork,
    pub grid: HexGrid,
    pub view: VehicleView,
    pub batch: Vec<Request>,
    pub params: DelayParams,
}

pub fn random_trip_case<R: Rng>(rng: &mut R) -> TripCase {
    let n = rng.random_range(5..10);
    let net = random_network(rng, n);
    let grid = build_synthetic_grid(1, 1, &net).expect("one region always builds");
    let params =
        DelayParams::new(rng.random_range(120.0..400.0), rng.random_range(100.0..600.0)).expect("positive limits");
    let start = NodeId(rng.random_range(0..n));
    let start_time = rng.random_range(60.0..120.0);
    let mut view = VehicleView {
        vehicle: 0,
        capacity: rng.random_range(1..=3),
        start,
        start_time,
        passengers: Vec::new(),
        planned: Vec::new(),
    };
    let mut next_id = 0u64;
    let mut request = |rng: &mut R| {
        let o = rng.random_range(0..n);
        let mut d = rng.random_range(0..n);
        while d == o {
            d = rng.random_range(0..n);
        }
        next_id += 1;
        Request {
            id: next_id,
            origin: NodeId(o),
            destination: NodeId(d),
            arrival_s: start_time - rng.random_range(0.0..60.0),
            price: f64::from(rng.random_range(3..15u32)),
        }
    };
    // sometimes the vehicle already serves a passenger
    if view.capacity > 1 && rng.random_bool(0.5) {
        let r = request(rng);
        if let Some(ins) = evaluate_insertion(&view, &[&r], &net, &params) {
            view.passengers.push(PlanPassenger::from_request(&r, &net));
            view.planned = ins.ordering;
        }
    }
    let batch = (0..rng.random_range(1..=5)).map(|_| request(rng)).collect();
    TripCase {
        net,
        grid,
        view,
        batch,
        params,
    }
}

/// Samples from a random discrete joint: a few distinct contexts, each
/// repeated with its own vehicle distributions.
pub fn random_joint<R: Rng>(rng: &mut R, max_regions: usize) -> Vec<RegionDistributions> {
    let dim = rng.random_range(2..=max_regions);
    let contexts = rng.random_range(1..=5);
    let mut out = Vec::new();
    for c in 0..contexts {
        let mut p_e = vec![0.0; dim];
        p_e[c % dim] += 1.0 + c as f64;
        p_e[rng.random_range(0..dim)] += 1.0;
        let p_e = normalize_counts(&p_e);
        for _ in 0..rng.random_range(1..=4) {
            let raw: Vec<f64> = (0..dim)
                .map(|_| {
                    if rng.random_bool(0.3) {
                        0.0
                    } else {
                        rng.random_range(0.0..1.0)
                    }
                })
                .collect();
            out.push(RegionDistributions {
                epoch: out.len(),
                p_v: normalize_counts(&raw),
                p_e: p_e.clone(),
            });
        }
    }
    out
}

/// Runs every comparison suite with `seed`.
pub fn run_oracle_suites(seed: u64) -> crate::Result<Vec<SuiteResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();

    let mut failures = 0;
    for _ in 0..30 {
        let n = rng.random_range(3..25);
        let net = random_network(&mut rng, n);
        let bf = bellman_ford_all_pairs(&net);
        for a in net.nodes() {
            for b in net.nodes() {
                if (net.time(a, b) - bf[a.0][b.0]).abs() > 1e-9 {
                    failures += 1;
                }
            }
        }
    }
    results.push(SuiteResult {
        name: "shortest paths",
        cases: 30,
        failures,
        detail: None,
    });

    let mut failures = 0;
    let mut cases = 0;
    for _ in 0..20 {
        let net = random_network(&mut rng, 12);
        let grid = build_synthetic_grid(rng.random_range(1..8), rng.random_range(1..8), &net)?;
        for r in grid.regions() {
            cases += 1;
            let fast: Vec<RegionId> = grid.action_set(r)?.regions().to_vec();
            let mut slow = action_set_scan(&grid, r);
            // same membership; fast order is self, ring 1, ring 2, each by id
            slow.sort_by_key(|x| (grid.axial(*x).distance(grid.axial(r)), *x));
            if fast != slow {
                failures += 1;
            }
        }
    }
    results.push(SuiteResult {
        name: "action sets",
        cases,
        failures,
        detail: None,
    });

    let mut failures = 0;
    for _ in 0..100 {
        let case = random_trip_case(&mut rng);
        if !trips_agree(&case) {
            failures += 1;
        }
    }
    results.push(SuiteResult {
        name: "trip generation",
        cases: 100,
        failures,
        detail: None,
    });

    let mut failures = 0;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let inst = random_matching_instance(&mut rng, 6, 8, 20);
        let a = crate::matcher::solve(&inst)?;
        let best = enumerate_matching(&inst);
        worst = worst.max((a.objective - best).abs());
        if a.objective != best || !crate::matcher::verify(&inst, &a.decisions(&inst)).is_empty() {
            failures += 1;
        }
    }
    results.push(SuiteResult {
        name: "matching optimality",
        cases: 100,
        failures,
        detail: Some(format!("max gap {worst:.3e}")),
    });

    let mut failures = 0;
    for _ in 0..200 {
        let samples = random_joint(&mut rng, 10);
        let exact = exact_mi(&samples);
        let tab = crate::mi::TabularPosterior::fit(&samples)?;
        let b = crate::mi::mi_lower_bound(&samples, &tab)?.bound;
        if (b - exact).abs() > 1e-9 {
            failures += 1;
        }
    }
    results.push(SuiteResult {
        name: "mutual information",
        cases: 200,
        failures,
        detail: None,
    });

    let mut failures = 0;
    for _ in 0..200 {
        let dim = rng.random_range(1..=10);
        let p = normalize_counts(&(0..dim).map(|_| rng.random_range(0.0..1.0)).collect::<Vec<_>>());
        if (crate::mi::entropy(&p)? - compensated_entropy(&p)).abs() > 1e-12 {
            failures += 1;
        }
    }
    results.push(SuiteResult {
        name: "entropy",
        cases: 200,
        failures,
        detail: None,
    });

    Ok(results)
}

/// True when trip generation and the oracle agree on the feasible request
/// sets and on each set's best plan cost.
pub fn trips_agree(case: &TripCase) -> bool {
    let d = bellman_ford_all_pairs(&case.net);
    let mut refs: Vec<&Request> = case.batch.iter().collect();
    refs.sort_by_key(|r| r.id);
    let oracle = trip_oracle(&case.view, &d, &refs, &case.params);
    let trips = feasible_trips(&case.view, &case.net, &case.grid, None, &case.batch, &case.params);
    let fast: BTreeMap<Vec<u64>, f64> = trips
        .iter()
        .filter(|t| !t.is_empty())
        .map(|t| {
            let new: Vec<&Request> = case.batch.iter().filter(|r| t.requests.contains(&r.id)).collect();
            let cost = replay_ordering(&case.view, &d, &new, &t.ordering, &case.params).unwrap_or(f64::NAN);
            (t.requests.clone(), cost)
        })
        .collect();
    let slow: BTreeMap<&Vec<u64>, &f64> = oracle.iter().filter(|(k, _)| !k.is_empty()).collect();
    fast.len() == slow.len()
        && fast
            .iter()
            .all(|(k, c)| slow.get(k).is_some_and(|s| (*s - c).abs() <= 1e-6))
}
