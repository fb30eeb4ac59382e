//! Experiment orchestration: configuration, the per-epoch dispatch and
//! matching loop, baselines, seeded runs, sweeps and output files.
//!
//! Each epoch the clock advances first, then the batch of requests that
//! arrived during that epoch is dispatched and matched at its end.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::demand::{batch_requests, hotspot_rates, load_requests, synth_hotspot_demand, Batch, Pricing, Request};
use crate::dispatch::{
    mean_action, save_checkpoint, train, write_train_log, Encoder, Learner, MeanAction, TrainConfig, TrainEnv,
    TrainLogRow, Transition, Variant,
};
use crate::error::{Error, Result};
use crate::hexgrid::{build_synthetic_grid_with, load_grid, HexGrid, RegionId, DEFAULT_DIAMETER_KM};
use crate::matcher::{solve, CandidateTrip, MatchingInstance};
use crate::mi::{
    fit_posterior, instantaneous_bound, mi_lower_bound, total_reward, write_mi_log, MiLogRow, MlpPosterior,
    RegionDistributions,
};
use crate::network::{grid_network, load_network, StreetNetwork};
use crate::sim::{
    init_sim, write_events, write_metrics, CompletedRide, Event, MetricsRow, RevenueTiming, SimConfig, SimState,
};
use crate::trips::{evaluate_insertion, feasible_trips, make_trip, trip_value, DelayParams, Trip, DELAY_EPS};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "RIDEPOOL_OUT";

/// Posterior training samples kept across episodes.
const MI_POOL: usize = 5_000;
const MI_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSource {
    /// Network file; when absent a synthetic grid network is built.
    pub file: Option<PathBuf>,
    pub rows: usize,
    pub cols: usize,
    pub spacing_km: f64,
    pub edge_seconds: f64,
}

impl Default for NetworkSource {
    fn default() -> Self {
        NetworkSource {
            file: None,
            rows: 10,
            cols: 10,
            spacing_km: 0.2,
            edge_seconds: 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSource {
    pub file: Option<PathBuf>,
    pub rows: usize,
    pub cols: usize,
    pub diameter_km: f64,
}

impl Default for GridSource {
    fn default() -> Self {
        GridSource {
            file: None,
            rows: 7,
            cols: 7,
            diameter_km: DEFAULT_DIAMETER_KM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemandConfig {
    /// Request file replayed every episode; when absent demand is synthetic.
    pub file: Option<PathBuf>,
    /// Hotspot regions as (row, col) of the hex lattice.
    pub hotspots: Vec<[usize; 2]>,
    /// Expected requests per epoch in each hotspot region.
    pub hot_rate: f64,
    /// Expected requests per epoch in every other region.
    pub background_rate: f64,
    pub pricing: Pricing,
}

impl Default for DemandConfig {
    fn default() -> Self {
        DemandConfig {
            file: None,
            hotspots: vec![[1, 1], [5, 5]],
            hot_rate: 1.5,
            background_rate: 0.02,
            pricing: Pricing::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub network: NetworkSource,
    pub grid: GridSource,
    pub demand: DemandConfig,
    /// Fleet size (NV).
    pub vehicles: usize,
    /// Seats per vehicle (C).
    pub capacity: usize,
    /// Pickup delay limit in seconds (PD).
    pub max_pickup_s: f64,
    pub max_detour_s: f64,
    pub delta_s: f64,
    pub epochs: usize,
    pub revenue_timing: RevenueTiming,
    pub day_start_s: f64,
    /// Trip weight in the matching objective: `alpha * revenue + beta`.
    pub trip_alpha: f64,
    pub trip_beta: f64,
    pub variant: Variant,
    pub seeds: Vec<u64>,
    /// Evaluation episodes per seed after training.
    pub eval_episodes: usize,
    pub output_dir: Option<PathBuf>,
    /// Write per-episode event logs and metrics.
    pub write_episodes: bool,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            network: NetworkSource::default(),
            grid: GridSource::default(),
            demand: DemandConfig::default(),
            vehicles: 20,
            capacity: 4,
            max_pickup_s: 300.0,
            max_detour_s: 600.0,
            delta_s: 60.0,
            epochs: 60,
            revenue_timing: RevenueTiming::Dropoff,
            day_start_s: 8.0 * 3600.0,
            trip_alpha: 1.0,
            trip_beta: 0.0,
            variant: Variant::Dqn,
            seeds: vec![0, 1, 2, 3, 4],
            eval_episodes: 5,
            output_dir: None,
            write_episodes: true,
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config, resolving relative file paths against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::from(e).context(format!("reading config {}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| e.context(format!("config {}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for f in [&mut cfg.network.file, &mut cfg.grid.file, &mut cfg.demand.file] {
            if let Some(p) = f.as_mut() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.vehicles == 0 || self.capacity == 0 || self.epochs == 0 {
            return bad("vehicles, capacity and epochs must be positive");
        }
        if !(self.delta_s > 0.0) {
            return bad("epoch length must be positive");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        if !(self.trip_alpha > 0.0) {
            return bad("trip_alpha must be positive");
        }
        if !(self.demand.hot_rate >= 0.0 && self.demand.background_rate >= 0.0) {
            return bad("demand rates must be nonnegative");
        }
        DelayParams::new(self.max_pickup_s, self.max_detour_s)?;
        self.train.validate()
    }

    fn sim_config(&self) -> Result<SimConfig> {
        Ok(SimConfig {
            delta_s: self.delta_s,
            delays: DelayParams::new(self.max_pickup_s, self.max_detour_s)?,
            revenue_timing: self.revenue_timing,
            day_start_s: self.day_start_s,
        })
    }

    /// Output root: the config's directory, else `$RIDEPOOL_OUT`.
    pub fn output_root(&self) -> Option<PathBuf> {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
    }
}

/// A built environment: network, grid and demand model.
#[derive(Debug)]
pub struct Scenario {
    pub config: ExperimentConfig,
    pub net: StreetNetwork,
    pub grid: HexGrid,
    pub rates: Vec<f64>,
    fixed: Option<Vec<Request>>,
    pub sim: SimConfig,
}

impl Scenario {
    pub fn build(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let net = match &config.network.file {
            Some(p) => load_network(p)?,
            None => {
                let n = &config.network;
                grid_network(n.rows, n.cols, n.spacing_km, n.edge_seconds)?
            }
        };
        let grid = match &config.grid.file {
            Some(p) => load_grid(p, &net)?,
            None => build_synthetic_grid_with(config.grid.rows, config.grid.cols, &net, config.grid.diameter_km)?,
        };
        let hotspots: Vec<RegionId> = config
            .demand
            .hotspots
            .iter()
            .map(|&[r, c]| {
                if config.grid.file.is_some() || r >= config.grid.rows || c >= config.grid.cols {
                    Err(Error::Config(format!(
                        "hotspot ({r}, {c}) is not a cell of the synthetic {}x{} grid",
                        config.grid.rows, config.grid.cols
                    )))
                } else {
                    Ok(RegionId(r * config.grid.cols + c))
                }
            })
            .collect::<Result<_>>()?;
        let rates = hotspot_rates(&grid, &hotspots, config.demand.hot_rate, config.demand.background_rate);
        let fixed = match &config.demand.file {
            Some(p) => Some(load_requests(p, &net, &config.demand.pricing)?),
            None => None,
        };
        Ok(Scenario {
            config: config.clone(),
            sim: config.sim_config()?,
            net,
            grid,
            rates,
            fixed,
        })
    }

    /// One batch per epoch.
    pub fn demand(&self, seed: u64) -> Result<Vec<Batch>> {
        let c = &self.config;
        let requests = match &self.fixed {
            Some(r) => r.clone(),
            None => synth_hotspot_demand(
                &self.net,
                &self.grid,
                c.epochs,
                &self.rates,
                c.delta_s,
                &c.demand.pricing,
                seed,
            )?,
        };
        let mut batches = batch_requests(&requests, c.delta_s, c.epochs)?;
        batches.truncate(c.epochs);
        Ok(batches)
    }
}

/// Mixes a base seed with a stream tag and an index (splitmix64).
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_TRAIN_DEMAND: u64 = 1;
const STREAM_TRAIN_FLEET: u64 = 2;
const STREAM_TRAIN_POLICY: u64 = 3;
const STREAM_EVAL_DEMAND: u64 = 4;
const STREAM_EVAL_FLEET: u64 = 5;
const STREAM_EVAL_POLICY: u64 = 6;
const STREAM_POSTERIOR: u64 = 7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeSeeds {
    pub demand: u64,
    pub fleet: u64,
    pub policy: u64,
}

impl EpisodeSeeds {
    pub fn eval(seed: u64, episode: usize) -> Self {
        let e = episode as u64;
        EpisodeSeeds {
            demand: derive_seed(seed, STREAM_EVAL_DEMAND, e),
            fleet: derive_seed(seed, STREAM_EVAL_FLEET, e),
            policy: derive_seed(seed, STREAM_EVAL_POLICY, e),
        }
    }

    pub fn train(seed: u64, episode: usize) -> Self {
        let e = episode as u64;
        EpisodeSeeds {
            demand: derive_seed(seed, STREAM_TRAIN_DEMAND, e),
            fleet: derive_seed(seed, STREAM_TRAIN_FLEET, e),
            policy: derive_seed(seed, STREAM_TRAIN_POLICY, e),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpisodeOutcome {
    pub revenue: f64,
    pub served: u64,
    pub dropped: u64,
    pub matched: u64,
    pub generated: u64,
    /// Requests still on board or awaiting pickup at the end.
    pub active: u64,
    pub events: Vec<Event>,
    pub metrics: Vec<MetricsRow>,
    pub samples: Vec<RegionDistributions>,
    pub completed: Vec<CompletedRide>,
    pub mean_loss: f64,
}

/// Greedy nearest-first matching without dispatch regions: (vehicle,
/// request) pairs by earliest reachable pickup, ties by vehicle then request
/// id, each accepted if the vehicle's plan stays feasible.
pub fn nod_assign(state: &SimState, net: &StreetNetwork) -> Vec<Trip> {
    let delays = state.config.delays;
    let views = state.views();
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (v, view) in views.iter().enumerate() {
        for (i, r) in state.active.iter().enumerate() {
            let eta = view.start_time + net.time(view.start, r.origin);
            if eta - r.arrival_s <= delays.max_pickup_s + DELAY_EPS {
                pairs.push((eta, v, i));
            }
        }
    }
    pairs.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then(a.1.cmp(&b.1))
            .then(state.active[a.2].id.cmp(&state.active[b.2].id))
    });
    let mut added: Vec<Vec<&Request>> = vec![Vec::new(); views.len()];
    let mut trips: Vec<Trip> = views.iter().map(Trip::empty).collect();
    let mut taken = HashSet::new();
    for (_, v, i) in pairs {
        let r = &state.active[i];
        if taken.contains(&r.id) || views[v].passengers.len() + added[v].len() >= views[v].capacity {
            continue;
        }
        let mut cand = added[v].clone();
        cand.push(r);
        if let Some(ins) = evaluate_insertion(&views[v], &cand, net, &delays) {
            trips[v] = make_trip(&cand, ins);
            added[v] = cand;
            taken.insert(r.id);
        }
    }
    trips
}

/// Trips per vehicle restricted to its dispatch region, then the exact
/// matching. Returns the chosen trip of every vehicle.
pub fn match_dispatched(
    state: &SimState,
    net: &StreetNetwork,
    grid: &HexGrid,
    dispatched: &[Option<RegionId>],
    alpha: f64,
    beta: f64,
) -> Result<Vec<Trip>> {
    let delays = state.config.delays;
    let mut all: Vec<Vec<Trip>> = Vec::with_capacity(state.vehicles.len());
    for (v, vehicle) in state.vehicles.iter().enumerate() {
        let view = vehicle.view(state.clock);
        let trips = match dispatched[v] {
            Some(d) => feasible_trips(&view, net, grid, Some(d), &state.active, &delays),
            None => vec![Trip::empty(&view)],
        };
        all.push(trips);
    }
    let instance = MatchingInstance {
        vehicles: all
            .iter()
            .map(|ts| {
                ts.iter()
                    .map(|t| {
                        let value = if t.is_empty() { 0.0 } else { trip_value(t, alpha, beta) };
                        CandidateTrip::new(t.requests.clone(), value)
                    })
                    .collect()
            })
            .collect(),
    };
    let assignment = solve(&instance)?;
    Ok(all
        .into_iter()
        .zip(assignment.chosen)
        .map(|(mut ts, c)| ts.swap_remove(c))
        .collect())
}

pub struct EpisodeContext<'a> {
    pub scenario: &'a Scenario,
    pub variant: Variant,
    pub seeds: EpisodeSeeds,
    /// Learner for RL variants; updated only when `training`.
    pub learner: Option<&'a mut Learner>,
    pub posterior: Option<&'a MlpPosterior>,
    pub training: bool,
    /// Boltzmann temperature; ignored for baselines.
    pub temperature: f64,
}

/// Plays one episode.
pub fn run_episode(mut ctx: EpisodeContext<'_>) -> Result<EpisodeOutcome> {
    let scn = ctx.scenario;
    let cfg = &scn.config;
    let (net, grid) = (&scn.net, &scn.grid);
    let variant = ctx.variant;
    if variant.learns() && ctx.learner.is_none() {
        return Err(Error::Config(format!("{variant} needs a learner")));
    }
    let batches = scn.demand(ctx.seeds.demand)?;
    let generated = batches.iter().map(|b| b.requests.len() as u64).sum();
    let mut state = init_sim(net, grid, cfg.vehicles, cfg.capacity, scn.sim, ctx.seeds.fleet)?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seeds.policy);
    let encoder = Encoder::new(grid, cfg.capacity);
    let n = cfg.vehicles;
    let k = cfg.train.neighbors;
    let mut prev_actions: Vec<Option<usize>> = vec![None; n];
    let mut pending: Vec<Option<(Vec<f64>, f64)>> = vec![None; n];
    let mut out = EpisodeOutcome {
        generated,
        ..Default::default()
    };
    let mut losses = Vec::new();

    for (t, batch) in batches.iter().enumerate().take(cfg.epochs) {
        out.events.extend(state.advance_epoch(grid));
        state.active = batch.requests.clone();

        let mut dispatched: Vec<Option<RegionId>> = vec![None; n];
        let mut actions: Vec<Option<usize>> = vec![None; n];
        let mut rows_taken: Vec<Option<Vec<f64>>> = vec![None; n];
        match variant {
            Variant::Nod => {}
            Variant::Random => {
                for (v, vehicle) in state.vehicles.iter().enumerate() {
                    let set = grid.action_set(vehicle.region)?;
                    let a = rng.random_range(0..set.len());
                    actions[v] = Some(a);
                    dispatched[v] = set.get(a);
                }
            }
            _ => {
                let learner = ctx.learner.as_deref_mut().expect("checked above");
                for v in 0..n {
                    let obs = state.observe(net, grid, v, k)?;
                    let mean = if variant.mean_field() {
                        mean_action(&prev_actions, v, &state, net, k)?
                    } else {
                        MeanAction::zero()
                    };
                    let mut rows = encoder.rows(grid, &obs, &mean)?;
                    if ctx.training {
                        if let Some((row, reward)) = pending[v].take() {
                            learner.remember(Transition {
                                row,
                                reward,
                                next: Some(rows.clone()),
                            });
                        }
                    }
                    let a = learner.act(&rows, ctx.temperature);
                    actions[v] = Some(a);
                    dispatched[v] = grid.action_set(obs.region)?.get(a);
                    rows_taken[v] = Some(rows.swap_remove(a));
                }
            }
        }

        // vehicle distribution over dispatch targets among vehicles with room
        let regions = grid.region_count();
        let mut veh_counts = vec![0.0; regions];
        for (v, vehicle) in state.vehicles.iter().enumerate() {
            if vehicle.passengers().len() < vehicle.capacity {
                veh_counts[dispatched[v].unwrap_or(vehicle.region).0] += 1.0;
            }
        }
        let mut req_counts = vec![0.0; regions];
        for r in &state.active {
            req_counts[grid.region_of(r.origin).0] += 1.0;
        }
        let sample = RegionDistributions::from_counts(state.epoch, &veh_counts, &req_counts)?;

        let trips = if variant == Variant::Nod {
            nod_assign(&state, net)
        } else {
            match_dispatched(&state, net, grid, &dispatched, cfg.trip_alpha, cfg.trip_beta)?
        };
        let mut matched = HashSet::new();
        for (v, trip) in trips.iter().enumerate() {
            matched.extend(trip.requests.iter().copied());
            let events = state
                .apply_assignment(net, grid, v, trip, dispatched[v])
                .map_err(|e| e.context(format!("epoch {t}, vehicle {v}")))?;
            out.events.extend(events);
        }
        out.events.extend(state.drop_unmatched(&matched));

        if let Some(learner) = ctx.learner.as_deref_mut() {
            let mi_t = match (variant.uses_mi(), ctx.posterior) {
                (true, Some(p)) => instantaneous_bound(&sample, p)?,
                _ => 0.0,
            };
            let scale = learner.config.reward_scale;
            let alpha = learner.config.mi_coefficient;
            for v in 0..n {
                if let Some(row) = rows_taken[v].take() {
                    let r_v = trips[v].revenue * scale;
                    let reward = if variant.uses_mi() {
                        total_reward(r_v, mi_t, alpha)
                    } else {
                        r_v
                    };
                    pending[v] = Some((row, reward));
                }
            }
            if ctx.training {
                if let Some(loss) = learner.learn() {
                    losses.push(loss);
                }
            }
        }
        out.samples.push(sample);
        prev_actions = actions;
        out.metrics.push(state.metrics_row());
    }

    if ctx.training {
        if let Some(learner) = ctx.learner.as_deref_mut() {
            for (row, reward) in pending.into_iter().flatten() {
                learner.remember(Transition {
                    row,
                    reward,
                    next: None,
                });
            }
        }
    }
    out.revenue = state.metrics.revenue;
    out.served = state.metrics.served;
    out.dropped = state.metrics.dropped;
    out.matched = state.metrics.matched;
    out.active = state.active_passengers();
    out.completed = state.completed;
    out.mean_loss = if losses.is_empty() {
        0.0
    } else {
        losses.iter().sum::<f64>() / losses.len() as f64
    };
    Ok(out)
}

/// Training environment over a scenario, also fitting the MI posterior.
pub struct ScenarioEnv<'a> {
    pub scenario: &'a Scenario,
    pub variant: Variant,
    pub seed: u64,
    pub posterior: MlpPosterior,
    pool: Vec<RegionDistributions>,
    pool_head: usize,
    pub mi_log: Vec<MiLogRow>,
}

impl<'a> ScenarioEnv<'a> {
    pub fn new(scenario: &'a Scenario, variant: Variant, seed: u64) -> Self {
        let t = &scenario.config.train;
        ScenarioEnv {
            posterior: MlpPosterior::new(
                scenario.grid.region_count(),
                t.posterior_hidden,
                t.posterior_lr,
                derive_seed(seed, STREAM_POSTERIOR, 0),
            ),
            scenario,
            variant,
            seed,
            pool: Vec::new(),
            pool_head: 0,
            mi_log: Vec::new(),
        }
    }
}

impl TrainEnv for ScenarioEnv<'_> {
    fn episode(&mut self, index: usize, learner: &mut Learner) -> Result<TrainLogRow> {
        let temperature = learner.temperature();
        let outcome = run_episode(EpisodeContext {
            scenario: self.scenario,
            variant: self.variant,
            seeds: EpisodeSeeds::train(self.seed, index),
            learner: Some(learner),
            posterior: Some(&self.posterior),
            training: true,
            temperature,
        })?;
        for s in &outcome.samples {
            if self.pool.len() < MI_POOL {
                self.pool.push(s.clone());
            } else {
                self.pool[self.pool_head] = s.clone();
                self.pool_head = (self.pool_head + 1) % MI_POOL;
            }
        }
        fit_posterior(
            &mut self.posterior,
            &self.pool,
            self.scenario.config.train.posterior_steps,
            MI_BATCH,
            derive_seed(self.seed, STREAM_POSTERIOR, index as u64 + 1),
        );
        let bound = mi_lower_bound(&outcome.samples, &self.posterior)?;
        self.mi_log.push(MiLogRow {
            epoch: index,
            h_marginal: bound.h_marginal,
            mean_ce: bound.mean_ce,
            bound: bound.bound,
        });
        log::info!(
            "{} seed {} episode {index}: revenue {:.2}, served {}, MI {:.4}",
            self.variant,
            self.seed,
            outcome.revenue,
            outcome.served,
            bound.bound
        );
        Ok(TrainLogRow {
            episode: index,
            revenue: outcome.revenue,
            served: outcome.served,
            mi_estimate: bound.bound,
            loss: outcome.mean_loss,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    /// Mean over evaluation episodes.
    pub revenue: f64,
    pub served: f64,
    pub episode_revenue: Vec<f64>,
    pub train_log: Vec<TrainLogRow>,
    pub mi_curve: Vec<MiLogRow>,
    /// Cumulative revenue per epoch, averaged over evaluation episodes.
    pub revenue_curve: Vec<f64>,
    pub event_logs: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: Variant,
    pub seeds: Vec<SeedResult>,
    pub mean_revenue: f64,
    pub mean_served: f64,
}

impl RunReport {
    fn from_seeds(variant: Variant, seeds: Vec<SeedResult>) -> Self {
        let n = seeds.len().max(1) as f64;
        RunReport {
            variant,
            mean_revenue: seeds.iter().map(|s| s.revenue).sum::<f64>() / n,
            mean_served: seeds.iter().map(|s| s.served).sum::<f64>() / n,
            seeds,
        }
    }

    /// Mean cumulative revenue per epoch across seeds.
    pub fn revenue_curve(&self) -> Vec<f64> {
        mean_columns(self.seeds.iter().map(|s| s.revenue_curve.as_slice()))
    }

    /// Mean MI log across seeds, per training episode.
    pub fn mi_curve(&self) -> Vec<MiLogRow> {
        let len = self.seeds.iter().map(|s| s.mi_curve.len()).min().unwrap_or(0);
        let n = self.seeds.len() as f64;
        (0..len)
            .map(|e| {
                let avg = |f: fn(&MiLogRow) -> f64| self.seeds.iter().map(|s| f(&s.mi_curve[e])).sum::<f64>() / n;
                MiLogRow {
                    epoch: e,
                    h_marginal: avg(|r| r.h_marginal),
                    mean_ce: avg(|r| r.mean_ce),
                    bound: avg(|r| r.bound),
                }
            })
            .collect()
    }
}

fn mean_columns<'a>(series: impl Iterator<Item = &'a [f64]>) -> Vec<f64> {
    let all: Vec<&[f64]> = series.collect();
    let len = all.iter().map(|s| s.len()).min().unwrap_or(0);
    (0..len)
        .map(|i| all.iter().map(|s| s[i]).sum::<f64>() / all.len() as f64)
        .collect()
}

/// Relative improvement of `x` over `y`.
pub fn improvement(x: f64, y: f64) -> f64 {
    (x - y) / y
}

/// Trains (for RL variants) and evaluates one seed.
pub fn run_seed(scn: &Scenario, variant: Variant, seed: u64, out: Option<&Path>) -> Result<SeedResult> {
    let cfg = &scn.config;
    let dir = out.map(|o| o.join(variant.slug()).join(format!("seed{seed}")));
    if let Some(d) = &dir {
        std::fs::create_dir_all(d)?;
    }
    let (mut learner, train_log, mi_curve, posterior) = if variant.learns() {
        let mut env = ScenarioEnv::new(scn, variant, seed);
        let (learner, log) = train(&mut env, cfg.train.clone(), variant, seed)?;
        (Some(learner), log, env.mi_log, Some(env.posterior))
    } else {
        (None, Vec::new(), Vec::new(), None)
    };
    if let Some(d) = &dir {
        if variant.learns() {
            write_train_log(d.join("train_log.csv"), &train_log)?;
            write_mi_log(d.join("mi.csv"), &mi_curve)?;
            if let Some(l) = &learner {
                save_checkpoint(d.join("checkpoint.json"), &l.q, cfg.train.episodes)?;
            }
        }
    }

    let mut episode_revenue = Vec::new();
    let mut served = 0.0;
    let mut curves: Vec<Vec<f64>> = Vec::new();
    let mut event_logs = Vec::new();
    let temperature = cfg.train.eval_temperature;
    for e in 0..cfg.eval_episodes {
        let outcome = run_episode(EpisodeContext {
            scenario: scn,
            variant,
            seeds: EpisodeSeeds::eval(seed, e),
            learner: learner.as_mut(),
            posterior: posterior.as_ref(),
            training: false,
            temperature,
        })
        .map_err(|err| err.context(format!("{variant} seed {seed} evaluation episode {e}")))?;
        episode_revenue.push(outcome.revenue);
        served += outcome.served as f64;
        curves.push(outcome.metrics.iter().map(|m| m.revenue).collect());
        if let (Some(d), true) = (&dir, cfg.write_episodes) {
            let ep = d.join(format!("episode{e}"));
            std::fs::create_dir_all(&ep)?;
            write_events(ep.join("events.jsonl"), &outcome.events)?;
            write_metrics(ep.join("metrics.csv"), &outcome.metrics)?;
            event_logs.push(ep.join("events.jsonl"));
        }
    }
    let n = cfg.eval_episodes.max(1) as f64;
    Ok(SeedResult {
        seed,
        revenue: episode_revenue.iter().sum::<f64>() / n,
        served: served / n,
        episode_revenue,
        train_log,
        mi_curve,
        revenue_curve: mean_columns(curves.iter().map(|c| c.as_slice())),
        event_logs,
    })
}

pub fn run_variant(config: &ExperimentConfig) -> Result<RunReport> {
    let scn = Scenario::build(config)?;
    run_variant_on(&scn, config.variant, config.output_root().as_deref())
}

pub fn run_variant_on(scn: &Scenario, variant: Variant, out: Option<&Path>) -> Result<RunReport> {
    let seeds = scn
        .config
        .seeds
        .iter()
        .map(|&s| run_seed(scn, variant, s, out))
        .collect::<Result<Vec<_>>>()?;
    Ok(RunReport::from_seeds(variant, seeds))
}

/// Per-variant cumulative revenue and MI curves.
pub fn emit_plot_data(reports: &[RunReport], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for r in reports {
        let path = dir.join(format!("revenue_{}.csv", r.variant.slug()));
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["epoch", "cumulative_revenue"])?;
        for (e, v) in r.revenue_curve().iter().enumerate() {
            w.write_record([(e + 1).to_string(), v.to_string()])?;
        }
        w.flush()?;
        written.push(path);
        let path = dir.join(format!("mi_{}.csv", r.variant.slug()));
        write_mi_log(&path, &r.mi_curve())?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    #[serde(rename = "PD")]
    PickupDelay,
    #[serde(rename = "NV")]
    Vehicles,
    #[serde(rename = "C")]
    Capacity,
    #[serde(rename = "alpha")]
    MiCoefficient,
    #[serde(rename = "k")]
    Neighbors,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "PD" | "pd" => Ok(SweepAxis::PickupDelay),
            "NV" | "nv" => Ok(SweepAxis::Vehicles),
            "C" | "c" => Ok(SweepAxis::Capacity),
            "alpha" => Ok(SweepAxis::MiCoefficient),
            "k" => Ok(SweepAxis::Neighbors),
            _ => Err(Error::Config(format!("unknown sweep axis {s:?} (PD, NV, C, alpha, k)"))),
        }
    }
}

impl SweepAxis {
    pub fn label(self) -> &'static str {
        match self {
            SweepAxis::PickupDelay => "PD",
            SweepAxis::Vehicles => "NV",
            SweepAxis::Capacity => "C",
            SweepAxis::MiCoefficient => "alpha",
            SweepAxis::Neighbors => "k",
        }
    }

    pub fn apply(self, base: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let mut c = base.clone();
        let whole = || {
            if value >= 1.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(Error::Config(format!(
                    "{} needs a positive integer, got {value}",
                    self.label()
                )))
            }
        };
        match self {
            SweepAxis::PickupDelay => c.max_pickup_s = value,
            SweepAxis::Vehicles => c.vehicles = whole()?,
            SweepAxis::Capacity => c.capacity = whole()?,
            SweepAxis::MiCoefficient => c.train.mi_coefficient = value,
            SweepAxis::Neighbors => c.train.neighbors = whole()?,
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub reports: Vec<RunReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub variants: Vec<Variant>,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn header(&self) -> Vec<String> {
        let mut h = vec![self.axis.label().to_string()];
        for v in &self.variants {
            h.push(format!("{v}_revenue"));
            h.push(format!("{v}_served"));
        }
        for j in 1..self.variants.len() {
            for i in 0..j {
                h.push(format!("{}/{}", self.variants[j], self.variants[i]));
            }
        }
        h
    }

    pub fn records(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|row| {
                let mut rec = vec![row.value.to_string()];
                for r in &row.reports {
                    rec.push(r.mean_revenue.to_string());
                    rec.push(r.mean_served.to_string());
                }
                for j in 1..row.reports.len() {
                    for i in 0..j {
                        rec.push(improvement(row.reports[j].mean_revenue, row.reports[i].mean_revenue).to_string());
                    }
                }
                rec
            })
            .collect()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(self.header())?;
        for rec in self.records() {
            w.write_record(rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One full run per value and variant.
pub fn ablation_sweep(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
    variants: &[Variant],
    out: Option<&Path>,
) -> Result<SweepTable> {
    if values.is_empty() || variants.is_empty() {
        return Err(Error::Config("a sweep needs at least one value and one variant".into()));
    }
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let cfg = axis.apply(base, value)?;
        let scn = Scenario::build(&cfg)?;
        let cell_out = out.map(|o| o.join(format!("{}_{value}", axis.label())));
        let reports = variants
            .iter()
            .map(|&v| {
                run_variant_on(&scn, v, cell_out.as_deref())
                    .map_err(|e| e.context(format!("sweep {}={value}", axis.label())))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(SweepRow { value, reports });
    }
    Ok(SweepTable {
        axis,
        variants: variants.to_vec(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            network: NetworkSource {
                rows: 5,
                cols: 5,
                ..Default::default()
            },
            grid: GridSource {
                rows: 3,
                cols: 3,
                diameter_km: 0.4,
                ..Default::default()
            },
            demand: DemandConfig {
                hotspots: vec![[1, 1]],
                hot_rate: 1.0,
                background_rate: 0.1,
                ..Default::default()
            },
            vehicles: 4,
            epochs: 10,
            seeds: vec![7],
            eval_episodes: 1,
            train: TrainConfig {
                episodes: 2,
                warmup: 10,
                hidden: vec![8],
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn default_config_is_valid() {
        ExperimentConfig::default().validate().unwrap();
        let parsed = ExperimentConfig::from_toml("vehicles = 5\n[train]\nneighbors = 3\n").unwrap();
        assert_eq!(parsed.vehicles, 5);
        assert_eq!(parsed.train.neighbors, 3);
        assert!(ExperimentConfig::from_toml("vehicles = 0").is_err());
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn random_with_zero_demand_earns_nothing() {
        let mut cfg = small();
        cfg.demand.hot_rate = 0.0;
        cfg.demand.background_rate = 0.0;
        cfg.variant = Variant::Random;
        let report = run_variant(&cfg).unwrap();
        assert_eq!(report.mean_revenue, 0.0);
    }

    #[test]
    fn nod_conserves_requests() {
        let scn = Scenario::build(&small()).unwrap();
        let out = run_episode(EpisodeContext {
            scenario: &scn,
            variant: Variant::Nod,
            seeds: EpisodeSeeds::eval(1, 0),
            learner: None,
            posterior: None,
            training: false,
            temperature: 0.0,
        })
        .unwrap();
        assert!(out.generated > 0);
        assert_eq!(out.served + out.dropped + out.active, out.generated);
        let credited: f64 = out
            .events
            .iter()
            .filter_map(|e| match e {
                Event::Dropoff { price, .. } => Some(*price),
                _ => None,
            })
            .sum();
        assert!((credited - out.revenue).abs() < 1e-9);
    }

    #[test]
    fn learner_episode_runs() {
        let cfg = small();
        let scn = Scenario::build(&cfg).unwrap();
        let r = run_seed(&scn, Variant::MfqlMi, 3, None).unwrap();
        assert_eq!(r.train_log.len(), 2);
        assert_eq!(r.mi_curve.len(), 2);
        assert_eq!(r.revenue_curve.len(), cfg.epochs);
    }

    #[test]
    fn sweep_shape() {
        let mut cfg = small();
        cfg.epochs = 3;
        let t = ablation_sweep(
            &cfg,
            SweepAxis::Capacity,
            &[2.0],
            &[Variant::Random, Variant::Nod],
            None,
        )
        .unwrap();
        assert_eq!(t.rows.len(), 1);
        assert_eq!(
            t.header(),
            vec![
                "C",
                "Random_revenue",
                "Random_served",
                "NOD_revenue",
                "NOD_served",
                "NOD/Random"
            ]
        );
        assert!(SweepAxis::Capacity.apply(&cfg, 1.5).is_err());
    }

    #[test]
    fn improvement_arithmetic() {
        assert!((improvement(110.0, 100.0) - 0.1).abs() < 1e-12);
    }
}
