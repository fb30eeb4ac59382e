//! Dispatch policies: Boltzmann action selection over a shared Q-function,
//! mean actions of neighbouring vehicles, and DQN / mean-field Q updates
//! from a replay buffer.
//!
//! A Q-function scores one candidate action at a time. Each candidate is
//! described by a feature row combining the vehicle's observation, the
//! action's target region and the neighbours' mean action at that index.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hexgrid::{HexGrid, MAX_ACTIONS};
use crate::network::StreetNetwork;
use crate::nn::{Adam, Mlp};
use crate::sim::{Observation, SimState};

/// Length of one action's feature row.
pub const FEATURES: usize = 16;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "Random")]
    Random,
    #[serde(rename = "NOD")]
    Nod,
    #[serde(rename = "DQN")]
    Dqn,
    #[serde(rename = "DQN+MI")]
    DqnMi,
    #[serde(rename = "MFQL")]
    Mfql,
    #[serde(rename = "MFQL+MI")]
    MfqlMi,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Random,
        Variant::Nod,
        Variant::Dqn,
        Variant::DqnMi,
        Variant::Mfql,
        Variant::MfqlMi,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Random => "Random",
            Variant::Nod => "NOD",
            Variant::Dqn => "DQN",
            Variant::DqnMi => "DQN+MI",
            Variant::Mfql => "MFQL",
            Variant::MfqlMi => "MFQL+MI",
        }
    }

    /// Directory-safe name.
    pub fn slug(self) -> &'static str {
        match self {
            Variant::Random => "random",
            Variant::Nod => "nod",
            Variant::Dqn => "dqn",
            Variant::DqnMi => "dqn_mi",
            Variant::Mfql => "mfql",
            Variant::MfqlMi => "mfql_mi",
        }
    }

    pub fn learns(self) -> bool {
        !matches!(self, Variant::Random | Variant::Nod)
    }

    pub fn mean_field(self) -> bool {
        matches!(self, Variant::Mfql | Variant::MfqlMi)
    }

    pub fn uses_mi(self) -> bool {
        matches!(self, Variant::DqnMi | Variant::MfqlMi)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s) || v.slug().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

/// Action probabilities proportional to exp(q / temperature). A zero
/// temperature puts all mass on the first maximal entry.
pub fn boltzmann_probs(q: &[f64], temperature: f64) -> Vec<f64> {
    if q.is_empty() {
        return Vec::new();
    }
    if temperature <= 0.0 {
        let best = argmax(q);
        return (0..q.len()).map(|i| f64::from(u8::from(i == best))).collect();
    }
    let m = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = q.iter().map(|x| ((x - m) / temperature).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Index of the first maximum.
pub fn argmax(q: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in q.iter().enumerate() {
        if x > q[best] {
            best = i;
        }
    }
    best
}

/// Draws an action index from the Boltzmann distribution over `q`.
pub fn sample_boltzmann<R: Rng>(q: &[f64], temperature: f64, rng: &mut R) -> usize {
    assert!(!q.is_empty(), "no actions to choose from");
    if temperature <= 0.0 {
        return argmax(q);
    }
    let probs = boltzmann_probs(q, temperature);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

pub fn select_action<Q: QFunction + ?Sized, R: Rng>(q: &Q, rows: &[Vec<f64>], temperature: f64, rng: &mut R) -> usize {
    sample_boltzmann(&q.values(rows), temperature, rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanAction {
    pub probs: [f64; MAX_ACTIONS],
    /// Neighbours that contributed an action.
    pub neighbors: usize,
}

impl MeanAction {
    pub fn zero() -> Self {
        MeanAction {
            probs: [0.0; MAX_ACTIONS],
            neighbors: 0,
        }
    }
}

/// Average of the neighbours' one-hot actions; neighbours without a
/// previous action are skipped.
pub fn average_actions(prev: &[Option<usize>], neighbors: &[usize]) -> MeanAction {
    let mut out = MeanAction::zero();
    for &u in neighbors {
        if let Some(a) = prev.get(u).copied().flatten() {
            out.probs[a] += 1.0;
            out.neighbors += 1;
        }
    }
    if out.neighbors > 0 {
        let n = out.neighbors as f64;
        out.probs.iter_mut().for_each(|p| *p /= n);
    }
    out
}

/// Mean previous-epoch action of the `k` vehicles nearest to `v`.
pub fn mean_action(
    prev: &[Option<usize>],
    v: usize,
    state: &SimState,
    net: &StreetNetwork,
    k: usize,
) -> Result<MeanAction> {
    if k == 0 {
        return Err(Error::Config("neighbour count must be at least 1".into()));
    }
    Ok(average_actions(prev, &state.nearest_vehicles(net, v, k)?))
}

/// Turns observations into per-action feature rows.
#[derive(Debug, Clone)]
pub struct Encoder {
    /// Normalized axial coordinates per region.
    coords: Vec<(f64, f64)>,
    capacity: f64,
}

impl Encoder {
    pub fn new(grid: &HexGrid, capacity: usize) -> Self {
        let ax: Vec<_> = grid.regions().map(|r| grid.axial(r)).collect();
        let (qmin, qmax) = ax
            .iter()
            .fold((i64::MAX, i64::MIN), |(a, b), x| (a.min(x.q), b.max(x.q)));
        let (rmin, rmax) = ax
            .iter()
            .fold((i64::MAX, i64::MIN), |(a, b), x| (a.min(x.r), b.max(x.r)));
        let norm = |x: i64, lo: i64, hi: i64| {
            if hi > lo {
                (x - lo) as f64 / (hi - lo) as f64
            } else {
                0.5
            }
        };
        Encoder {
            coords: ax
                .iter()
                .map(|a| (norm(a.q, qmin, qmax), norm(a.r, rmin, rmax)))
                .collect(),
            capacity: capacity.max(1) as f64,
        }
    }

    /// One row per valid action.
    pub fn rows(&self, grid: &HexGrid, obs: &Observation, mean: &MeanAction) -> Result<Vec<Vec<f64>>> {
        let actions = grid.action_set(obs.region)?;
        let own = self.coords[obs.region.0];
        let angle = std::f64::consts::TAU * obs.day_fraction;
        let total_e = obs.request_counts.iter().sum::<u32>() as f64;
        let total_v = obs.vehicle_counts.iter().sum::<u32>() as f64;
        let ring1 = grid.ring1(obs.region).len();
        Ok(actions
            .regions()
            .iter()
            .enumerate()
            .map(|(i, &target)| {
                let (tq, tr) = self.coords[target.0];
                vec![
                    own.0,
                    own.1,
                    f64::from(obs.onboard) / self.capacity,
                    angle.sin(),
                    angle.cos(),
                    f64::from(obs.request_counts[i]).ln_1p(),
                    f64::from(obs.vehicle_counts[i]).ln_1p(),
                    f64::from(obs.neighbor_counts[i]).ln_1p(),
                    mean.probs[i],
                    tq,
                    tr,
                    f64::from(u8::from(i == 0)),
                    f64::from(u8::from(i >= 1 && i <= ring1)),
                    f64::from(u8::from(i > ring1)),
                    total_e.ln_1p(),
                    total_v.ln_1p(),
                ]
            })
            .collect())
    }
}

pub trait QFunction {
    fn value(&self, row: &[f64]) -> f64;

    fn values(&self, rows: &[Vec<f64>]) -> Vec<f64> {
        rows.iter().map(|r| self.value(r)).collect()
    }

    /// Moves Q(row) toward each target; returns the mean squared error
    /// before the move.
    fn fit(&mut self, rows: &[&[f64]], targets: &[f64], lr: f64) -> f64;
}

/// Lookup table keyed by the exact bits of a feature row.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TabularQ {
    table: HashMap<Vec<u64>, f64>,
    pub init: f64,
}

impl TabularQ {
    pub fn new(init: f64) -> Self {
        TabularQ {
            table: HashMap::new(),
            init,
        }
    }

    fn key(row: &[f64]) -> Vec<u64> {
        row.iter().map(|x| x.to_bits()).collect()
    }

    pub fn set(&mut self, row: &[f64], value: f64) {
        self.table.insert(Self::key(row), value);
    }
}

impl QFunction for TabularQ {
    fn value(&self, row: &[f64]) -> f64 {
        self.table.get(&Self::key(row)).copied().unwrap_or(self.init)
    }

    /// Q <- (1 - lr) Q + lr y, applied in order.
    fn fit(&mut self, rows: &[&[f64]], targets: &[f64], lr: f64) -> f64 {
        let mut sq = 0.0;
        for (row, &y) in rows.iter().zip(targets) {
            let q = self.value(row);
            sq += (y - q) * (y - q);
            self.table.insert(Self::key(row), (1.0 - lr) * q + lr * y);
        }
        sq / rows.len().max(1) as f64
    }
}

/// Shared network: feature row in, scalar Q out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpQ {
    pub net: Mlp,
    opt: Adam,
}

impl MlpQ {
    pub fn new(inputs: usize, hidden: &[usize], lr: f64, seed: u64) -> Self {
        let mut sizes = vec![inputs];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Mlp::new(&sizes, &mut rng);
        let opt = Adam::new(net.params().len(), lr);
        MlpQ { net, opt }
    }

    /// Half mean squared error.
    pub fn loss(&self, rows: &[&[f64]], targets: &[f64]) -> f64 {
        rows.iter()
            .zip(targets)
            .map(|(r, y)| {
                let d = self.value(r) - y;
                0.5 * d * d
            })
            .sum::<f64>()
            / rows.len() as f64
    }

    pub fn gradient(&self, rows: &[&[f64]], targets: &[f64]) -> Vec<f64> {
        let mut grad = vec![0.0; self.net.params().len()];
        let n = rows.len() as f64;
        for (r, y) in rows.iter().zip(targets) {
            let d = (self.value(r) - y) / n;
            self.net.backward(r, &[d], &mut grad);
        }
        grad
    }
}

impl QFunction for MlpQ {
    fn value(&self, row: &[f64]) -> f64 {
        self.net.forward(row)[0]
    }

    fn fit(&mut self, rows: &[&[f64]], targets: &[f64], lr: f64) -> f64 {
        let loss = self.loss(rows, targets);
        let grad = self.gradient(rows, targets);
        self.opt.lr = lr;
        self.opt.step(self.net.params_mut(), &grad);
        2.0 * loss
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    /// Feature row of the action taken.
    pub row: Vec<f64>,
    pub reward: f64,
    /// Rows of every valid next action; `None` at the end of an episode.
    pub next: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    head: usize,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, seed: u64) -> Self {
        assert!(capacity > 0, "replay buffer needs room");
        ReplayBuffer {
            capacity,
            items: Vec::new(),
            head: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.head] = t;
        }
        self.head = (self.head + 1) % self.capacity;
    }

    /// Up to `n` distinct transitions, uniformly.
    pub fn sample(&mut self, n: usize) -> Vec<&Transition> {
        let n = n.min(self.items.len());
        sample(&mut self.rng, self.items.len(), n)
            .into_iter()
            .map(|i| &self.items[i])
            .collect()
    }
}

fn update_with<Q: QFunction>(
    q: &mut Q,
    batch: &[&Transition],
    lr: f64,
    gamma: f64,
    next_value: impl Fn(&Q, &[Vec<f64>]) -> f64,
) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    let targets: Vec<f64> = batch
        .iter()
        .map(|t| t.reward + t.next.as_ref().map_or(0.0, |rows| gamma * next_value(q, rows)))
        .collect();
    let rows: Vec<&[f64]> = batch.iter().map(|t| t.row.as_slice()).collect();
    q.fit(&rows, &targets, lr)
}

/// Mean-field update: y = r + gamma * sum_a pi(a) Q_target(a), with pi the
/// Boltzmann policy of the online network.
pub fn mfql_update<Q: QFunction>(
    q: &mut Q,
    target: &Q,
    batch: &[&Transition],
    lr: f64,
    gamma: f64,
    temperature: f64,
) -> f64 {
    update_with(q, batch, lr, gamma, |online, rows| {
        let pi = boltzmann_probs(&online.values(rows), temperature);
        pi.iter().zip(target.values(rows)).map(|(p, v)| p * v).sum()
    })
}

/// Standard update: y = r + gamma * max_a Q_target(a).
pub fn dqn_update<Q: QFunction>(q: &mut Q, target: &Q, batch: &[&Transition], lr: f64, gamma: f64) -> f64 {
    update_with(q, batch, lr, gamma, |_, rows| {
        target.values(rows).into_iter().fold(f64::NEG_INFINITY, f64::max)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub discount: f64,
    /// Boltzmann temperature at the first episode.
    pub temperature: f64,
    /// Temperature reached after `anneal_fraction` of the episodes.
    pub final_temperature: f64,
    /// Share of the episodes over which the temperature falls linearly.
    pub anneal_fraction: f64,
    /// Temperature of evaluation episodes; 0 is greedy.
    pub eval_temperature: f64,
    pub neighbors: usize,
    pub mi_coefficient: f64,
    pub episodes: usize,
    pub batch_size: usize,
    /// Gradient updates between target syncs; 0 keeps a single network.
    pub target_sync: usize,
    pub buffer_capacity: usize,
    pub hidden: Vec<usize>,
    pub updates_per_epoch: usize,
    /// Transitions collected before learning starts.
    pub warmup: usize,
    /// Multiplier on environment rewards before they enter the buffer.
    pub reward_scale: f64,
    /// Posterior encoder settings for the MI variants.
    pub posterior_hidden: usize,
    pub posterior_lr: f64,
    pub posterior_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            discount: 0.9,
            temperature: 1.0,
            final_temperature: 0.01,
            anneal_fraction: 0.6,
            eval_temperature: 0.0,
            neighbors: 6,
            mi_coefficient: 0.09,
            episodes: 200,
            batch_size: 32,
            target_sync: 100,
            buffer_capacity: 20_000,
            hidden: vec![64, 64],
            updates_per_epoch: 2,
            warmup: 500,
            reward_scale: 0.1,
            posterior_hidden: crate::mi::DEFAULT_POSTERIOR_HIDDEN,
            posterior_lr: 1e-2,
            posterior_steps: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return bad(format!("learning rate must be in (0, 1], got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.discount) {
            return bad(format!("discount must be in [0, 1), got {}", self.discount));
        }
        if !(self.temperature >= 0.0 && self.final_temperature >= 0.0 && self.eval_temperature >= 0.0) {
            return bad("temperatures must be nonnegative".into());
        }
        if !(0.0..=1.0).contains(&self.anneal_fraction) {
            return bad(format!(
                "anneal fraction must be in [0, 1], got {}",
                self.anneal_fraction
            ));
        }
        if self.neighbors == 0 {
            return bad("neighbour count must be at least 1".into());
        }
        if !(self.mi_coefficient >= 0.0) {
            return bad("MI coefficient must be nonnegative".into());
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 || self.hidden.is_empty() {
            return bad("batch size, buffer capacity and hidden layers must be nonzero".into());
        }
        Ok(())
    }

    pub fn temperature_at(&self, episode: usize) -> f64 {
        let horizon = self.anneal_fraction * self.episodes.saturating_sub(1) as f64;
        if horizon <= 0.0 {
            return if self.episodes <= 1 {
                self.temperature
            } else {
                self.final_temperature
            };
        }
        let f = (episode as f64 / horizon).min(1.0);
        self.temperature + f * (self.final_temperature - self.temperature)
    }
}

/// Learning state shared by every vehicle.
#[derive(Debug, Clone)]
pub struct Learner {
    pub config: TrainConfig,
    pub mean_field: bool,
    pub q: MlpQ,
    pub target: MlpQ,
    pub buffer: ReplayBuffer,
    pub updates: usize,
    pub episode: usize,
    pub rng: ChaCha8Rng,
}

impl Learner {
    pub fn new(config: TrainConfig, mean_field: bool, seed: u64) -> Result<Self> {
        config.validate()?;
        let q = MlpQ::new(FEATURES, &config.hidden, config.learning_rate, seed);
        Ok(Learner {
            target: q.clone(),
            q,
            buffer: ReplayBuffer::new(config.buffer_capacity, seed ^ 0x5eed),
            updates: 0,
            episode: 0,
            rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(1)),
            mean_field,
            config,
        })
    }

    pub fn temperature(&self) -> f64 {
        self.config.temperature_at(self.episode)
    }

    pub fn act(&mut self, rows: &[Vec<f64>], temperature: f64) -> usize {
        select_action(&self.q, rows, temperature, &mut self.rng)
    }

    pub fn remember(&mut self, t: Transition) {
        self.buffer.push(t);
    }

    /// Runs the configured number of minibatch updates; returns the mean loss.
    pub fn learn(&mut self) -> Option<f64> {
        if self.buffer.len() < self.config.warmup.max(1) {
            return None;
        }
        let mut total = 0.0;
        for _ in 0..self.config.updates_per_epoch {
            let lr = self.config.learning_rate;
            let gamma = self.config.discount;
            let temp = self.temperature();
            let batch: Vec<Transition> = self
                .buffer
                .sample(self.config.batch_size)
                .into_iter()
                .cloned()
                .collect();
            let refs: Vec<&Transition> = batch.iter().collect();
            let loss = if self.config.target_sync == 0 {
                let frozen = self.q.clone();
                if self.mean_field {
                    mfql_update(&mut self.q, &frozen, &refs, lr, gamma, temp)
                } else {
                    dqn_update(&mut self.q, &frozen, &refs, lr, gamma)
                }
            } else if self.mean_field {
                mfql_update(&mut self.q, &self.target, &refs, lr, gamma, temp)
            } else {
                dqn_update(&mut self.q, &self.target, &refs, lr, gamma)
            };
            total += loss;
            self.updates += 1;
            if self.config.target_sync > 0 && self.updates.is_multiple_of(self.config.target_sync) {
                self.target = self.q.clone();
            }
        }
        Some(total / self.config.updates_per_epoch.max(1) as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub episode: usize,
    pub revenue: f64,
    pub served: u64,
    pub mi_estimate: f64,
    pub loss: f64,
}

/// One training episode against some environment.
pub trait TrainEnv {
    fn episode(&mut self, index: usize, learner: &mut Learner) -> Result<TrainLogRow>;
}

pub fn train<E: TrainEnv>(
    env: &mut E,
    config: TrainConfig,
    variant: Variant,
    seed: u64,
) -> Result<(Learner, Vec<TrainLogRow>)> {
    if !variant.learns() {
        return Err(Error::Config(format!("{variant} does not learn")));
    }
    let mut learner = Learner::new(config, variant.mean_field(), seed)?;
    let mut log = Vec::with_capacity(learner.config.episodes);
    for k in 0..learner.config.episodes {
        learner.episode = k;
        let row = env
            .episode(k, &mut learner)
            .map_err(|e| e.context(format!("training episode {k} of {variant}")))?;
        log.push(row);
    }
    Ok((learner, log))
}

pub fn write_train_log(path: impl AsRef<Path>, rows: &[TrainLogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(["episode", "revenue", "served", "mi_estimate", "loss"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub sizes: Vec<usize>,
    pub params: Vec<f64>,
    pub episode: usize,
}

pub fn save_checkpoint(path: impl AsRef<Path>, q: &MlpQ, episode: usize) -> Result<()> {
    let ck = Checkpoint {
        version: CHECKPOINT_VERSION,
        sizes: q.net.sizes().to_vec(),
        params: q.net.params().to_vec(),
        episode,
    };
    std::fs::write(path, serde_json::to_string(&ck)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>, lr: f64) -> Result<(MlpQ, usize)> {
    let ck: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if ck.version != CHECKPOINT_VERSION {
        return Err(Error::Config(format!("unsupported checkpoint version {}", ck.version)));
    }
    let net = Mlp::from_params(&ck.sizes, ck.params)
        .ok_or_else(|| Error::Config("checkpoint parameter count does not match its sizes".into()))?;
    let opt = Adam::new(net.params().len(), lr);
    Ok((MlpQ { net, opt }, ck.episode))
}
