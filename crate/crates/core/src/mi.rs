//! Mutual information between vehicle and request region distributions.
//!
//! Each epoch contributes one sample: the request distribution `p_e` over
//! regions (the context) and the vehicle distribution `p_v`. A posterior
//! `q(v | e)` predicts `p_v` from `p_e`, and
//!
//!   bound = H(mean of p_v) - mean_samples CE(p_v || q(. | p_e))
//!
//! lower-bounds the mutual information of the empirical joint, with equality
//! when `q` is the empirical conditional.

use std::collections::HashMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Adam, Mlp};

/// Floor applied inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance on a distribution's total mass.
pub const NORM_TOL: f64 = 1e-6;

pub const DEFAULT_POSTERIOR_HIDDEN: usize = 32;

fn check_distribution(p: &[f64]) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|&x| !(x >= 0.0)) || (sum - 1.0).abs() > NORM_TOL {
        return Err(Error::NotNormalized(sum));
    }
    Ok(())
}

/// Shannon entropy in nats, with 0 log 0 = 0.
pub fn entropy(p: &[f64]) -> Result<f64> {
    check_distribution(p)?;
    Ok(-p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>())
}

/// -sum p_i log max(q_i, floor).
pub fn cross_entropy(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch(p.len(), q.len()));
    }
    check_distribution(p)?;
    check_distribution(q)?;
    Ok(-p
        .iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * b.max(PROB_FLOOR).ln())
        .sum::<f64>())
}

pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    Ok(cross_entropy(p, q)? - entropy(p)?)
}

/// Normalizes counts; an all-zero vector becomes uniform.
pub fn normalize_counts(counts: &[f64]) -> Vec<f64> {
    let total: f64 = counts.iter().sum();
    if total > 0.0 {
        counts.iter().map(|c| c / total).collect()
    } else {
        vec![1.0 / counts.len() as f64; counts.len()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionDistributions {
    pub epoch: usize,
    /// Vehicle share per region.
    pub p_v: Vec<f64>,
    /// Request share per region.
    pub p_e: Vec<f64>,
}

impl RegionDistributions {
    pub fn from_counts(epoch: usize, vehicles: &[f64], requests: &[f64]) -> Result<Self> {
        if vehicles.len() != requests.len() {
            return Err(Error::DimensionMismatch(vehicles.len(), requests.len()));
        }
        Ok(RegionDistributions {
            epoch,
            p_v: normalize_counts(vehicles),
            p_e: normalize_counts(requests),
        })
    }
}

pub trait Posterior {
    /// q(. | p_e), a probability vector over regions.
    fn predict(&self, p_e: &[f64]) -> Vec<f64>;
}

fn context_key(p: &[f64]) -> Vec<u64> {
    p.iter().map(|x| x.to_bits()).collect()
}

/// Empirical conditional: the mean `p_v` over samples sharing the exact
/// same context. Unseen contexts get the marginal.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPosterior {
    table: HashMap<Vec<u64>, Vec<f64>>,
    marginal: Vec<f64>,
}

impl TabularPosterior {
    pub fn fit(samples: &[RegionDistributions]) -> Result<Self> {
        let first = samples.first().ok_or(Error::EmptySamples)?;
        let dim = first.p_v.len();
        let mut sums: HashMap<Vec<u64>, (Vec<f64>, f64)> = HashMap::new();
        let mut marginal = vec![0.0; dim];
        for s in samples {
            if s.p_v.len() != dim {
                return Err(Error::DimensionMismatch(dim, s.p_v.len()));
            }
            let entry = sums.entry(context_key(&s.p_e)).or_insert_with(|| (vec![0.0; dim], 0.0));
            for (acc, x) in entry.0.iter_mut().zip(&s.p_v) {
                *acc += x;
            }
            entry.1 += 1.0;
            for (m, x) in marginal.iter_mut().zip(&s.p_v) {
                *m += x / samples.len() as f64;
            }
        }
        let table = sums
            .into_iter()
            .map(|(k, (sum, n))| (k, sum.into_iter().map(|x| x / n).collect()))
            .collect();
        Ok(TabularPosterior { table, marginal })
    }
}

impl Posterior for TabularPosterior {
    fn predict(&self, p_e: &[f64]) -> Vec<f64> {
        self.table
            .get(&context_key(p_e))
            .cloned()
            .unwrap_or_else(|| self.marginal.clone())
    }
}

/// Any fixed mapping, used for perturbed posteriors in tests.
pub struct FnPosterior<F: Fn(&[f64]) -> Vec<f64>>(pub F);

impl<F: Fn(&[f64]) -> Vec<f64>> Posterior for FnPosterior<F> {
    fn predict(&self, p_e: &[f64]) -> Vec<f64> {
        (self.0)(p_e)
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    z.iter().map(|x| x - lse).collect()
}

/// One-hidden-layer encoder with a softmax output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpPosterior {
    pub net: Mlp,
    opt: Adam,
}

impl MlpPosterior {
    pub fn new(regions: usize, hidden: usize, lr: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Mlp::new(&[regions, hidden, regions], &mut rng);
        let opt = Adam::new(net.params().len(), lr);
        MlpPosterior { net, opt }
    }

    /// Mean cross-entropy of the samples under the exact log-softmax.
    pub fn loss(&self, samples: &[&RegionDistributions]) -> f64 {
        samples
            .iter()
            .map(|s| {
                let lq = log_softmax(&self.net.forward(&s.p_e));
                -s.p_v.iter().zip(&lq).map(|(p, l)| p * l).sum::<f64>()
            })
            .sum::<f64>()
            / samples.len() as f64
    }

    /// Gradient of [`MlpPosterior::loss`] with respect to the parameters.
    pub fn gradient(&self, samples: &[&RegionDistributions]) -> Vec<f64> {
        let mut grad = vec![0.0; self.net.params().len()];
        let n = samples.len() as f64;
        for s in samples {
            let q = softmax(&self.net.forward(&s.p_e));
            let mass: f64 = s.p_v.iter().sum();
            let d: Vec<f64> = q.iter().zip(&s.p_v).map(|(qi, pi)| (mass * qi - pi) / n).collect();
            self.net.backward(&s.p_e, &d, &mut grad);
        }
        grad
    }

    pub fn step(&mut self, samples: &[&RegionDistributions]) -> f64 {
        let loss = self.loss(samples);
        let grad = self.gradient(samples);
        self.opt.step(self.net.params_mut(), &grad);
        loss
    }
}

impl Posterior for MlpPosterior {
    fn predict(&self, p_e: &[f64]) -> Vec<f64> {
        softmax(&self.net.forward(p_e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiBound {
    pub h_marginal: f64,
    pub mean_ce: f64,
    pub bound: f64,
}

pub fn mi_lower_bound(samples: &[RegionDistributions], posterior: &impl Posterior) -> Result<MiBound> {
    let first = samples.first().ok_or(Error::EmptySamples)?;
    let dim = first.p_v.len();
    let n = samples.len() as f64;
    let mut marginal = vec![0.0; dim];
    let mut mean_ce = 0.0;
    for s in samples {
        if s.p_v.len() != dim {
            return Err(Error::DimensionMismatch(dim, s.p_v.len()));
        }
        for (m, x) in marginal.iter_mut().zip(&s.p_v) {
            *m += x / n;
        }
        mean_ce += cross_entropy(&s.p_v, &posterior.predict(&s.p_e))? / n;
    }
    let h_marginal = entropy(&marginal)?;
    Ok(MiBound {
        h_marginal,
        mean_ce,
        bound: h_marginal - mean_ce,
    })
}

/// Per-epoch intrinsic term H(p_v) - CE(p_v || q(. | p_e)).
pub fn instantaneous_bound(sample: &RegionDistributions, posterior: &impl Posterior) -> Result<f64> {
    Ok(entropy(&sample.p_v)? - cross_entropy(&sample.p_v, &posterior.predict(&sample.p_e))?)
}

/// Adam steps on minibatches of at most `batch` samples; returns the loss
/// before each step.
pub fn fit_posterior(
    posterior: &mut MlpPosterior,
    samples: &[RegionDistributions],
    steps: usize,
    batch: usize,
    seed: u64,
) -> Vec<f64> {
    if samples.is_empty() || steps == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut curve = Vec::with_capacity(steps);
    for _ in 0..steps {
        let chosen: Vec<&RegionDistributions> = if samples.len() <= batch {
            samples.iter().collect()
        } else {
            sample(&mut rng, samples.len(), batch)
                .into_iter()
                .map(|i| &samples[i])
                .collect()
        };
        curve.push(posterior.step(&chosen));
    }
    curve
}

/// Environment reward plus the weighted intrinsic term.
pub fn total_reward(r_v: f64, mi: f64, alpha: f64) -> f64 {
    r_v + alpha * mi
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiLogRow {
    pub epoch: usize,
    pub h_marginal: f64,
    pub mean_ce: f64,
    pub bound: f64,
}

pub fn write_mi_log(path: impl AsRef<std::path::Path>, rows: &[MiLogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(["epoch", "h_marginal", "mean_ce", "bound"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
