//! Ride-pooling dispatch and matching engine.
//!
//! Vehicles are dispatched to hexagonal regions by a learned policy (independent
//! DQN or mean-field Q-learning, optionally with a mutual-information intrinsic
//! reward), then matched to feasible request combinations by an exact integer
//! program each decision epoch. Everything runs on a deterministic, seeded
//! discrete-time fleet simulator over a street network.
//!
//! Module map:
//!
//! - [`network`]: street graph, shortest travel times and routes
//! - [`hexgrid`]: hexagonal dispatch regions and 19-region action sets
//! - [`demand`]: requests, pricing, synthetic hotspot demand, batching
//! - [`sim`]: the fleet simulator (vehicle state, assignment, epoch advance)
//! - [`trips`]: feasible trip generation under pickup/detour delay limits
//! - [`matcher`]: branch-and-bound vehicle/trip assignment
//! - [`dispatch`]: Boltzmann policies, mean actions, DQN/MFQL updates
//! - [`mi`]: entropy, cross entropy and the variational MI lower bound
//! - [`harness`]: experiment configs, baselines, the training loop, sweeps
//! - [`oracle`]: brute-force reference implementations used for validation

pub mod demand;
pub mod dispatch;
pub mod error;
pub mod harness;
pub mod hexgrid;
pub mod matcher;
pub mod mi;
pub mod network;
pub mod nn;
pub mod oracle;
pub mod sim;
pub mod trips;

pub use error::{Error, Result};
