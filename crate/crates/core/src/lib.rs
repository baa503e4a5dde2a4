//! Profit-maximizing admission control for service federation between a
//! consumer domain and a provider domain.
//!
//! The crate builds the exact MDP of the two-domain system, solves it with
//! policy iteration, simulates it with a seeded event generator, and trains
//! tabular Q-Learning and R-Learning agents against that simulator.

pub mod agents;
pub mod dp;
pub mod error;
pub mod harness;
pub mod mdp;
pub mod model;
pub mod policy_file;
pub mod seed;
pub mod sim;

pub use error::{Error, Result};
pub use model::{DiscountEpoch, Action, EventMark, Policy, State, SystemConfig, TrafficClass};
