//! Closed-fleet ridehailing rebalancing: a discrete-time simulator, benchmark
//! dispatch policies, a min-cost-flow solver, a PPO trainer and a trip-record
//! ingestion pipeline.

pub mod error;
pub mod fixtures;
pub mod ingest;
pub mod mincostflow;
pub mod network;
pub mod policies;
pub mod ppo;
pub mod report;
pub mod scenario;
pub mod sim;

pub use error::{Error, Result};
