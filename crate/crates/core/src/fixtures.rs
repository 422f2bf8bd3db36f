//! Built-in networks: the 20-zone Manhattan fixture and a 5-zone desk-scale
//! scenario carved out of it.

use crate::error::Result;
use crate::network::{DemandModel, LabeledMatrix, Matrix, Network};
use crate::ppo::PpoConfig;
use crate::sim::SimConfig;

pub const MANHATTAN_DISTANCES: &str = include_str!("../data/manhattan_distances.csv");
pub const MANHATTAN_INTERARRIVAL: &str = include_str!("../data/manhattan_interarrival.csv");

pub const SPEED_MPH: f64 = 10.0;
pub const DEFAULT_K: usize = 4;

/// Zones of the desk scenario: two large residential origins (236, 237), two
/// midtown sinks (161, 162) and 141 in between.
pub const DESK_ZONES: [&str; 5] = ["141", "161", "162", "236", "237"];
/// Multiplier on the fixture arrival rates restricted to the desk zones.
/// Only trips inside the cluster survive the restriction, which already
/// brings ten hours down to about 3,100 passengers.
pub const DESK_DEMAND_SCALE: f64 = 1.0;
pub const DESK_FLEET: u32 = 50;
pub const DESK_ITERATIONS: usize = 200;
pub const DESK_BATCH: usize = 500;
/// Keeps per-epoch rewards near -0.1 so value targets stay O(1-10).
pub const DESK_REWARD_SCALE: f64 = 1000.0;

pub fn manhattan_distances() -> Result<LabeledMatrix> {
    LabeledMatrix::from_csv_reader(MANHATTAN_DISTANCES.as_bytes())
}

pub fn manhattan_interarrival() -> Result<LabeledMatrix> {
    LabeledMatrix::from_csv_reader(MANHATTAN_INTERARRIVAL.as_bytes())
}

pub fn manhattan_network(k: usize) -> Result<Network> {
    Network::from_labeled(manhattan_distances()?, SPEED_MPH, k)
}

pub fn manhattan_demand() -> Result<DemandModel> {
    DemandModel::from_interarrival(&manhattan_interarrival()?.values)
}

fn restrict(m: &LabeledMatrix, zones: &[&str]) -> LabeledMatrix {
    let idx: Vec<usize> = zones
        .iter()
        .map(|z| m.labels.iter().position(|l| l == z).expect("zone present in fixture"))
        .collect();
    let rows = idx.iter().map(|&i| idx.iter().map(|&j| m.values.get(i, j)).collect()).collect();
    LabeledMatrix {
        labels: zones.iter().map(|z| z.to_string()).collect(),
        values: Matrix::from_rows(rows).expect("square by construction"),
    }
}

pub fn desk_distances() -> Result<LabeledMatrix> {
    Ok(restrict(&manhattan_distances()?, &DESK_ZONES))
}

/// Every other desk zone is a neighbor.
pub fn desk_network() -> Result<Network> {
    Network::from_labeled(desk_distances()?, SPEED_MPH, DESK_ZONES.len() - 1)
}

pub fn desk_demand() -> Result<DemandModel> {
    let sub = restrict(&manhattan_interarrival()?, &DESK_ZONES);
    DemandModel::from_interarrival(&sub.values)?.scaled(DESK_DEMAND_SCALE)
}

pub fn desk_sim_config(alpha: f64, seed: u64) -> SimConfig {
    SimConfig {
        fleet_size: DESK_FLEET,
        alpha,
        seed,
        ..SimConfig::default()
    }
}

pub fn desk_ppo_config(seed: u64) -> PpoConfig {
    PpoConfig {
        iterations: DESK_ITERATIONS,
        batch_size: DESK_BATCH,
        reward_scale: Some(DESK_REWARD_SCALE),
        seed,
        ..PpoConfig::default()
    }
}
