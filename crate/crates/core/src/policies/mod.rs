//! Rebalancing policies behind one `decide` interface.
//!
//! Benchmark policies emit explicit dispatch counts. The neural policy emits a
//! per-station routing action that the simulator expands with the dispatch
//! ratio.

mod benchmarks;
mod neural;

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use benchmarks::{BackPressure, BackpressureScoreConfig, CostSensitive, MaxWeight, NoRebalance, Proportional};
pub use neural::{NeuralPolicy, SampleMode};

use crate::error::{Error, Result};
use crate::network::{Network, Station};
use crate::sim::{Dispatch, FleetState, RebalanceAction};

/// Empty-vehicle dispatches requested by a benchmark policy for one epoch.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDecision {
    pub dispatches: Vec<Dispatch>,
}

impl PolicyDecision {
    pub fn is_empty(&self) -> bool {
        self.dispatches.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.dispatches.iter().map(|d| u64::from(d.count)).sum()
    }

    /// Count sent from `origin` to `destination`.
    pub fn count(&self, origin: Station, destination: Station) -> u32 {
        self.dispatches
            .iter()
            .filter(|d| d.origin == origin && d.destination == destination)
            .map(|d| d.count)
            .sum()
    }

    /// Builds a decision from a dense count matrix, row-major, skipping zeros.
    pub(crate) fn from_counts(n: usize, counts: &[u32]) -> Self {
        let mut dispatches = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let c = counts[i * n + j];
                if c > 0 && i != j {
                    dispatches.push(Dispatch {
                        origin: i,
                        destination: j,
                        count: c,
                    });
                }
            }
        }
        Self { dispatches }
    }
}

/// A routing action plus, for stochastic policies, the per-station
/// log-probabilities of the chosen destinations.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutedAction {
    pub action: RebalanceAction,
    pub log_probs: Option<Vec<f64>>,
    /// Raw network scores the action was drawn from.
    pub scores: Option<Vec<f64>>,
}

impl RoutedAction {
    pub fn plain(action: RebalanceAction) -> Self {
        Self {
            action,
            log_probs: None,
            scores: None,
        }
    }

    /// Joint log-probability, the sum over stations.
    pub fn joint_log_prob(&self) -> Option<f64> {
        self.log_probs.as_ref().map(|lp| lp.iter().sum())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Decision {
    Dispatch(PolicyDecision),
    Route(RoutedAction),
}

pub trait RebalancePolicy: Send + Sync {
    fn name(&self) -> String;

    fn decide(&self, state: &FleetState, network: &Network, rng: &mut ChaCha8Rng) -> Result<Decision>;
}

/// Policy names accepted in scenario files and on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    None,
    MaxWeight,
    BackPressure,
    Proportional,
    CostSensitive,
    Ppo,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 6] = [
        PolicyKind::None,
        PolicyKind::MaxWeight,
        PolicyKind::BackPressure,
        PolicyKind::Proportional,
        PolicyKind::CostSensitive,
        PolicyKind::Ppo,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::None => "none",
            PolicyKind::MaxWeight => "maxweight",
            PolicyKind::BackPressure => "backpressure",
            PolicyKind::Proportional => "proportional",
            PolicyKind::CostSensitive => "costsensitive",
            PolicyKind::Ppo => "ppo",
        }
    }

    /// Row label in comparison tables.
    pub fn label(self) -> &'static str {
        match self {
            PolicyKind::None => "None",
            PolicyKind::MaxWeight => "MaxWeight",
            PolicyKind::BackPressure => "BackPressure",
            PolicyKind::Proportional => "Proportional",
            PolicyKind::CostSensitive => "CostSensitive",
            PolicyKind::Ppo => "PPO",
        }
    }

    /// The benchmark policy for this kind; `None` for `Ppo`, which needs weights.
    pub fn benchmark(self, backpressure: BackpressureScoreConfig) -> Option<Box<dyn RebalancePolicy>> {
        Some(match self {
            PolicyKind::None => Box::new(NoRebalance),
            PolicyKind::MaxWeight => Box::new(MaxWeight),
            PolicyKind::BackPressure => Box::new(BackPressure::new(backpressure).ok()?),
            PolicyKind::Proportional => Box::new(Proportional),
            PolicyKind::CostSensitive => Box::new(CostSensitive),
            PolicyKind::Ppo => return None,
        })
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown policy {s:?}")))
    }
}
