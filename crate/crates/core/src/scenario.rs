//! Scenario files: which network and demand to load, simulator and trainer
//! settings, and what to compare.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixtures;
use crate::network::{DemandModel, LabeledMatrix, Network};
use crate::policies::{BackpressureScoreConfig, PolicyKind, SampleMode};
use crate::ppo::PpoConfig;
use crate::sim::SimConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSpec {
    /// Built-in network, `manhattan` or `desk`. Takes precedence over the files.
    pub fixture: Option<String>,
    /// Distance matrix in miles.
    pub distances: Option<PathBuf>,
    /// Mean interarrival seconds per origin-destination pair.
    pub interarrival: Option<PathBuf>,
    /// Mean trip seconds, carried along for reference.
    pub triptime: Option<PathBuf>,
    pub speed_mph: f64,
    pub k: usize,
    pub demand_scale: f64,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            fixture: None,
            distances: None,
            interarrival: None,
            triptime: None,
            speed_mph: fixtures::SPEED_MPH,
            k: fixtures::DEFAULT_K,
            demand_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub network: NetworkSpec,
    pub sim: SimConfig,
    /// Evaluation seeds; results are averaged over them.
    pub seeds: Vec<u64>,
    pub policies: Vec<PolicyKind>,
    pub baseline: PolicyKind,
    pub backpressure: BackpressureScoreConfig,
    pub ppo: PpoConfig,
    pub eval_mode: SampleMode,
    /// Trained policy weights used when `ppo` is compared.
    pub weights: Option<PathBuf>,
    /// Save a checkpoint every this many training iterations; 0 disables.
    pub checkpoint_every: usize,
    pub alphas: Vec<f64>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            name: "manhattan".into(),
            network: NetworkSpec {
                fixture: Some("manhattan".into()),
                ..NetworkSpec::default()
            },
            sim: SimConfig::default(),
            seeds: (0..10).collect(),
            policies: vec![
                PolicyKind::None,
                PolicyKind::MaxWeight,
                PolicyKind::BackPressure,
                PolicyKind::Proportional,
                PolicyKind::CostSensitive,
            ],
            baseline: PolicyKind::MaxWeight,
            backpressure: BackpressureScoreConfig::default(),
            ppo: PpoConfig::default(),
            eval_mode: SampleMode::Sample,
            weights: None,
            checkpoint_every: 50,
            alphas: vec![0.01, 0.1, 1.0, 10.0, 100.0, 1000.0],
        }
    }
}

pub const BUILTIN_SCENARIOS: [&str; 2] = ["manhattan", "desk"];

impl ScenarioConfig {
    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "manhattan" => Some(Self::default()),
            "desk" => Some(Self {
                name: "desk".into(),
                network: NetworkSpec {
                    fixture: Some("desk".into()),
                    k: fixtures::DESK_ZONES.len() - 1,
                    ..NetworkSpec::default()
                },
                sim: fixtures::desk_sim_config(10.0, 0),
                seeds: (0..5).collect(),
                ppo: fixtures::desk_ppo_config(0),
                alphas: vec![0.1, 10.0, 1000.0],
                checkpoint_every: 20,
                ..Self::default()
            }),
            _ => None,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a scenario file. Relative paths inside it resolve against the
    /// file's directory. A built-in name is accepted when no such file exists.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            if let Some(cfg) = path.to_str().and_then(Self::builtin) {
                return Ok(cfg);
            }
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.network.distances,
            &mut cfg.network.interarrival,
            &mut cfg.network.triptime,
            &mut cfg.weights,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.ppo.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("no evaluation seeds".into()));
        }
        if self.alphas.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(Error::Config("alphas must be finite and >= 0".into()));
        }
        if !(self.network.demand_scale.is_finite() && self.network.demand_scale > 0.0) {
            return Err(Error::Config("demand_scale must be positive".into()));
        }
        Ok(())
    }

    /// Builds the network and demand model this scenario describes.
    pub fn build(&self) -> Result<(Network, DemandModel)> {
        let spec = &self.network;
        let (network, demand) = match spec.fixture.as_deref() {
            Some("manhattan") => (
                Network::from_labeled(fixtures::manhattan_distances()?, spec.speed_mph, spec.k)?,
                fixtures::manhattan_demand()?,
            ),
            Some("desk") => (
                Network::from_labeled(fixtures::desk_distances()?, spec.speed_mph, spec.k)?,
                fixtures::desk_demand()?,
            ),
            Some(other) => return Err(Error::Config(format!("unknown fixture {other:?}"))),
            None => {
                let need = |p: &Option<PathBuf>, what: &str| {
                    p.clone().ok_or_else(|| Error::Config(format!("network.{what} is required without a fixture")))
                };
                let dist = LabeledMatrix::from_csv_path(need(&spec.distances, "distances")?)?;
                let ia = LabeledMatrix::from_csv_path(need(&spec.interarrival, "interarrival")?)?;
                if ia.labels != dist.labels {
                    return Err(Error::Shape("distance and interarrival matrices list different zones".into()));
                }
                let mut demand = DemandModel::from_interarrival(&ia.values)?;
                if let Some(p) = &spec.triptime {
                    demand = demand.with_trip_times(LabeledMatrix::from_csv_path(p)?.values);
                }
                (Network::from_labeled(dist, spec.speed_mph, spec.k)?, demand)
            }
        };
        let demand = if spec.demand_scale == 1.0 {
            demand
        } else {
            demand.scaled(spec.demand_scale)?
        };
        Ok((network, demand))
    }
}
