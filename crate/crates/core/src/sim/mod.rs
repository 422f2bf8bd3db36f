//! Discrete-time closed-fleet simulator.
//!
//! One tick is one second. Within a tick the order is fixed: vehicles due this
//! tick become idle, new passengers join their origin queue, then waiting
//! passengers are matched first-come-first-served. Rebalancing decisions are
//! taken after matching on ticks that are multiples of the rebalancing
//! interval.

mod arrivals;
mod state;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use arrivals::{sample_arrivals, ArrivalSampler};
pub use state::{
    Dispatch, FleetState, InTransit, MatchOutcome, MatchedPassenger, Passenger, TripKind,
};

use crate::error::{Error, Result};
use crate::network::{DemandModel, Network, Station};
use crate::policies::{Decision, RebalancePolicy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Seconds between rebalancing decisions.
    pub rebalance_interval: u64,
    /// Episode length in seconds.
    pub episode_length: u64,
    pub fleet_size: u32,
    /// Fraction of a station's surplus sent when a routing action picks a
    /// destination other than the station itself.
    pub dpr: f64,
    /// Weight of empty-vehicle miles against queue length in the reward.
    pub alpha: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            rebalance_interval: 100,
            episode_length: 36_000,
            fleet_size: 1000,
            dpr: 1.0,
            alpha: 10.0,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rebalance_interval == 0 {
            return Err(Error::Config("rebalance_interval must be positive".into()));
        }
        if self.episode_length == 0 {
            return Err(Error::Config("episode_length must be positive".into()));
        }
        if self.fleet_size == 0 {
            return Err(Error::Config("fleet_size must be positive".into()));
        }
        if !(self.dpr > 0.0 && self.dpr <= 1.0) {
            return Err(Error::Config(format!("dpr = {} outside (0, 1]", self.dpr)));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha = {} must be finite and >= 0", self.alpha)));
        }
        Ok(())
    }

    /// Decision epochs per episode.
    pub fn epochs_per_episode(&self) -> u64 {
        self.episode_length / self.rebalance_interval
    }
}

/// Per-station destination choice; `dest[i] == i` holds the surplus in place.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RebalanceAction {
    pub dest: Vec<Station>,
}

impl RebalanceAction {
    pub fn hold(n: usize) -> Self {
        Self { dest: (0..n).collect() }
    }
}

/// Expands a routing action into dispatch counts: station `i` sends
/// `floor(dpr * max(v_i - p_i, 0))` empty vehicles to `dest[i]`.
pub fn apply_rebalance(
    state: &mut FleetState,
    network: &Network,
    action: &RebalanceAction,
    dpr: f64,
) -> Result<Vec<Dispatch>> {
    let dispatches = plan_rebalance(state, network, action, dpr)?;
    state.dispatch(network, &dispatches)?;
    Ok(dispatches)
}

/// The dispatches `apply_rebalance` would make, without touching the state.
pub fn plan_rebalance(
    state: &FleetState,
    network: &Network,
    action: &RebalanceAction,
    dpr: f64,
) -> Result<Vec<Dispatch>> {
    let n = network.n();
    if action.dest.len() != n {
        return Err(Error::InvalidAction(format!(
            "action has {} destinations for {n} stations",
            action.dest.len()
        )));
    }
    let mut out = Vec::new();
    for (i, &j) in action.dest.iter().enumerate() {
        if j == i {
            continue;
        }
        if !network.neighbors(i).contains(&j) {
            return Err(Error::InvalidAction(format!(
                "station {i} routed to {j}, which is not among its neighbors"
            )));
        }
        let count = (dpr * f64::from(state.surplus(i)) + 1e-9).floor() as u32;
        if count > 0 {
            out.push(Dispatch {
                origin: i,
                destination: j,
                count,
            });
        }
    }
    Ok(out)
}

/// `-sum_i p_i - alpha * sum_ij y_ij d_ij`, with `d_ij` the miles implied by
/// the quantized travel time.
pub fn reward(state: &FleetState, dispatches: &[Dispatch], alpha: f64, network: &Network) -> f64 {
    let waiting = state.total_waiting() as f64;
    -waiting - alpha * dispatch_miles(dispatches, network)
}

pub fn dispatch_miles(dispatches: &[Dispatch], network: &Network) -> f64 {
    dispatches
        .iter()
        .map(|d| f64::from(d.count) * network.trip_miles(d.origin, d.destination))
        .sum()
}

/// Per-station imbalance `(p_i - v_i) / m`.
pub fn observe(state: &FleetState) -> Vec<f64> {
    let m = f64::from(state.fleet_size().max(1));
    (0..state.n())
        .map(|i| (f64::from(state.queue_len(i)) - f64::from(state.idle(i))) / m)
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub passengers_served: u64,
    pub passengers_arrived: u64,
    /// Seconds, summed over served passengers.
    pub total_wait: u64,
    /// Minutes per served passenger.
    pub avg_wait: f64,
    pub rebalance_trips: u64,
    /// Empty-vehicle miles.
    pub total_evmt: f64,
    /// Miles per rebalancing trip.
    pub avg_evmt: f64,
    /// `avg_wait * passengers_arrived`, in passenger-minutes.
    pub wait_cost: f64,
}

impl EpisodeMetrics {
    pub const FIELDS: [&'static str; 8] = [
        "passengers_served",
        "passengers_arrived",
        "total_wait",
        "avg_wait",
        "rebalance_trips",
        "total_evmt",
        "avg_evmt",
        "wait_cost",
    ];

    fn from_tally(t: &Tally) -> Self {
        let avg_wait = if t.served > 0 {
            t.total_wait as f64 / t.served as f64 / 60.0
        } else {
            0.0
        };
        let avg_evmt = if t.trips > 0 {
            t.evmt / t.trips as f64
        } else {
            0.0
        };
        Self {
            passengers_served: t.served,
            passengers_arrived: t.arrived,
            total_wait: t.total_wait,
            avg_wait,
            rebalance_trips: t.trips,
            total_evmt: t.evmt,
            avg_evmt,
            wait_cost: avg_wait * t.arrived as f64,
        }
    }

    /// Field-wise mean, with the derived ratios recomputed from the mean totals.
    pub fn mean(runs: &[EpisodeMetrics]) -> EpisodeMetrics {
        if runs.is_empty() {
            return EpisodeMetrics::default();
        }
        let k = runs.len() as f64;
        let sum = |f: fn(&EpisodeMetrics) -> f64| runs.iter().map(f).sum::<f64>() / k;
        let served = sum(|m| m.passengers_served as f64);
        let trips = sum(|m| m.rebalance_trips as f64);
        let total_wait = sum(|m| m.total_wait as f64);
        let evmt = sum(|m| m.total_evmt);
        let avg_wait = sum(|m| m.avg_wait);
        let arrived = sum(|m| m.passengers_arrived as f64);
        EpisodeMetrics {
            passengers_served: served.round() as u64,
            passengers_arrived: arrived.round() as u64,
            total_wait: total_wait.round() as u64,
            avg_wait,
            rebalance_trips: trips.round() as u64,
            total_evmt: evmt,
            avg_evmt: if trips > 0.0 { evmt / trips } else { 0.0 },
            wait_cost: sum(|m| m.wait_cost),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct Tally {
    arrived: u64,
    served: u64,
    total_wait: u64,
    trips: u64,
    evmt: f64,
}

/// A passenger arrival event as consumed by the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ArrivalEvent {
    pub tick: u64,
    pub origin: Station,
    pub destination: Station,
    pub count: u32,
}

/// Everything needed to resume an episode mid-way.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSnapshot {
    state: FleetState,
    arrival_rng: ChaCha8Rng,
    tally: Tally,
}

/// RNG dedicated to passenger arrivals for `seed`.
pub fn arrival_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// RNG for policy-side sampling, on a stream disjoint from arrivals.
pub fn policy_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

pub struct Simulator<'a> {
    network: &'a Network,
    config: SimConfig,
    sampler: ArrivalSampler,
    arrival_rng: ChaCha8Rng,
    state: FleetState,
    tally: Tally,
    buf: Vec<(Station, Station, u32)>,
    transcript: Option<Vec<ArrivalEvent>>,
}

impl<'a> Simulator<'a> {
    pub fn new(network: &'a Network, demand: &DemandModel, config: SimConfig) -> Result<Self> {
        config.validate()?;
        if demand.n() != network.n() {
            return Err(Error::Shape(format!(
                "demand covers {} stations, network has {}",
                demand.n(),
                network.n()
            )));
        }
        Ok(Self {
            network,
            sampler: ArrivalSampler::new(demand, 1),
            arrival_rng: arrival_rng(config.seed),
            state: FleetState::new(network.n(), config.fleet_size),
            tally: Tally::default(),
            buf: Vec::new(),
            transcript: None,
            config,
        })
    }

    pub fn from_snapshot(
        network: &'a Network,
        demand: &DemandModel,
        config: SimConfig,
        snapshot: SimSnapshot,
    ) -> Result<Self> {
        let mut sim = Self::new(network, demand, config)?;
        if snapshot.state.n() != network.n() {
            return Err(Error::Shape("snapshot does not match the network".into()));
        }
        sim.state = snapshot.state;
        sim.arrival_rng = snapshot.arrival_rng;
        sim.tally = snapshot.tally;
        Ok(sim)
    }

    pub fn snapshot(&self) -> SimSnapshot {
        SimSnapshot {
            state: self.state.clone(),
            arrival_rng: self.arrival_rng.clone(),
            tally: self.tally.clone(),
        }
    }

    /// Starts keeping every arrival event; see [`Simulator::transcript`].
    pub fn record_arrivals(&mut self) {
        self.transcript.get_or_insert_with(Vec::new);
    }

    pub fn transcript(&self) -> Option<&[ArrivalEvent]> {
        self.transcript.as_deref()
    }

    pub fn network(&self) -> &Network {
        self.network
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn state(&self) -> &FleetState {
        &self.state
    }

    pub fn is_done(&self) -> bool {
        self.state.tick() >= self.config.episode_length
    }

    pub fn is_decision_epoch(&self) -> bool {
        let t = self.state.tick();
        t > 0 && t % self.config.rebalance_interval == 0
    }

    /// Advances one second and returns the matching outcome.
    pub fn tick(&mut self) -> MatchOutcome {
        self.state.begin_tick();
        self.buf.clear();
        self.sampler.sample_into(&mut self.arrival_rng, &mut self.buf);
        let tick = self.state.tick();
        for &(o, d, c) in &self.buf {
            self.state.push_passengers(o, d, c);
            self.tally.arrived += u64::from(c);
            if let Some(t) = self.transcript.as_mut() {
                t.push(ArrivalEvent {
                    tick,
                    origin: o,
                    destination: d,
                    count: c,
                });
            }
        }
        let outcome = self.state.match_fcfs(self.network);
        self.tally.served += outcome.matched.len() as u64;
        self.tally.total_wait += outcome.matched.iter().map(|m| m.wait).sum::<u64>();
        outcome
    }

    /// Ticks until the next decision epoch. Returns `false` if the episode
    /// ends first.
    pub fn advance_to_decision(&mut self) -> bool {
        while !self.is_done() {
            self.tick();
            if self.is_decision_epoch() {
                return true;
            }
        }
        false
    }

    /// Executes a policy decision and returns the dispatches actually made.
    pub fn apply(&mut self, decision: &Decision) -> Result<Vec<Dispatch>> {
        let dispatches = match decision {
            Decision::Dispatch(d) => {
                self.state.dispatch(self.network, &d.dispatches)?;
                d.dispatches.clone()
            }
            Decision::Route(r) => {
                apply_rebalance(&mut self.state, self.network, &r.action, self.config.dpr)?
            }
        };
        self.tally.trips += dispatches.iter().map(|d| u64::from(d.count)).sum::<u64>();
        self.tally.evmt += dispatch_miles(&dispatches, self.network);
        Ok(dispatches)
    }

    pub fn reward(&self, dispatches: &[Dispatch]) -> f64 {
        reward(&self.state, dispatches, self.config.alpha, self.network)
    }

    pub fn observe(&self) -> Vec<f64> {
        observe(&self.state)
    }

    pub fn metrics(&self) -> EpisodeMetrics {
        EpisodeMetrics::from_tally(&self.tally)
    }
}

/// Runs one full episode under `policy`, consulting it at every decision epoch.
pub fn run_episode(
    config: &SimConfig,
    network: &Network,
    demand: &DemandModel,
    policy: &dyn RebalancePolicy,
) -> Result<EpisodeMetrics> {
    let mut sim = Simulator::new(network, demand, config.clone())?;
    let mut rng = policy_rng(config.seed);
    while sim.advance_to_decision() {
        let decision = policy.decide(sim.state(), network, &mut rng)?;
        sim.apply(&decision)?;
    }
    Ok(sim.metrics())
}

/// Like [`run_episode`], also returning a digest of the arrival transcript
/// so callers can check that two policies saw the same passengers.
pub fn run_episode_digest(
    config: &SimConfig,
    network: &Network,
    demand: &DemandModel,
    policy: &dyn RebalancePolicy,
) -> Result<(EpisodeMetrics, u64)> {
    use std::hash::{Hash, Hasher};
    let mut sim = Simulator::new(network, demand, config.clone())?;
    sim.record_arrivals();
    let mut rng = policy_rng(config.seed);
    while sim.advance_to_decision() {
        let decision = policy.decide(sim.state(), network, &mut rng)?;
        sim.apply(&decision)?;
    }
    let mut h = std::collections::hash_map::DefaultHasher::new();
    sim.transcript().unwrap_or_default().hash(&mut h);
    Ok((sim.metrics(), h.finish()))
}
