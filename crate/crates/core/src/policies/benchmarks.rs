use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Decision, PolicyDecision, RebalancePolicy};
use crate::error::{Error, Result};
use crate::mincostflow::{build_rebalance_instance, solve_transportation, FlowSolution, TransportationInstance};
use crate::network::{Network, Station};
use crate::sim::FleetState;

/// Never rebalances.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoRebalance;

impl NoRebalance {
    pub fn decide(&self, _state: &FleetState) -> PolicyDecision {
        PolicyDecision::default()
    }
}

impl RebalancePolicy for NoRebalance {
    fn name(&self) -> String {
        "none".into()
    }

    fn decide(&self, state: &FleetState, _network: &Network, _rng: &mut ChaCha8Rng) -> Result<Decision> {
        Ok(Decision::Dispatch(NoRebalance::decide(self, state)))
    }
}

/// Index of the largest value in `candidates` by `key`, lowest station on ties.
fn argmax_by<F: Fn(Station) -> f64>(candidates: &[Station], key: F) -> Option<(Station, f64)> {
    let mut best: Option<(Station, f64)> = None;
    for &j in candidates {
        let k = key(j);
        best = match best {
            Some((bj, bk)) if bk > k || (bk == k && bj < j) => Some((bj, bk)),
            _ => Some((j, k)),
        };
    }
    best
}

/// Deficit-driven sourcing shared by MaxWeight and BackPressure: each station
/// short of vehicles pulls one at a time from the neighbor chosen by `pick`,
/// which sees the supply left after earlier assignments.
fn pull_from_neighbors<F>(state: &FleetState, network: &Network, mut pick: F) -> PolicyDecision
where
    F: FnMut(Station, &[u32]) -> Option<Station>,
{
    let n = state.n();
    let mut avail: Vec<u32> = (0..n).map(|j| state.surplus(j)).collect();
    let mut counts = vec![0u32; n * n];
    for i in 0..n {
        for _ in 0..state.deficit(i) {
            let Some(j) = pick(i, &avail) else { break };
            debug_assert!(network.neighbors(i).contains(&j));
            avail[j] -= 1;
            counts[j * n + i] += 1;
        }
    }
    PolicyDecision::from_counts(n, &counts)
}

/// Sends vehicles to every station with unserved passengers from the
/// neighbor holding the most idle vehicles.
#[derive(Debug, Clone, Copy, Default)]
pub struct MaxWeight;

impl MaxWeight {
    pub fn decide(&self, state: &FleetState, network: &Network) -> PolicyDecision {
        pull_from_neighbors(state, network, |i, avail| {
            argmax_by(network.neighbors(i), |j| f64::from(avail[j]))
                .filter(|&(_, v)| v > 0.0)
                .map(|(j, _)| j)
        })
    }
}

impl RebalancePolicy for MaxWeight {
    fn name(&self) -> String {
        "maxweight".into()
    }

    fn decide(&self, state: &FleetState, network: &Network, _rng: &mut ChaCha8Rng) -> Result<Decision> {
        Ok(Decision::Dispatch(MaxWeight::decide(self, state, network)))
    }
}

/// Slope `c` of the score `c * v_j - d_ji`, in miles per vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackpressureScoreConfig {
    pub c: f64,
}

impl Default for BackpressureScoreConfig {
    fn default() -> Self {
        Self { c: 0.1 }
    }
}

/// MaxWeight's sourcing loop with a distance-aware score; a vehicle moves
/// only if the best score is positive.
#[derive(Debug, Clone, Copy)]
pub struct BackPressure {
    cfg: BackpressureScoreConfig,
}

impl BackPressure {
    pub fn new(cfg: BackpressureScoreConfig) -> Result<Self> {
        if !(cfg.c.is_finite() && cfg.c > 0.0) {
            return Err(Error::Config(format!("backpressure slope c = {} must be positive", cfg.c)));
        }
        Ok(Self { cfg })
    }

    pub fn score(&self, idle: u32, miles: f64) -> f64 {
        self.cfg.c * f64::from(idle) - miles
    }

    pub fn decide(&self, state: &FleetState, network: &Network) -> PolicyDecision {
        pull_from_neighbors(state, network, |i, avail| {
            argmax_by(network.neighbors(i), |j| self.score(avail[j], network.distance(j, i)))
                .filter(|&(j, s)| s > 0.0 && avail[j] > 0)
                .map(|(j, _)| j)
        })
    }
}

impl RebalancePolicy for BackPressure {
    fn name(&self) -> String {
        "backpressure".into()
    }

    fn decide(&self, state: &FleetState, network: &Network, _rng: &mut ChaCha8Rng) -> Result<Decision> {
        Ok(Decision::Dispatch(BackPressure::decide(self, state, network)))
    }
}

/// Splits `total` in proportion to `weights` using floors plus largest
/// remainders; ties go to the earlier entry.
pub fn apportion(total: u32, weights: &[u32]) -> Vec<u32> {
    let w_sum: u64 = weights.iter().map(|&w| u64::from(w)).sum();
    if w_sum == 0 {
        return vec![0; weights.len()];
    }
    let mut shares: Vec<u32> = Vec::with_capacity(weights.len());
    let mut remainders: Vec<(u64, usize)> = Vec::with_capacity(weights.len());
    for (idx, &w) in weights.iter().enumerate() {
        let num = u64::from(total) * u64::from(w);
        shares.push((num / w_sum) as u32);
        remainders.push((num % w_sum, idx));
    }
    let leftover = total - shares.iter().sum::<u32>();
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, idx) in remainders.iter().take(leftover as usize) {
        shares[idx] += 1;
    }
    shares
}

/// Spreads each station's surplus over its neighbors in proportion to their
/// queue lengths.
#[derive(Debug, Clone, Copy, Default)]
pub struct Proportional;

impl Proportional {
    pub fn decide(&self, state: &FleetState, network: &Network) -> PolicyDecision {
        let n = state.n();
        let mut counts = vec![0u32; n * n];
        for j in 0..n {
            let surplus = state.surplus(j);
            if surplus == 0 {
                continue;
            }
            let nb = network.neighbors(j);
            let queues: Vec<u32> = nb.iter().map(|&i| state.queue_len(i)).collect();
            for (&i, share) in nb.iter().zip(apportion(surplus, &queues)) {
                counts[j * n + i] += share;
            }
        }
        PolicyDecision::from_counts(n, &counts)
    }
}

impl RebalancePolicy for Proportional {
    fn name(&self) -> String {
        "proportional".into()
    }

    fn decide(&self, state: &FleetState, network: &Network, _rng: &mut ChaCha8Rng) -> Result<Decision> {
        Ok(Decision::Dispatch(Proportional::decide(self, state, network)))
    }
}

/// Evens idle vehicles out towards `floor((M - total deficit) / n)` per
/// station by a minimum travel-time transportation plan over the whole graph.
#[derive(Debug, Clone, Copy, Default)]
pub struct CostSensitive;

impl CostSensitive {
    /// Desired idle level `v^d`, identical for every station.
    pub fn desired_level(state: &FleetState) -> u32 {
        let n = state.n() as u64;
        let deficit: u64 = (0..state.n()).map(|i| u64::from(state.deficit(i))).sum();
        (u64::from(state.fleet_size()).saturating_sub(deficit) / n) as u32
    }

    /// The transportation instance for this state and its solution.
    pub fn plan(state: &FleetState, network: &Network) -> (TransportationInstance, FlowSolution) {
        let n = state.n();
        let level = Self::desired_level(state);
        let desired = vec![level; n];
        let caps: Vec<u32> = (0..n).map(|i| state.surplus(i)).collect();
        let instance = build_rebalance_instance(state.idle_counts(), &desired, &caps, |i, j| {
            u64::from(network.travel_time(i, j))
        });
        let solution = solve_transportation(&instance);
        (instance, solution)
    }

    pub fn decide(&self, state: &FleetState, network: &Network) -> PolicyDecision {
        let (instance, solution) = Self::plan(state, network);
        Self::to_decision(state.n(), &instance, &solution)
    }

    /// Converts a solved instance back into station-to-station counts.
    pub fn to_decision(n: usize, instance: &TransportationInstance, solution: &FlowSolution) -> PolicyDecision {
        let mut counts = vec![0u32; n * n];
        for (s, row) in solution.flow.iter().enumerate() {
            for (t, &f) in row.iter().enumerate() {
                let (i, j) = (instance.source_stations[s], instance.sink_stations[t]);
                counts[i * n + j] += f as u32;
            }
        }
        PolicyDecision::from_counts(n, &counts)
    }
}

impl RebalancePolicy for CostSensitive {
    fn name(&self) -> String {
        "costsensitive".into()
    }

    fn decide(&self, state: &FleetState, network: &Network, _rng: &mut ChaCha8Rng) -> Result<Decision> {
        Ok(Decision::Dispatch(CostSensitive::decide(self, state, network)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Matrix;

    /// Star-ish network where station 0 has neighbors 1, 2, 3 in that distance order.
    fn network(rows: Vec<Vec<f64>>, k: usize) -> Network {
        Network::build(Matrix::from_rows(rows).unwrap(), 10.0, k).unwrap()
    }

    fn four_station() -> Network {
        network(
            vec![
                vec![0.0, 0.2, 0.3, 0.4],
                vec![0.2, 0.0, 0.5, 0.6],
                vec![0.3, 0.5, 0.0, 0.7],
                vec![0.4, 0.6, 0.7, 0.0],
            ],
            3,
        )
    }

    fn state(idle: Vec<u32>, queues: &[u32]) -> FleetState {
        let mut s = FleetState::with_idle(idle);
        for (i, &q) in queues.iter().enumerate() {
            s.push_passengers(i, (i + 1) % queues.len(), q);
        }
        s
    }

    #[test]
    fn maxweight_picks_largest_neighbor() {
        let net = four_station();
        let s = state(vec![0, 3, 1, 2], &[1, 0, 0, 0]);
        let d = MaxWeight.decide(&s, &net);
        assert_eq!(d.dispatches.len(), 1);
        assert_eq!(d.count(1, 0), 1);
    }

    #[test]
    fn maxweight_decrements_and_breaks_ties_low() {
        let net = four_station();
        let s = state(vec![0, 1, 1, 0], &[2, 0, 0, 0]);
        let d = MaxWeight.decide(&s, &net);
        assert_eq!(d.count(1, 0), 1);
        assert_eq!(d.count(2, 0), 1);
        assert_eq!(d.total(), 2);

        let s = state(vec![0, 0, 0, 0], &[3, 0, 0, 0]);
        assert!(MaxWeight.decide(&s, &net).is_empty());
    }

    #[test]
    fn backpressure_score_gate() {
        let bp = BackPressure::new(BackpressureScoreConfig { c: 0.1 }).unwrap();
        assert!((bp.score(5, 0.74) - (-0.24)).abs() < 1e-12);
        let net = network(vec![vec![0.0, 0.74], vec![0.74, 0.0]], 1);
        let s = state(vec![0, 5], &[1, 0]);
        assert!(bp.decide(&s, &net).is_empty());

        let bp = BackPressure::new(BackpressureScoreConfig { c: 1.0 }).unwrap();
        // station 0 with neighbors 1 (0.74 mi, 5 idle) and 2 (0.18 mi, 2 idle)
        let net = network(
            vec![
                vec![0.0, 0.74, 0.18],
                vec![0.74, 0.0, 1.0],
                vec![0.18, 1.0, 0.0],
            ],
            2,
        );
        assert!((bp.score(5, 0.74) - 4.26).abs() < 1e-12);
        assert!((bp.score(2, 0.18) - 1.82).abs() < 1e-12);
        let s = state(vec![0, 5, 2], &[1, 0, 0]);
        let d = bp.decide(&s, &net);
        assert_eq!(d.count(1, 0), 1);
        assert_eq!(d.total(), 1);

        assert!(BackPressure::new(BackpressureScoreConfig { c: 0.0 }).is_err());
    }

    #[test]
    fn apportion_cases() {
        assert_eq!(apportion(4, &[2, 2]), vec![2, 2]);
        assert_eq!(apportion(5, &[2, 1]), vec![3, 2]);
        assert_eq!(apportion(5, &[0, 0]), vec![0, 0]);
        assert_eq!(apportion(1, &[1, 1]), vec![1, 0]);
        assert_eq!(apportion(7, &[1, 1, 1]), vec![3, 2, 2]);
    }

    #[test]
    fn proportional_cases() {
        let net = network(
            vec![
                vec![0.0, 0.3, 0.4],
                vec![0.3, 0.0, 0.5],
                vec![0.4, 0.5, 0.0],
            ],
            2,
        );
        let s = state(vec![4, 0, 0], &[0, 2, 2]);
        let d = Proportional.decide(&s, &net);
        assert_eq!((d.count(0, 1), d.count(0, 2)), (2, 2));

        let s = state(vec![5, 0, 0], &[0, 2, 1]);
        let d = Proportional.decide(&s, &net);
        assert_eq!((d.count(0, 1), d.count(0, 2)), (3, 2));

        let s = state(vec![5, 0, 0], &[0, 0, 0]);
        assert!(Proportional.decide(&s, &net).is_empty());
    }

    #[test]
    fn costsensitive_two_node() {
        // 0.5/36 mi at 10 mph rounds to 5 s
        let d = 5.0 * 10.0 / 3600.0;
        let net = network(vec![vec![0.0, d], vec![d, 0.0]], 1);
        assert_eq!(net.travel_time(0, 1), 5);
        let s = state(vec![4, 0], &[0, 0]);
        assert_eq!(CostSensitive::desired_level(&s), 2);
        let dec = CostSensitive.decide(&s, &net);
        assert_eq!(dec.dispatches.len(), 1);
        assert_eq!(dec.count(0, 1), 2);

        let s = state(vec![2, 2], &[0, 0]);
        assert!(CostSensitive.decide(&s, &net).is_empty());
    }

    #[test]
    fn costsensitive_three_node_single_hop() {
        let sec = 10.0 / 3600.0;
        let net = network(
            vec![
                vec![0.0, sec, 4.0 * sec],
                vec![sec, 0.0, sec],
                vec![4.0 * sec, sec, 0.0],
            ],
            1,
        );
        let s = state(vec![6, 0, 0], &[0, 0, 0]);
        let dec = CostSensitive.decide(&s, &net);
        assert_eq!(dec.count(0, 1), 2);
        assert_eq!(dec.count(0, 2), 2);
        let cost: u64 = dec
            .dispatches
            .iter()
            .map(|d| u64::from(d.count) * u64::from(net.travel_time(d.origin, d.destination)))
            .sum();
        assert_eq!(cost, 10);
    }

    #[test]
    fn no_rebalance_is_empty() {
        let s = state(vec![0, 9], &[7, 0]);
        assert!(NoRebalance.decide(&s).is_empty());
    }
}
