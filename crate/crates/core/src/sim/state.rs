use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Network, Station};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passenger {
    pub destination: Station,
    pub arrival_tick: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TripKind {
    Occupied,
    Empty,
}

/// A batch of vehicles scheduled to become idle at `destination`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InTransit {
    pub destination: Station,
    pub count: u32,
    pub kind: TripKind,
}

/// One passenger picked up by `match_fcfs`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchedPassenger {
    pub origin: Station,
    pub destination: Station,
    pub wait: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MatchOutcome {
    /// `x_i`: vehicles leaving each station with a passenger this tick.
    pub departures: Vec<u32>,
    pub matched: Vec<MatchedPassenger>,
}

/// Empty vehicles sent from `origin` to `destination` in one decision epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dispatch {
    pub origin: Station,
    pub destination: Station,
    pub count: u32,
}

/// Closed-fleet state: FIFO passenger queues, idle vehicles and the schedule
/// of vehicles still on the road.
///
/// The in-transit schedule stands in for the departure histories: every
/// departure is recorded once, keyed by the tick it completes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetState {
    tick: u64,
    queues: Vec<VecDeque<Passenger>>,
    idle: Vec<u32>,
    schedule: BTreeMap<u64, Vec<InTransit>>,
    fleet_size: u32,
}

impl FleetState {
    /// `fleet_size` vehicles spread evenly, remainder to the lowest indices,
    /// with empty queues at tick 0.
    pub fn new(n: usize, fleet_size: u32) -> Self {
        let base = fleet_size / n as u32;
        let extra = fleet_size as usize % n;
        let idle = (0..n).map(|i| base + u32::from(i < extra)).collect();
        Self::with_idle(idle)
    }

    pub fn with_idle(idle: Vec<u32>) -> Self {
        Self {
            tick: 0,
            queues: vec![VecDeque::new(); idle.len()],
            fleet_size: idle.iter().sum(),
            idle,
            schedule: BTreeMap::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.idle.len()
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn fleet_size(&self) -> u32 {
        self.fleet_size
    }

    /// `p_i`: passengers waiting at `i`.
    #[inline]
    pub fn queue_len(&self, i: Station) -> u32 {
        self.queues[i].len() as u32
    }

    pub fn queue_lens(&self) -> Vec<u32> {
        self.queues.iter().map(|q| q.len() as u32).collect()
    }

    pub fn queue(&self, i: Station) -> &VecDeque<Passenger> {
        &self.queues[i]
    }

    /// `v_i`: idle vehicles at `i`.
    #[inline]
    pub fn idle(&self, i: Station) -> u32 {
        self.idle[i]
    }

    pub fn idle_counts(&self) -> &[u32] {
        &self.idle
    }

    /// `max(v_i - p_i, 0)`.
    #[inline]
    pub fn surplus(&self, i: Station) -> u32 {
        self.idle[i].saturating_sub(self.queue_len(i))
    }

    /// `max(p_i - v_i, 0)`.
    #[inline]
    pub fn deficit(&self, i: Station) -> u32 {
        self.queue_len(i).saturating_sub(self.idle[i])
    }

    pub fn total_waiting(&self) -> u64 {
        self.queues.iter().map(|q| q.len() as u64).sum()
    }

    pub fn schedule(&self) -> &BTreeMap<u64, Vec<InTransit>> {
        &self.schedule
    }

    pub fn vehicles_in_transit(&self) -> u64 {
        self.schedule
            .values()
            .flatten()
            .map(|t| u64::from(t.count))
            .sum()
    }

    pub fn vehicles_accounted(&self) -> u64 {
        self.idle.iter().map(|&v| u64::from(v)).sum::<u64>() + self.vehicles_in_transit()
    }

    /// Checks vehicle conservation and that nothing is scheduled in the past.
    pub fn check_invariants(&self) -> Result<()> {
        let total = self.vehicles_accounted();
        if total != u64::from(self.fleet_size) {
            return Err(Error::Config(format!(
                "conservation broken at tick {}: {total} vehicles, fleet is {}",
                self.tick, self.fleet_size
            )));
        }
        if let Some((&first, _)) = self.schedule.iter().next() {
            if first <= self.tick {
                return Err(Error::Config(format!(
                    "vehicles scheduled at tick {first} not delivered by tick {}",
                    self.tick
                )));
            }
        }
        for q in &self.queues {
            if q.iter().zip(q.iter().skip(1)).any(|(a, b)| a.arrival_tick > b.arrival_tick) {
                return Err(Error::Config("queue out of FIFO order".into()));
            }
        }
        Ok(())
    }

    pub(crate) fn begin_tick(&mut self) {
        self.tick += 1;
        if let Some(arrivals) = self.schedule.remove(&self.tick) {
            for a in arrivals {
                self.idle[a.destination] += a.count;
            }
        }
    }

    pub(crate) fn push_passengers(&mut self, origin: Station, destination: Station, count: u32) {
        let tick = self.tick;
        self.queues[origin].extend((0..count).map(|_| Passenger {
            destination,
            arrival_tick: tick,
        }));
    }

    /// Schedules `count` vehicles leaving `origin` now to become idle at
    /// `destination` after the travel time (at least one tick).
    fn schedule_trip(&mut self, network: &Network, origin: Station, destination: Station, count: u32, kind: TripKind) {
        let eta = self.tick + u64::from(network.travel_time(origin, destination).max(1));
        self.schedule.entry(eta).or_default().push(InTransit {
            destination,
            count,
            kind,
        });
    }

    /// Matches `min(p_i, v_i)` of the oldest passengers at each station with
    /// idle vehicles and puts those vehicles on the road.
    pub fn match_fcfs(&mut self, network: &Network) -> MatchOutcome {
        let n = self.n();
        let mut out = MatchOutcome {
            departures: vec![0; n],
            matched: Vec::new(),
        };
        for i in 0..n {
            let x = self.idle[i].min(self.queue_len(i));
            if x == 0 {
                continue;
            }
            self.idle[i] -= x;
            out.departures[i] = x;
            for _ in 0..x {
                let p = self.queues[i].pop_front().expect("queue holds at least x passengers");
                self.schedule_trip(network, i, p.destination, 1, TripKind::Occupied);
                out.matched.push(MatchedPassenger {
                    origin: i,
                    destination: p.destination,
                    wait: self.tick - p.arrival_tick,
                });
            }
        }
        out
    }

    /// Sends empty vehicles. Every dispatch must leave from a station with
    /// enough surplus; the whole batch is rejected otherwise.
    pub fn dispatch(&mut self, network: &Network, dispatches: &[Dispatch]) -> Result<()> {
        let n = self.n();
        let mut requested = vec![0u64; n];
        for d in dispatches {
            if d.origin >= n || d.destination >= n {
                return Err(Error::InvalidAction(format!("dispatch {d:?} outside {n} stations")));
            }
            if d.origin == d.destination || d.count == 0 {
                return Err(Error::InvalidAction(format!("degenerate dispatch {d:?}")));
            }
            requested[d.origin] += u64::from(d.count);
        }
        for (i, &r) in requested.iter().enumerate() {
            if r > u64::from(self.surplus(i)) {
                return Err(Error::InvalidAction(format!(
                    "station {i} asked to send {r} vehicles with surplus {}",
                    self.surplus(i)
                )));
            }
        }
        for d in dispatches {
            self.idle[d.origin] -= d.count;
            self.schedule_trip(network, d.origin, d.destination, d.count, TripKind::Empty);
        }
        Ok(())
    }
}
