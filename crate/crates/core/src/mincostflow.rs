//! Integer transportation problems solved by successive shortest paths.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransportationInstance {
    pub supplies: Vec<u64>,
    pub demands: Vec<u64>,
    /// `cost[s][t]`, one row per source.
    pub cost: Vec<Vec<u64>>,
    /// Station behind each source, when built from a fleet state.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub source_stations: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sink_stations: Vec<usize>,
}

impl TransportationInstance {
    pub fn new(supplies: Vec<u64>, demands: Vec<u64>, cost: Vec<Vec<u64>>) -> Self {
        Self {
            supplies,
            demands,
            cost,
            source_stations: Vec::new(),
            sink_stations: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.supplies.is_empty() || self.demands.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowSolution {
    pub flow: Vec<Vec<u64>>,
    pub total_cost: u64,
    pub shipped: u64,
}

/// Residual graph with node potentials; costs stay nonnegative after reweighting.
struct Residual {
    head: Vec<usize>,
    cap: Vec<u64>,
    cost: Vec<i64>,
    adj: Vec<Vec<usize>>,
}

impl Residual {
    fn new(nodes: usize) -> Self {
        Self {
            head: Vec::new(),
            cap: Vec::new(),
            cost: Vec::new(),
            adj: vec![Vec::new(); nodes],
        }
    }

    /// Adds `u -> v` and its reverse; returns the forward edge id.
    fn add_edge(&mut self, u: usize, v: usize, cap: u64, cost: i64) -> usize {
        let e = self.head.len();
        self.head.extend([v, u]);
        self.cap.extend([cap, 0]);
        self.cost.extend([cost, -cost]);
        self.adj[u].push(e);
        self.adj[v].push(e + 1);
        e
    }

    /// Dense Dijkstra on reduced costs. Among equal tentative distances the
    /// lowest node index is settled first, and parents only change on strict
    /// improvement, so paths are deterministic.
    fn shortest_paths(&self, source: usize, potential: &[i64]) -> (Vec<Option<i64>>, Vec<Option<usize>>) {
        let n = self.adj.len();
        let mut dist: Vec<Option<i64>> = vec![None; n];
        let mut parent = vec![None; n];
        let mut done = vec![false; n];
        dist[source] = Some(0);
        loop {
            let mut best: Option<(i64, usize)> = None;
            for u in 0..n {
                if let (false, Some(d)) = (done[u], dist[u]) {
                    if best.is_none_or(|(bd, _)| d < bd) {
                        best = Some((d, u));
                    }
                }
            }
            let Some((du, u)) = best else { break };
            done[u] = true;
            for &e in &self.adj[u] {
                if self.cap[e] == 0 {
                    continue;
                }
                let v = self.head[e];
                let reduced = self.cost[e] + potential[u] - potential[v];
                debug_assert!(reduced >= 0, "negative reduced cost");
                let nd = du + reduced;
                if dist[v].is_none_or(|dv| nd < dv) {
                    dist[v] = Some(nd);
                    parent[v] = Some(e);
                }
            }
        }
        (dist, parent)
    }
}

/// Ships `min(sum supplies, sum demands)` units at minimum total cost.
pub fn solve_transportation(instance: &TransportationInstance) -> FlowSolution {
    let ns = instance.supplies.len();
    let nt = instance.demands.len();
    let mut flow = vec![vec![0u64; nt]; ns];
    if ns == 0 || nt == 0 {
        return FlowSolution {
            flow,
            total_cost: 0,
            shipped: 0,
        };
    }

    // node layout: source, supply nodes, demand nodes, sink
    let src = 0;
    let sink = ns + nt + 1;
    let mut g = Residual::new(ns + nt + 2);
    let total_supply: u64 = instance.supplies.iter().sum();
    for (s, &sup) in instance.supplies.iter().enumerate() {
        g.add_edge(src, 1 + s, sup, 0);
    }
    let mut arcs = vec![vec![0usize; nt]; ns];
    for s in 0..ns {
        for t in 0..nt {
            arcs[s][t] = g.add_edge(1 + s, 1 + ns + t, total_supply, instance.cost[s][t] as i64);
        }
    }
    for (t, &dem) in instance.demands.iter().enumerate() {
        g.add_edge(1 + ns + t, sink, dem, 0);
    }

    let mut potential = vec![0i64; g.adj.len()];
    loop {
        let (dist, parent) = g.shortest_paths(src, &potential);
        if dist[sink].is_none() {
            break;
        }
        for (p, d) in potential.iter_mut().zip(&dist) {
            if let Some(d) = d {
                *p += d;
            }
        }
        let mut bottleneck = u64::MAX;
        let mut v = sink;
        while let Some(e) = parent[v] {
            bottleneck = bottleneck.min(g.cap[e]);
            v = g.head[e ^ 1];
        }
        let mut v = sink;
        while let Some(e) = parent[v] {
            g.cap[e] -= bottleneck;
            g.cap[e ^ 1] += bottleneck;
            v = g.head[e ^ 1];
        }
    }

    let mut total_cost = 0;
    let mut shipped = 0;
    for s in 0..ns {
        for t in 0..nt {
            let f = g.cap[arcs[s][t] ^ 1];
            flow[s][t] = f;
            total_cost += f * instance.cost[s][t];
            shipped += f;
        }
    }
    FlowSolution {
        flow,
        total_cost,
        shipped,
    }
}

/// Sources are stations with `min(cap_i, v_i - v_desired_i) > 0`, sinks are
/// stations below their desired level; costs are the travel times between them.
pub fn build_rebalance_instance(
    idle: &[u32],
    desired: &[u32],
    caps: &[u32],
    travel_time: impl Fn(usize, usize) -> u64,
) -> TransportationInstance {
    let mut inst = TransportationInstance::new(Vec::new(), Vec::new(), Vec::new());
    for i in 0..idle.len() {
        let supply = idle[i].saturating_sub(desired[i]).min(caps[i]);
        if supply > 0 {
            inst.supplies.push(u64::from(supply));
            inst.source_stations.push(i);
        }
        let deficit = desired[i].saturating_sub(idle[i]);
        if deficit > 0 {
            inst.demands.push(u64::from(deficit));
            inst.sink_stations.push(i);
        }
    }
    inst.cost = inst
        .source_stations
        .iter()
        .map(|&i| inst.sink_stations.iter().map(|&j| travel_time(i, j)).collect())
        .collect();
    inst
}
