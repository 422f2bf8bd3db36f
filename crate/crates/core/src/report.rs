//! Multi-seed evaluation and comparison tables.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{DemandModel, Network};
use crate::policies::RebalancePolicy;
use crate::sim::{run_episode_digest, EpisodeMetrics, SimConfig};

/// Runs one episode per seed, spreading seeds over up to `threads` workers.
/// Results come back in seed order whatever the thread count, each with the
/// digest of the arrival stream it consumed.
pub fn evaluate_seeds(
    policy: &dyn RebalancePolicy,
    base: &SimConfig,
    network: &Network,
    demand: &DemandModel,
    seeds: &[u64],
    threads: usize,
) -> Result<Vec<(EpisodeMetrics, u64)>> {
    let run = |seed: u64| {
        let cfg = SimConfig { seed, ..base.clone() };
        run_episode_digest(&cfg, network, demand, policy)
    };
    let threads = threads.max(1).min(seeds.len().max(1));
    if threads == 1 {
        return seeds.iter().map(|&s| run(s)).collect();
    }
    let chunk = seeds.len().div_ceil(threads);
    let parts: Vec<Result<Vec<(EpisodeMetrics, u64)>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|&s| run(s)).collect()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation thread panicked")).collect()
    });
    let mut out = Vec::with_capacity(seeds.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub algorithm: String,
    /// Minutes.
    pub avg_wait: f64,
    pub rebalance_trips: u64,
    /// Miles per rebalancing trip.
    pub avg_evmt: f64,
    pub rel_wait_cost: f64,
    pub rel_evmt: f64,
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        if a == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        a / b
    }
}

/// Rows relative to the entry labelled `baseline`, in input order.
pub fn comparison_rows(results: &[(String, EpisodeMetrics)], baseline: &str) -> Result<Vec<ComparisonRow>> {
    let base = results
        .iter()
        .find(|(l, _)| l == baseline)
        .map(|(_, m)| *m)
        .ok_or_else(|| Error::Config(format!("baseline {baseline:?} is not among the compared policies")))?;
    Ok(results
        .iter()
        .map(|(label, m)| {
            let is_base = label == baseline;
            ComparisonRow {
                algorithm: label.clone(),
                avg_wait: m.avg_wait,
                rebalance_trips: m.rebalance_trips,
                avg_evmt: m.avg_evmt,
                rel_wait_cost: if is_base { 1.0 } else { ratio(m.wait_cost, base.wait_cost) },
                rel_evmt: if is_base { 1.0 } else { ratio(m.total_evmt, base.total_evmt) },
            }
        })
        .collect())
}

pub const COMPARISON_HEADERS: [&str; 6] = [
    "Algorithm",
    "Avg wait (min)",
    "Rebalance trips",
    "Avg EVMT",
    "Rel. cost wait time",
    "Relative EVMT",
];

/// Aligned plain-text table.
pub fn comparison_text(rows: &[ComparisonRow]) -> String {
    let cells: Vec<[String; 6]> = rows
        .iter()
        .map(|r| {
            [
                r.algorithm.clone(),
                format!("{:.2}", r.avg_wait),
                r.rebalance_trips.to_string(),
                format!("{:.2}", r.avg_evmt),
                format!("{:.2}", r.rel_wait_cost),
                format!("{:.2}", r.rel_evmt),
            ]
        })
        .collect();
    let mut widths = COMPARISON_HEADERS.map(str::len);
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let line = |row: &[String]| {
        row.iter()
            .enumerate()
            .map(|(i, c)| if i == 0 { format!("{c:<w$}", w = widths[i]) } else { format!("{c:>w$}", w = widths[i]) })
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(&COMPARISON_HEADERS.map(String::from));
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for row in &cells {
        out.push_str(&line(row));
        out.push('\n');
    }
    out
}

fn write_serialized<W: Write, T: Serialize>(rows: &[T], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

fn read_serialized<R: Read, T: for<'de> Deserialize<'de>>(input: R) -> Result<Vec<T>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

pub fn write_comparison_csv<W: Write>(rows: &[ComparisonRow], out: W) -> Result<()> {
    write_serialized(rows, out)
}

pub fn read_comparison_csv<R: Read>(input: R) -> Result<Vec<ComparisonRow>> {
    read_serialized(input)
}

/// One line of a metrics file: a seed, or `mean`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub policy: String,
    pub seed: String,
    #[serde(flatten)]
    pub metrics: EpisodeMetrics,
}

pub fn metrics_rows(policy: &str, seeds: &[u64], runs: &[EpisodeMetrics]) -> Vec<MetricsRow> {
    let mut rows: Vec<MetricsRow> = seeds
        .iter()
        .zip(runs)
        .map(|(s, m)| MetricsRow {
            policy: policy.to_string(),
            seed: s.to_string(),
            metrics: *m,
        })
        .collect();
    rows.push(MetricsRow {
        policy: policy.to_string(),
        seed: "mean".into(),
        metrics: EpisodeMetrics::mean(runs),
    });
    rows
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["policy", "seed"];
    header.extend(EpisodeMetrics::FIELDS);
    w.write_record(&header)?;
    for r in rows {
        let m = &r.metrics;
        w.write_record([
            r.policy.clone(),
            r.seed.clone(),
            m.passengers_served.to_string(),
            m.passengers_arrived.to_string(),
            m.total_wait.to_string(),
            m.avg_wait.to_string(),
            m.rebalance_trips.to_string(),
            m.total_evmt.to_string(),
            m.avg_evmt.to_string(),
            m.wait_cost.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

pub fn read_metrics_csv<R: Read>(input: R) -> Result<Vec<MetricsRow>> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != 2 + EpisodeMetrics::FIELDS.len() {
            return Err(Error::Schema(format!("metrics row has {} fields", rec.len())));
        }
        let f = |i: usize| -> Result<f64> {
            rec[i].parse().map_err(|_| Error::Parse(format!("metrics field {:?}", &rec[i])))
        };
        let u = |i: usize| -> Result<u64> {
            rec[i].parse().map_err(|_| Error::Parse(format!("metrics field {:?}", &rec[i])))
        };
        out.push(MetricsRow {
            policy: rec[0].to_string(),
            seed: rec[1].to_string(),
            metrics: EpisodeMetrics {
                passengers_served: u(2)?,
                passengers_arrived: u(3)?,
                total_wait: u(4)?,
                avg_wait: f(5)?,
                rebalance_trips: u(6)?,
                total_evmt: f(7)?,
                avg_evmt: f(8)?,
                wait_cost: f(9)?,
            },
        });
    }
    Ok(out)
}

/// One point of the wait/EVMT trade-off curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    pub alpha: f64,
    pub rel_wait_cost: f64,
    pub rel_evmt: f64,
    pub avg_wait: f64,
    pub total_evmt: f64,
}

/// Trade-off rows against `baseline`, sorted by alpha.
pub fn tradeoff_rows(points: &[(f64, EpisodeMetrics)], baseline: &EpisodeMetrics) -> Vec<TradeoffRow> {
    let mut rows: Vec<TradeoffRow> = points
        .iter()
        .map(|(alpha, m)| TradeoffRow {
            alpha: *alpha,
            rel_wait_cost: ratio(m.wait_cost, baseline.wait_cost),
            rel_evmt: ratio(m.total_evmt, baseline.total_evmt),
            avg_wait: m.avg_wait,
            total_evmt: m.total_evmt,
        })
        .collect();
    rows.sort_by(|a, b| a.alpha.total_cmp(&b.alpha));
    rows
}

pub fn write_tradeoff_csv<W: Write>(rows: &[TradeoffRow], out: W) -> Result<()> {
    write_serialized(rows, out)
}

pub fn read_tradeoff_csv<R: Read>(input: R) -> Result<Vec<TradeoffRow>> {
    read_serialized(input)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::policies::MaxWeight;

    fn metrics(avg_wait: f64, arrived: u64, trips: u64, evmt: f64) -> EpisodeMetrics {
        EpisodeMetrics {
            passengers_served: arrived,
            passengers_arrived: arrived,
            total_wait: (avg_wait * 60.0 * arrived as f64) as u64,
            avg_wait,
            rebalance_trips: trips,
            total_evmt: evmt,
            avg_evmt: if trips > 0 { evmt / trips as f64 } else { 0.0 },
            wait_cost: avg_wait * arrived as f64,
        }
    }

    fn sample_results() -> Vec<(String, EpisodeMetrics)> {
        vec![
            ("None".into(), metrics(176.75, 46377, 0, 0.0)),
            ("MaxWeight".into(), metrics(0.56, 46377, 12417, 15272.0)),
            ("CostSensitive".into(), metrics(0.40, 46377, 30000, 52077.5)),
        ]
    }

    #[test]
    fn baseline_is_self_relative() {
        let rows = comparison_rows(&sample_results(), "MaxWeight").unwrap();
        assert_eq!((rows[1].rel_wait_cost, rows[1].rel_evmt), (1.0, 1.0));
        assert_eq!(rows[0].rebalance_trips, 0);
        assert_eq!(rows[0].avg_evmt, 0.0);
        assert_eq!(rows[0].rel_evmt, 0.0);
        assert!((rows[2].rel_evmt - 3.41).abs() < 0.005);
        assert!(comparison_rows(&sample_results(), "Oracle").is_err());
    }

    #[test]
    fn maxweight_average_evmt() {
        let rows = comparison_rows(&sample_results(), "MaxWeight").unwrap();
        assert_eq!(format!("{:.2}", rows[1].avg_evmt), "1.23");
    }

    #[test]
    fn csv_round_trips() {
        let rows = comparison_rows(&sample_results(), "MaxWeight").unwrap();
        let mut buf = Vec::new();
        write_comparison_csv(&rows, &mut buf).unwrap();
        assert_eq!(read_comparison_csv(buf.as_slice()).unwrap(), rows);

        let runs: Vec<EpisodeMetrics> = sample_results().into_iter().map(|(_, m)| m).collect();
        let mrows = metrics_rows("maxweight", &[0, 1, 2], &runs);
        let mut buf = Vec::new();
        write_metrics_csv(&mrows, &mut buf).unwrap();
        assert_eq!(read_metrics_csv(buf.as_slice()).unwrap(), mrows);

        let trade = tradeoff_rows(&[(10.0, runs[2]), (0.1, runs[1])], &runs[1]);
        assert_eq!(trade[0].alpha, 0.1);
        let mut buf = Vec::new();
        write_tradeoff_csv(&trade, &mut buf).unwrap();
        assert_eq!(read_tradeoff_csv(buf.as_slice()).unwrap(), trade);
    }

    #[test]
    fn text_table_has_header_and_rows() {
        let rows = comparison_rows(&sample_results(), "MaxWeight").unwrap();
        let text = comparison_text(&rows);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[0].starts_with("Algorithm"));
        assert!(lines[3].contains("1.00"));
    }

    #[test]
    fn threaded_evaluation_matches_sequential() {
        let net = fixtures::desk_network().unwrap();
        let demand = fixtures::desk_demand().unwrap();
        let sim = SimConfig {
            episode_length: 3600,
            ..fixtures::desk_sim_config(10.0, 0)
        };
        let seeds = [4, 5, 6];
        let a = evaluate_seeds(&MaxWeight, &sim, &net, &demand, &seeds, 1).unwrap();
        let b = evaluate_seeds(&MaxWeight, &sim, &net, &demand, &seeds, 3).unwrap();
        assert_eq!(a, b);
        let none = evaluate_seeds(&crate::policies::NoRebalance, &sim, &net, &demand, &seeds, 2).unwrap();
        for (x, y) in a.iter().zip(&none) {
            assert_eq!(x.1, y.1, "policies must see the same arrivals");
            assert_eq!(x.0.passengers_arrived, y.0.passengers_arrived);
        }
        assert_ne!(a[0].1, a[1].1);
    }
}
