use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rebalance_core::ingest::FilterReport;
use rebalance_core::network::LabeledMatrix;
use rebalance_core::policies::{NeuralPolicy, RebalancePolicy, SampleMode};
use rebalance_core::ppo::load_weights;
use rebalance_core::report::{read_comparison_csv, read_metrics_csv, read_tradeoff_csv};
use rebalance_core::{fixtures, sim};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rebalance"))
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "rebalance {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn run_err(args: &[&str]) -> serde_json::Value {
    let out = bin().args(args).output().expect("binary runs");
    assert!(!out.status.success(), "expected failure for {args:?}");
    let stderr = String::from_utf8_lossy(&out.stderr);
    let last = stderr.lines().last().expect("error line");
    serde_json::from_str(last).unwrap_or_else(|_| panic!("not JSON: {stderr}"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Desk network, one hour, tiny networks and batches so training is quick.
fn small_scenario(dir: &Path) -> PathBuf {
    let path = dir.join("small.toml");
    fs::write(
        &path,
        r#"
name = "small"
seeds = [0, 1]
checkpoint_every = 1
alphas = [10.0]

[network]
fixture = "desk"
k = 4

[sim]
fleet_size = 50
episode_length = 3600
alpha = 10.0

[ppo]
iterations = 2
batch_size = 40
minibatch = 20
gradient_steps = 3
hidden = [8]
reward_scale = 100.0
"#,
    )
    .unwrap();
    path
}

const HEADER: &str = "VendorID,tpep_pickup_datetime,tpep_dropoff_datetime,passenger_count,trip_distance,RatecodeID,PULocationID,DOLocationID,fare_amount,total_amount";

/// 100 rows on weekdays; 60 pass the default filters on zones 1..=3.
fn trip_fixture(path: &Path) {
    let mut text = String::from(HEADER);
    text.push('\n');
    for i in 0..100u32 {
        let day = 2 + (i % 5); // 2019-12-02 is a Monday
        let minute = i % 50;
        let (pu, hour) = match i % 5 {
            0 => (9, 8),  // zone outside the list
            1 => (1, 10), // outside the window
            _ => (1 + i % 3, 8),
        };
        let dropoff_zone = 1 + (i + 1) % 3;
        text.push_str(&format!(
            "2,2019-12-{day:02} {hour:02}:{minute:02}:00,2019-12-{day:02} {hour:02}:{:02}:30,1,1.5,1,{pu},{dropoff_zone},9.0,12.3\n",
            minute + 5
        ));
    }
    fs::write(path, text).unwrap();
}

#[test]
fn ingest_writes_reconciling_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("trips.csv");
    trip_fixture(&input);
    let out = dir.path().join("out");
    run(&["--out-dir", s(&out), "ingest", "--input", s(&input), "--zones", "1,2,3"]);
    for f in ["interarrival.csv", "triptime.csv", "filter_report.json", "demand_ranking.csv", "trips.csv"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let report: FilterReport = serde_json::from_str(&fs::read_to_string(out.join("filter_report.json")).unwrap()).unwrap();
    assert_eq!(report.input, 100);
    assert!(report.reconciles());
    assert_eq!(report.output, 60);
    let ia = LabeledMatrix::from_csv_path(out.join("interarrival.csv")).unwrap();
    assert_eq!(ia.labels, ["1", "2", "3"]);
}

#[test]
fn ingest_names_the_missing_column() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("trips.csv");
    fs::write(&input, HEADER.replace(",RatecodeID", "") + "\n").unwrap();
    let err = run_err(&["--out-dir", s(&dir.path().join("o")), "ingest", "--input", s(&input), "--zones", "1"]);
    assert_eq!(err["kind"], "schema");
    assert!(err["error"].as_str().unwrap().contains("RatecodeID"));
}

#[test]
fn ingest_empty_result_warns_and_writes_sentinels() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("trips.csv");
    trip_fixture(&input);
    let out = dir.path().join("out");
    let o = run(&["--out-dir", s(&out), "ingest", "--input", s(&input), "--zones", "40,41"]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
    let ia = LabeledMatrix::from_csv_path(out.join("interarrival.csv")).unwrap();
    assert!(ia.values.rows().flatten().all(|v| v.is_infinite()));
}

#[test]
fn simulate_none_has_no_trips_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_scenario(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        run(&["--config", s(&cfg), "--out-dir", s(out), "simulate", "--policy", "none,maxweight"]);
    }
    let rows = read_metrics_csv(fs::File::open(a.join("metrics_none.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.metrics.rebalance_trips == 0));
    for f in ["metrics_none.csv", "metrics_maxweight.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
}

#[test]
fn simulate_arrivals_match_poisson_total() {
    let dir = tempfile::tempdir().unwrap();
    let seeds: Vec<u64> = (0..4).collect();
    let cfg = dir.path().join("t2.toml");
    fs::write(&cfg, format!("seeds = {seeds:?}\n[sim]\nfleet_size = 1000\n")).unwrap();
    let out = dir.path().join("out");
    run(&["--config", s(&cfg), "--out-dir", s(&out), "simulate", "--policy", "maxweight"]);
    let rows = read_metrics_csv(fs::File::open(out.join("metrics_maxweight.csv")).unwrap()).unwrap();
    let mean = rows.iter().find(|r| r.seed == "mean").unwrap().metrics.passengers_arrived as f64;
    // The sum of all pair counts over ten hours is Poisson with this mean.
    let expected = fixtures::manhattan_demand().unwrap().total_rate() * 36_000.0;
    let sigma = (expected / seeds.len() as f64).sqrt();
    assert!((mean - expected).abs() < 3.0 * sigma + 0.5, "{mean} vs {expected} (sigma {sigma})");
}

#[test]
fn simulate_dumps_flow_instances() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_scenario(dir.path());
    let dump = dir.path().join("flows.json");
    run(&[
        "--config",
        s(&cfg),
        "--out-dir",
        s(&dir.path().join("o")),
        "simulate",
        "--policy",
        "costsensitive",
        "--dump-flows",
        s(&dump),
    ]);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(dump).unwrap()).unwrap();
    let records = v.as_array().unwrap();
    // Two seeds, 36 decision epochs each in an hour.
    assert_eq!(records.len(), 72);
    assert!(records[0]["solution"]["flow"].is_array());
}

#[test]
fn train_smoke_and_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_scenario(dir.path());
    let out = dir.path().join("train");
    run(&["--config", s(&cfg), "--out-dir", s(&out), "train", "--iterations", "1"]);
    let diag = fs::read_to_string(out.join("diagnostics.csv")).unwrap();
    assert_eq!(diag.lines().count(), 2, "header plus one row");

    let net = load_weights(out.join("policy.weights")).unwrap();
    let network = fixtures::desk_network().unwrap();
    let policy = NeuralPolicy::new(net, SampleMode::Sample);
    let state = sim::FleetState::new(network.n(), 50);
    let mut rng = sim::policy_rng(0);
    assert!(policy.decide(&state, &network, &mut rng).is_ok());

    let cmp = dir.path().join("cmp");
    let weights = out.join("policy.weights");
    run(&["--config", s(&cfg), "--out-dir", s(&cmp), "simulate", "--policy", "ppo", "--weights", s(&weights)]);
    assert!(cmp.join("metrics_ppo.csv").exists());
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_scenario(dir.path());
    let full = dir.path().join("full");
    run(&["--config", s(&cfg), "--out-dir", s(&full), "train", "--iterations", "3"]);

    let part = dir.path().join("part");
    run(&["--config", s(&cfg), "--out-dir", s(&part), "train", "--iterations", "1"]);
    let cp = part.join("checkpoints").join("checkpoint_000001.json");
    run(&["--config", s(&cfg), "--out-dir", s(&part), "train", "--iterations", "3", "--resume", s(&cp)]);

    assert_eq!(fs::read(full.join("policy.weights")).unwrap(), fs::read(part.join("policy.weights")).unwrap());
    assert_eq!(fs::read(full.join("value.weights")).unwrap(), fs::read(part.join("value.weights")).unwrap());
    assert_eq!(fs::read_to_string(part.join("diagnostics.csv")).unwrap().lines().count(), 4);
}

#[test]
fn compare_baseline_and_none_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_scenario(dir.path());
    let out = dir.path().join("cmp");
    let o = run(&["--config", s(&cfg), "--out-dir", s(&out), "compare", "--policy", "none,maxweight,proportional"]);
    let rows = read_comparison_csv(fs::File::open(out.join("comparison.csv")).unwrap()).unwrap();
    let mw = rows.iter().find(|r| r.algorithm == "MaxWeight").unwrap();
    assert_eq!((mw.rel_wait_cost, mw.rel_evmt), (1.0, 1.0));
    let none = rows.iter().find(|r| r.algorithm == "None").unwrap();
    assert_eq!((none.rebalance_trips, none.avg_evmt, none.rel_evmt), (0, 0.0, 0.0));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.starts_with("Algorithm"));
    assert_eq!(text, fs::read_to_string(out.join("comparison.txt")).unwrap());
}

#[test]
fn compare_adds_missing_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_scenario(dir.path());
    let out = dir.path().join("cmp");
    run(&["--config", s(&cfg), "--out-dir", s(&out), "compare", "--policy", "none", "--baseline", "costsensitive"]);
    let rows = read_comparison_csv(fs::File::open(out.join("comparison.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1].algorithm, "CostSensitive");
    assert_eq!(rows[1].rel_wait_cost, 1.0);
}

#[test]
fn sweep_single_alpha_matches_compare() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_scenario(dir.path());
    let out = dir.path().join("sweep");
    run(&["--config", s(&cfg), "--out-dir", s(&out), "sweep-alpha", "--alphas", "10"]);
    let sweep = read_comparison_csv(fs::File::open(out.join("sweep_comparison.csv")).unwrap()).unwrap();

    let weights = out.join("policies").join("alpha_10").join("policy.weights");
    let cmp = dir.path().join("cmp");
    run(&[
        "--config",
        s(&cfg),
        "--out-dir",
        s(&cmp),
        "compare",
        "--policy",
        "ppo,maxweight",
        "--weights",
        s(&weights),
    ]);
    let compare = read_comparison_csv(fs::File::open(cmp.join("comparison.csv")).unwrap()).unwrap();
    assert_eq!(sweep, compare);
}

#[test]
fn sweep_rows_sorted_by_alpha_and_weights_reused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_scenario(dir.path());
    let out = dir.path().join("sweep");
    let args = ["--config", s(&cfg), "--out-dir", s(&out), "sweep-alpha", "--alphas", "1000,0.1,10", "--iterations", "1"];
    run(&args);
    let rows = read_tradeoff_csv(fs::File::open(out.join("tradeoff.csv")).unwrap()).unwrap();
    let alphas: Vec<f64> = rows.iter().map(|r| r.alpha).collect();
    assert_eq!(alphas, [0.1, 10.0, 1000.0]);

    let before = fs::read(out.join("tradeoff.csv")).unwrap();
    let stamp = fs::metadata(out.join("policies/alpha_10/policy.weights")).unwrap().modified().unwrap();
    run(&args);
    assert_eq!(fs::read(out.join("tradeoff.csv")).unwrap(), before);
    let again = fs::metadata(out.join("policies/alpha_10/policy.weights")).unwrap().modified().unwrap();
    assert_eq!(stamp, again, "existing weights are loaded, not retrained");
}

#[test]
fn failures_report_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let err = run_err(&["--config", "missing.toml", "--out-dir", s(&out), "simulate"]);
    assert_eq!(err["kind"], "io");
    let err = run_err(&["--out-dir", s(&out), "compare", "--policy", "ppo"]);
    assert!(err["error"].as_str().unwrap().contains("weights"));
    let err = run_err(&["--out-dir", s(&out), "simulate", "--policy", "fastest"]);
    assert_eq!(err["kind"], "usage");
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[ppo]\nclip = 5.0\n").unwrap();
    let err = run_err(&["--config", s(&bad), "--out-dir", s(&out), "simulate"]);
    assert_eq!(err["kind"], "config");
}
