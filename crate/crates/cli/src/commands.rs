use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use chrono::NaiveTime;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use rebalance_core::ingest::{self, ColumnMap, FilterConfig};
use rebalance_core::mincostflow::{FlowSolution, TransportationInstance};
use rebalance_core::network::{DemandModel, Network};
use rebalance_core::policies::{
    CostSensitive, Decision, NeuralPolicy, PolicyKind, RebalancePolicy,
};
use rebalance_core::ppo::{
    load_weights, save_weights, write_diagnostics_header, write_diagnostics_row, ActionHead, Mlp, Trainer,
    TrainerCheckpoint,
};
use rebalance_core::report::{self, ComparisonRow};
use rebalance_core::scenario::ScenarioConfig;
use rebalance_core::sim::{EpisodeMetrics, FleetState};

use crate::{Cli, Command, CompareArgs, IngestArgs, SimulateArgs, SweepArgs, TrainArgs};

/// Zone IDs of the public taxi-zone map.
const ALL_ZONES: std::ops::RangeInclusive<u32> = 1..=265;

pub fn run(cli: &Cli) -> Result<()> {
    fs::create_dir_all(&cli.out_dir).map_err(|e| rebalance_core::Error::io(&cli.out_dir, e))?;
    match &cli.command {
        Command::Ingest(a) => ingest_cmd(cli, a),
        Command::Simulate(a) => simulate_cmd(cli, a),
        Command::Train(a) => train_cmd(cli, a),
        Command::Compare(a) => compare_cmd(cli, a),
        Command::SweepAlpha(a) => sweep_cmd(cli, a),
    }
}

fn threads(cli: &Cli) -> usize {
    if cli.threads > 0 {
        cli.threads
    } else {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    }
}

fn scenario(cli: &Cli) -> Result<ScenarioConfig> {
    let mut cfg = ScenarioConfig::load(Path::new(&cli.config))?;
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
        cfg.ppo.seed = seed;
    }
    if cli.threads > 0 {
        cfg.ppo.threads = cli.threads;
    }
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).map_err(|e| rebalance_core::Error::io(path, e))?,
    ))
}

fn write_string(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| rebalance_core::Error::io(path, e))?;
    Ok(())
}

// ---------------------------------------------------------------- ingest

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct IngestFile {
    filters: FilterConfig,
    columns: ColumnMap,
}

#[derive(Serialize)]
struct IngestSummary {
    zones: Vec<u32>,
    report: ingest::FilterReport,
    warnings: Vec<String>,
}

fn parse_window(s: &str) -> Result<(NaiveTime, NaiveTime)> {
    let (a, b) = s.split_once('-').context("window must look like HH:MM-HH:MM")?;
    let t = |x: &str| {
        NaiveTime::parse_from_str(x.trim(), "%H:%M")
            .map_err(|_| rebalance_core::Error::Config(format!("bad time {x:?} in window")))
    };
    Ok((t(a)?, t(b)?))
}

fn ingest_cmd(cli: &Cli, a: &IngestArgs) -> Result<()> {
    let mut file = match &a.filters {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| rebalance_core::Error::io(p, e))?;
            toml::from_str::<IngestFile>(&text).map_err(|e| rebalance_core::Error::Config(e.to_string()))?
        }
        None => IngestFile::default(),
    };
    if let Some(w) = &a.window {
        (file.filters.window_start, file.filters.window_end) = parse_window(w)?;
    }
    if !a.zones.is_empty() {
        file.filters.zones = a.zones.clone();
    }
    let delimiter = u8::try_from(a.delimiter).context("delimiter must be a single-byte character")?;
    let open = || File::open(&a.input).map_err(|e| rebalance_core::Error::io(&a.input, e));

    if let Some(top) = a.top {
        let wide = FilterConfig {
            zones: ALL_ZONES.collect(),
            ..file.filters.clone()
        };
        let (records, _) = ingest::ingest_csv(open()?, delimiter, &file.columns, &wide)?;
        let mut zones: Vec<u32> = ingest::demand_ranking(&records).into_iter().take(top).map(|(z, _)| z).collect();
        if zones.is_empty() {
            zones = vec![*ALL_ZONES.start()];
        }
        file.filters.zones = zones;
    }

    let (records, report) = ingest::ingest_csv(open()?, delimiter, &file.columns, &file.filters)?;
    let zones = file.filters.zones.clone();
    let mut warnings = Vec::new();
    if records.is_empty() {
        warnings.push("no trips passed the filters; matrices hold only the inf sentinel".to_string());
    }
    for w in &warnings {
        log::warn!("{w}");
        eprintln!("warning: {w}");
    }

    let out = &cli.out_dir;
    write_string(&out.join("interarrival.csv"), &ingest::interarrival_matrix(&records, &zones).to_csv_string())?;
    write_string(&out.join("triptime.csv"), &ingest::triptime_matrix(&records, &zones).to_csv_string())?;
    ingest::write_trips_csv(&records, &file.columns, create(&out.join("trips.csv"))?)?;

    let mut w = csv::Writer::from_writer(create(&out.join("demand_ranking.csv"))?);
    w.write_record(["zone", "pickups"])?;
    for (z, c) in ingest::demand_ranking(&records) {
        w.write_record([z.to_string(), c.to_string()])?;
    }
    w.flush()?;

    if let Some(zone) = a.fit_zone {
        let fit = ingest::exp_fit_quantiles(&ingest::pickup_gaps(&records, zone), 100)?;
        serde_json::to_writer_pretty(create(&out.join("exp_fit.json"))?, &fit)?;
    }

    let summary = IngestSummary { zones, report, warnings };
    serde_json::to_writer_pretty(create(&out.join("filter_report.json"))?, &summary.report)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

// -------------------------------------------------------------- policies

/// Cost-sensitive policy that keeps every instance it solves.
struct RecordingCostSensitive {
    log: Mutex<Vec<FlowRecord>>,
}

#[derive(Serialize)]
struct FlowRecord {
    tick: u64,
    instance: TransportationInstance,
    solution: FlowSolution,
}

impl RebalancePolicy for RecordingCostSensitive {
    fn name(&self) -> String {
        "costsensitive".into()
    }

    fn decide(&self, state: &FleetState, network: &Network, _rng: &mut ChaCha8Rng) -> rebalance_core::Result<Decision> {
        let (instance, solution) = CostSensitive::plan(state, network);
        let decision = CostSensitive::to_decision(state.n(), &instance, &solution);
        self.log.lock().expect("flow log poisoned").push(FlowRecord {
            tick: state.tick(),
            instance,
            solution,
        });
        Ok(Decision::Dispatch(decision))
    }
}

fn neural_policy(cfg: &ScenarioConfig, weights: Option<&PathBuf>, network: &Network) -> Result<NeuralPolicy> {
    let path = weights
        .or(cfg.weights.as_ref())
        .context("policy `ppo` needs trained weights (--weights or `weights` in the scenario)")?;
    let net = load_weights(path)?;
    check_fits(&net, network)?;
    Ok(NeuralPolicy::new(net, cfg.eval_mode))
}

fn check_fits(net: &Mlp, network: &Network) -> Result<()> {
    if net.input_len() != network.n() {
        return Err(rebalance_core::Error::Shape(format!(
            "weights expect {} stations, scenario has {}",
            net.input_len(),
            network.n()
        ))
        .into());
    }
    ActionHead::for_output_len(network, net.output_len())?;
    Ok(())
}

fn make_policy(
    kind: PolicyKind,
    cfg: &ScenarioConfig,
    weights: Option<&PathBuf>,
    network: &Network,
) -> Result<Box<dyn RebalancePolicy>> {
    match kind {
        PolicyKind::Ppo => Ok(Box::new(neural_policy(cfg, weights, network)?)),
        other => other
            .benchmark(cfg.backpressure.clone())
            .with_context(|| format!("cannot build policy {other}")),
    }
}

struct Evaluated {
    label: String,
    file_tag: String,
    runs: Vec<EpisodeMetrics>,
    digests: Vec<u64>,
}

fn evaluate(
    label: String,
    file_tag: String,
    policy: &dyn RebalancePolicy,
    cfg: &ScenarioConfig,
    network: &Network,
    demand: &DemandModel,
    threads: usize,
) -> Result<Evaluated> {
    let results = report::evaluate_seeds(policy, &cfg.sim, network, demand, &cfg.seeds, threads)?;
    let (runs, digests) = results.into_iter().unzip();
    Ok(Evaluated {
        label,
        file_tag,
        runs,
        digests,
    })
}

fn write_metrics(out: &Path, e: &Evaluated, seeds: &[u64]) -> Result<()> {
    let rows = report::metrics_rows(&e.file_tag, seeds, &e.runs);
    report::write_metrics_csv(&rows, create(&out.join(format!("metrics_{}.csv", e.file_tag)))?)?;
    Ok(())
}

/// Every policy must have consumed exactly the same arrivals for each seed.
fn assert_shared_arrivals(evaluated: &[Evaluated], seeds: &[u64]) -> Result<()> {
    if let Some(first) = evaluated.first() {
        for e in &evaluated[1..] {
            for (i, seed) in seeds.iter().enumerate() {
                if e.digests[i] != first.digests[i] {
                    bail!(
                        "arrival transcripts differ between {} and {} on seed {seed}",
                        first.label,
                        e.label
                    );
                }
            }
        }
    }
    Ok(())
}

// ------------------------------------------------------------- simulate

fn simulate_cmd(cli: &Cli, a: &SimulateArgs) -> Result<()> {
    let cfg = scenario(cli)?;
    let (network, demand) = cfg.build()?;
    let kinds = if a.policies.is_empty() { cfg.policies.clone() } else { a.policies.clone() };
    let mut means = Vec::new();
    for kind in kinds {
        let recorder = RecordingCostSensitive { log: Mutex::new(Vec::new()) };
        let dumping = kind == PolicyKind::CostSensitive && a.dump_flows.is_some();
        let boxed;
        let policy: &dyn RebalancePolicy = if dumping {
            &recorder
        } else {
            boxed = make_policy(kind, &cfg, a.weights.as_ref(), &network)?;
            boxed.as_ref()
        };
        // Dumping keeps one thread so instances come out in seed order.
        let t = if dumping { 1 } else { threads(cli) };
        let e = evaluate(kind.label().into(), kind.as_str().into(), policy, &cfg, &network, &demand, t)?;
        write_metrics(&cli.out_dir, &e, &cfg.seeds)?;
        if let (true, Some(path)) = (dumping, &a.dump_flows) {
            let log = recorder.log.into_inner().expect("flow log poisoned");
            serde_json::to_writer(create(path)?, &log)?;
        }
        means.push(serde_json::json!({
            "policy": kind.as_str(),
            "mean": EpisodeMetrics::mean(&e.runs),
        }));
    }
    println!("{}", serde_json::to_string(&means)?);
    Ok(())
}

// ---------------------------------------------------------------- train

pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const POLICY_WEIGHTS: &str = "policy.weights";
pub const VALUE_WEIGHTS: &str = "value.weights";

fn read_checkpoint(path: &Path) -> Result<TrainerCheckpoint> {
    let text = fs::read_to_string(path).map_err(|e| rebalance_core::Error::io(path, e))?;
    Ok(serde_json::from_str(&text).map_err(rebalance_core::Error::from)?)
}

fn write_checkpoint(path: &Path, cp: &TrainerCheckpoint) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer(&mut w, cp)?;
    w.flush()?;
    Ok(())
}

/// Trains under `cfg`, writing diagnostics, checkpoints and final weights to
/// `out`. Returns the trained policy network.
fn train_into(
    out: &Path,
    cfg: &ScenarioConfig,
    network: &Network,
    demand: &DemandModel,
    resume: Option<TrainerCheckpoint>,
) -> Result<Mlp> {
    fs::create_dir_all(out).map_err(|e| rebalance_core::Error::io(out, e))?;
    let diag_path = out.join(DIAGNOSTICS_FILE);
    let resuming = resume.is_some();
    let mut trainer = match resume {
        Some(cp) => Trainer::resume(network, demand, cp)?,
        None => Trainer::new(network, demand, cfg.sim.clone(), cfg.ppo.clone())?,
    };
    let append = resuming && diag_path.exists();
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&diag_path)
        .map_err(|e| rebalance_core::Error::io(&diag_path, e))?;
    let mut diag = csv::Writer::from_writer(file);
    if !append {
        write_diagnostics_header(&mut diag)?;
    }
    let every = cfg.checkpoint_every;
    let cp_dir = out.join("checkpoints");
    trainer.run(|t, stats| {
        write_diagnostics_row(&mut diag, stats)?;
        let it = t.iteration();
        if every > 0 && it % every as u64 == 0 {
            fs::create_dir_all(&cp_dir).map_err(|e| rebalance_core::Error::io(&cp_dir, e))?;
            write_checkpoint(&cp_dir.join(format!("checkpoint_{it:06}.json")), &t.checkpoint())
                .map_err(|e| rebalance_core::Error::Config(format!("{e:#}")))?;
        }
        Ok(())
    })?;
    write_checkpoint(&out.join(CHECKPOINT_FILE), &trainer.checkpoint())?;
    save_weights(trainer.policy(), out.join(POLICY_WEIGHTS))?;
    save_weights(trainer.value(), out.join(VALUE_WEIGHTS))?;
    let (policy, _) = trainer.into_nets();
    Ok(policy)
}

fn train_cmd(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let mut cfg = scenario(cli)?;
    if let Some(alpha) = a.alpha {
        cfg.sim.alpha = alpha;
    }
    if let Some(it) = a.iterations {
        cfg.ppo.iterations = it;
    }
    cfg.validate()?;
    let (network, demand) = cfg.build()?;
    let resume = match &a.resume {
        Some(p) => {
            let mut cp = read_checkpoint(p)?;
            if let Some(it) = a.iterations {
                cp.config.iterations = it;
            }
            if cli.threads > 0 {
                cp.config.threads = cli.threads;
            }
            Some(cp)
        }
        None => None,
    };
    train_into(&cli.out_dir, &cfg, &network, &demand, resume)?;
    println!(
        "{}",
        serde_json::json!({
            "policy_weights": cli.out_dir.join(POLICY_WEIGHTS),
            "diagnostics": cli.out_dir.join(DIAGNOSTICS_FILE),
        })
    );
    Ok(())
}

// -------------------------------------------------------------- compare

fn write_comparison(out: &Path, stem: &str, rows: &[ComparisonRow]) -> Result<String> {
    report::write_comparison_csv(rows, create(&out.join(format!("{stem}.csv")))?)?;
    let text = report::comparison_text(rows);
    write_string(&out.join(format!("{stem}.txt")), &text)?;
    Ok(text)
}

fn ppo_label(alpha: f64) -> String {
    format!("PPO (alpha={alpha})")
}

fn compare_cmd(cli: &Cli, a: &CompareArgs) -> Result<()> {
    let cfg = scenario(cli)?;
    let (network, demand) = cfg.build()?;
    let baseline = a.baseline.unwrap_or(cfg.baseline);
    let mut kinds = if a.policies.is_empty() { cfg.policies.clone() } else { a.policies.clone() };
    if !kinds.contains(&baseline) {
        kinds.push(baseline);
    }
    let mut evaluated = Vec::new();
    for kind in &kinds {
        let policy = make_policy(*kind, &cfg, a.weights.as_ref(), &network)?;
        let label = if *kind == PolicyKind::Ppo {
            ppo_label(cfg.sim.alpha)
        } else {
            kind.label().to_string()
        };
        let e = evaluate(label, kind.as_str().into(), policy.as_ref(), &cfg, &network, &demand, threads(cli))?;
        write_metrics(&cli.out_dir, &e, &cfg.seeds)?;
        evaluated.push(e);
    }
    assert_shared_arrivals(&evaluated, &cfg.seeds)?;
    let results: Vec<(String, EpisodeMetrics)> =
        evaluated.iter().map(|e| (e.label.clone(), EpisodeMetrics::mean(&e.runs))).collect();
    let base_label = &evaluated[kinds.iter().position(|k| *k == baseline).expect("baseline added")].label;
    let rows = report::comparison_rows(&results, base_label)?;
    print!("{}", write_comparison(&cli.out_dir, "comparison", &rows)?);
    Ok(())
}

// ---------------------------------------------------------------- sweep

fn alpha_tag(alpha: f64) -> String {
    format!("alpha_{alpha}")
}

fn sweep_cmd(cli: &Cli, a: &SweepArgs) -> Result<()> {
    let mut cfg = scenario(cli)?;
    if let Some(it) = a.iterations {
        cfg.ppo.iterations = it;
    }
    let alphas = if a.alphas.is_empty() { cfg.alphas.clone() } else { a.alphas.clone() };
    if alphas.is_empty() {
        bail!(rebalance_core::Error::Config("no alphas to sweep".into()));
    }
    cfg.alphas = alphas.clone();
    cfg.validate()?;
    let (network, demand) = cfg.build()?;
    let weights_dir = a.weights_dir.clone().unwrap_or_else(|| cli.out_dir.join("policies"));

    let base_policy = make_policy(cfg.baseline, &cfg, None, &network)?;
    let base = evaluate(
        cfg.baseline.label().into(),
        cfg.baseline.as_str().into(),
        base_policy.as_ref(),
        &cfg,
        &network,
        &demand,
        threads(cli),
    )?;
    write_metrics(&cli.out_dir, &base, &cfg.seeds)?;

    let mut evaluated = Vec::new();
    for &alpha in &alphas {
        let dir = weights_dir.join(alpha_tag(alpha));
        let path = dir.join(POLICY_WEIGHTS);
        let mut run_cfg = cfg.clone();
        run_cfg.sim.alpha = alpha;
        let net = if path.exists() && !a.retrain {
            log::info!("loading {}", path.display());
            load_weights(&path)?
        } else {
            log::info!("training alpha {alpha}");
            train_into(&dir, &run_cfg, &network, &demand, None)?
        };
        check_fits(&net, &network)?;
        let policy = NeuralPolicy::new(net, cfg.eval_mode);
        let e = evaluate(
            ppo_label(alpha),
            format!("ppo_{}", alpha_tag(alpha)),
            &policy,
            &run_cfg,
            &network,
            &demand,
            threads(cli),
        )?;
        write_metrics(&cli.out_dir, &e, &cfg.seeds)?;
        evaluated.push((alpha, e));
    }
    let mut all: Vec<Evaluated> = Vec::new();
    let mut points = Vec::new();
    for (alpha, e) in evaluated {
        points.push((alpha, EpisodeMetrics::mean(&e.runs)));
        all.push(e);
    }
    let base_mean = EpisodeMetrics::mean(&base.runs);
    let base_label = base.label.clone();
    all.push(base);
    assert_shared_arrivals(&all, &cfg.seeds)?;

    let results: Vec<(String, EpisodeMetrics)> =
        all.iter().map(|e| (e.label.clone(), EpisodeMetrics::mean(&e.runs))).collect();
    let rows = report::comparison_rows(&results, &base_label)?;
    print!("{}", write_comparison(&cli.out_dir, "sweep_comparison", &rows)?);
    let trade = report::tradeoff_rows(&points, &base_mean);
    report::write_tradeoff_csv(&trade, create(&cli.out_dir.join("tradeoff.csv"))?)?;
    Ok(())
}
