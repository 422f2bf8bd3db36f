//! The training loop: sample under a frozen policy, estimate advantages,
//! then take minibatch gradient steps on both networks.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::gae::gae_advantages;
use super::head::{ActionHead, HeadKind};
use super::loss::{clipped_surrogate_loss, value_loss, PpoBatch, PpoSample};
use super::mlp::{stack_rows, Mlp};
use crate::error::{Error, Result};
use crate::network::{DemandModel, Network};
use crate::policies::{Decision, RoutedAction};
use crate::sim::{SimConfig, SimSnapshot, Simulator};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    /// Discount per decision epoch.
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    /// Gradient steps per iteration.
    pub gradient_steps: usize,
    pub minibatch: usize,
    /// Decision epochs sampled per iteration.
    pub batch_size: usize,
    pub iterations: usize,
    pub samplers: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
    /// Rewards are divided by this before advantage estimation; defaults to
    /// the number of stations.
    pub reward_scale: Option<f64>,
    /// Multiplier on the initial policy output weights.
    pub policy_output_scale: f64,
    pub normalize_advantages: bool,
    pub head: HeadKind,
    /// Worker threads for sampling; 0 means one per sampler.
    pub threads: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
            gradient_steps: 30,
            minibatch: 128,
            batch_size: 4000,
            iterations: 2000,
            samplers: 1,
            seed: 0,
            learning_rate: 3e-4,
            hidden: vec![256, 256],
            reward_scale: None,
            policy_output_scale: 0.01,
            normalize_advantages: true,
            head: HeadKind::Shared,
            threads: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return bad(format!("clip = {} outside (0, 1)", self.clip));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda = {} outside [0, 1]", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma = {} outside [0, 1]", self.gamma));
        }
        if self.minibatch == 0 || self.batch_size == 0 || self.samplers == 0 {
            return bad("minibatch, batch_size and samplers must be positive".into());
        }
        if self.samplers > self.batch_size {
            return bad("more samplers than decision epochs per batch".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning_rate = {}", self.learning_rate));
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer of width 0".into());
        }
        if let Some(s) = self.reward_scale {
            if !(s.is_finite() && s > 0.0) {
                return bad(format!("reward_scale = {s}"));
            }
        }
        Ok(())
    }

    pub fn layer_sizes(&self, n: usize, out: usize) -> Vec<usize> {
        let mut sizes = vec![n];
        sizes.extend(&self.hidden);
        sizes.push(out);
        sizes
    }
}

/// Per-iteration diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub iteration: u64,
    /// Mean reward per epoch in the batch, scaled to a full episode.
    pub mean_reward: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub mean_kl: f64,
    pub wall_seconds: f64,
    pub clip_fraction: f64,
    /// Accumulated rewards of episodes that finished during sampling.
    pub episode_returns: Vec<f64>,
}

pub const DIAGNOSTIC_COLUMNS: [&str; 6] = [
    "iteration",
    "mean_reward",
    "policy_loss",
    "value_loss",
    "mean_kl",
    "wall_seconds",
];

pub fn write_diagnostics_header<W: Write>(out: &mut csv::Writer<W>) -> Result<()> {
    out.write_record(DIAGNOSTIC_COLUMNS)?;
    Ok(())
}

pub fn write_diagnostics_row<W: Write>(out: &mut csv::Writer<W>, s: &IterationStats) -> Result<()> {
    out.write_record([
        s.iteration.to_string(),
        s.mean_reward.to_string(),
        s.policy_loss.to_string(),
        s.value_loss.to_string(),
        s.mean_kl.to_string(),
        format!("{:.3}", s.wall_seconds),
    ])?;
    out.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SamplerState {
    sim: SimSnapshot,
    policy_rng: ChaCha8Rng,
    seed_rng: ChaCha8Rng,
    episode_return: f64,
}

/// Complete trainer state; resuming from it continues bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerCheckpoint {
    pub format: u32,
    pub iteration: u64,
    pub config: PpoConfig,
    pub sim: SimConfig,
    pub policy: Mlp,
    pub value: Mlp,
    policy_opt: AdamState,
    value_opt: AdamState,
    samplers: Vec<SamplerState>,
    rng: ChaCha8Rng,
}

const CHECKPOINT_FORMAT: u32 = 1;

struct Rollout {
    state: SamplerState,
    samples: Vec<PpoSample>,
    raw_rewards: Vec<f64>,
    returns: Vec<f64>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub struct Trainer<'a> {
    network: &'a Network,
    demand: &'a DemandModel,
    sim: SimConfig,
    config: PpoConfig,
    head: ActionHead,
    policy: Mlp,
    value: Mlp,
    policy_opt: AdamState,
    value_opt: AdamState,
    samplers: Vec<SamplerState>,
    rng: ChaCha8Rng,
    iteration: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(network: &'a Network, demand: &'a DemandModel, sim: SimConfig, config: PpoConfig) -> Result<Self> {
        config.validate()?;
        sim.validate()?;
        let n = network.n();
        let mut rng = stream_rng(config.seed, 2);
        let out = config.head.output_len(network);
        let policy = Mlp::init(&config.layer_sizes(n, out), config.policy_output_scale, &mut rng)?;
        let value = Mlp::init(&config.layer_sizes(n, 1), 1.0, &mut rng)?;
        let mut samplers = Vec::with_capacity(config.samplers);
        for k in 0..config.samplers as u64 {
            let mut seed_rng = stream_rng(config.seed, 1000 + k);
            let sim = fresh_episode(network, demand, &sim, seed_rng.next_u64())?;
            samplers.push(SamplerState {
                sim,
                policy_rng: stream_rng(config.seed, 2000 + k),
                seed_rng,
                episode_return: 0.0,
            });
        }
        Ok(Self {
            network,
            demand,
            policy_opt: AdamState::new(policy.params().len(), config.learning_rate),
            value_opt: AdamState::new(value.params().len(), config.learning_rate),
            head: ActionHead::with_kind(network, config.head),
            policy,
            value,
            samplers,
            rng,
            iteration: 0,
            sim,
            config,
        })
    }

    pub fn resume(network: &'a Network, demand: &'a DemandModel, cp: TrainerCheckpoint) -> Result<Self> {
        if cp.format != CHECKPOINT_FORMAT {
            return Err(Error::Schema(format!("checkpoint format {}", cp.format)));
        }
        cp.config.validate()?;
        let n = network.n();
        let out = cp.config.head.output_len(network);
        if cp.policy.sizes() != cp.config.layer_sizes(n, out).as_slice()
            || cp.value.sizes() != cp.config.layer_sizes(n, 1).as_slice()
        {
            return Err(Error::Shape("checkpoint networks do not fit this network".into()));
        }
        if cp.samplers.len() != cp.config.samplers {
            return Err(Error::Schema("sampler count differs from config".into()));
        }
        Ok(Self {
            network,
            demand,
            sim: cp.sim,
            head: ActionHead::with_kind(network, cp.config.head),
            policy: cp.policy,
            value: cp.value,
            policy_opt: cp.policy_opt,
            value_opt: cp.value_opt,
            samplers: cp.samplers,
            rng: cp.rng,
            iteration: cp.iteration,
            config: cp.config,
        })
    }

    pub fn checkpoint(&self) -> TrainerCheckpoint {
        TrainerCheckpoint {
            format: CHECKPOINT_FORMAT,
            iteration: self.iteration,
            config: self.config.clone(),
            sim: self.sim.clone(),
            policy: self.policy.clone(),
            value: self.value.clone(),
            policy_opt: self.policy_opt.clone(),
            value_opt: self.value_opt.clone(),
            samplers: self.samplers.clone(),
            rng: self.rng.clone(),
        }
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn config(&self) -> &PpoConfig {
        &self.config
    }

    pub fn policy(&self) -> &Mlp {
        &self.policy
    }

    pub fn value(&self) -> &Mlp {
        &self.value
    }

    fn reward_scale(&self) -> f64 {
        self.config.reward_scale.unwrap_or(self.network.n() as f64)
    }

    /// Collects one batch under the current policy without updating it.
    pub fn sample_batch(&mut self) -> Result<(PpoBatch, Vec<f64>, Vec<f64>)> {
        let s = self.samplers.len();
        let t = self.config.batch_size;
        let steps: Vec<usize> = (0..s).map(|k| t / s + usize::from(k < t % s)).collect();
        let states = std::mem::take(&mut self.samplers);
        let ctx = RolloutCtx {
            network: self.network,
            demand: self.demand,
            sim: &self.sim,
            config: &self.config,
            head: &self.head,
            policy: &self.policy,
            value: &self.value,
            reward_scale: self.reward_scale(),
        };
        let threads = if self.config.threads == 0 { s } else { self.config.threads };
        let results: Vec<Result<Rollout>> = if threads <= 1 || s == 1 {
            states.into_iter().zip(&steps).map(|(st, &n)| ctx.rollout(st, n)).collect()
        } else {
            let mut queue: Vec<(usize, SamplerState)> = states.into_iter().enumerate().collect();
            let mut out: Vec<Option<Result<Rollout>>> = (0..s).map(|_| None).collect();
            while !queue.is_empty() {
                let wave: Vec<_> = queue.drain(..threads.min(queue.len())).collect();
                std::thread::scope(|scope| {
                    let handles: Vec<_> = wave
                        .into_iter()
                        .map(|(k, st)| {
                            let ctx = &ctx;
                            let n = steps[k];
                            (k, scope.spawn(move || ctx.rollout(st, n)))
                        })
                        .collect();
                    for (k, h) in handles {
                        out[k] = Some(h.join().expect("sampler thread panicked"));
                    }
                });
            }
            out.into_iter().map(|r| r.expect("every sampler ran")).collect()
        };
        let mut batch = PpoBatch::default();
        let mut raw = Vec::with_capacity(t);
        let mut returns = Vec::new();
        for r in results {
            let r = r?;
            self.samplers.push(r.state);
            batch.samples.extend(r.samples);
            raw.extend(r.raw_rewards);
            returns.extend(r.returns);
        }
        Ok((batch, raw, returns))
    }

    /// One full iteration: sampling, advantage estimation and updates.
    pub fn step(&mut self) -> Result<IterationStats> {
        let start = Instant::now();
        let (batch, raw, returns) = self.sample_batch()?;
        let t = batch.len();
        let mb = self.config.minibatch.min(t);
        let mut order: Vec<usize> = (0..t).collect();
        let mut cursor = t;
        let (mut pl_sum, mut vl_sum, mut clip_sum) = (0.0, 0.0, 0.0);
        for _ in 0..self.config.gradient_steps {
            if cursor + mb > t {
                order.shuffle(&mut self.rng);
                cursor = 0;
            }
            let refs: Vec<&PpoSample> = order[cursor..cursor + mb].iter().map(|&i| &batch.samples[i]).collect();
            cursor += mb;
            let pl = clipped_surrogate_loss(
                &self.policy,
                &self.head,
                &refs,
                self.config.clip,
                self.config.normalize_advantages,
            )?;
            let (vl, vgrads) = value_loss(&self.value, &refs)?;
            if !pl.loss.is_finite() || !vl.is_finite() {
                return Err(Error::Diverged(format!(
                    "iteration {}: policy loss {}, value loss {}, max |advantage| {}, max |target| {}",
                    self.iteration,
                    pl.loss,
                    vl,
                    refs.iter().map(|s| s.advantage.abs()).fold(0.0, f64::max),
                    refs.iter().map(|s| s.target.abs()).fold(0.0, f64::max),
                )));
            }
            self.policy_opt.step(self.policy.params_mut(), &pl.grads)?;
            self.value_opt.step(self.value.params_mut(), &vgrads)?;
            pl_sum += pl.loss;
            vl_sum += vl;
            clip_sum += pl.clip_fraction;
        }
        let steps = self.config.gradient_steps.max(1) as f64;
        let x = stack_rows(batch.samples.iter().map(|s| s.obs.as_slice()), self.network.n());
        let new_scores = self.policy.predict(x.view())?;
        let mean_kl = batch
            .samples
            .iter()
            .enumerate()
            .map(|(b, s)| self.head.kl(&s.old_scores, new_scores.row(b).as_slice().expect("contiguous row")))
            .sum::<f64>()
            / t as f64;
        let stats = IterationStats {
            iteration: self.iteration,
            mean_reward: raw.iter().sum::<f64>() / t as f64 * self.sim.epochs_per_episode() as f64,
            policy_loss: pl_sum / steps,
            value_loss: vl_sum / steps,
            mean_kl,
            wall_seconds: start.elapsed().as_secs_f64(),
            clip_fraction: clip_sum / steps,
            episode_returns: returns,
        };
        self.iteration += 1;
        Ok(stats)
    }

    /// Runs until `config.iterations` have completed, calling `on_iteration`
    /// after each one.
    pub fn run<F>(&mut self, mut on_iteration: F) -> Result<Vec<IterationStats>>
    where
        F: FnMut(&Self, &IterationStats) -> Result<()>,
    {
        let mut history = Vec::new();
        while (self.iteration as usize) < self.config.iterations {
            let stats = self.step()?;
            log::info!(
                "iteration {} mean_reward {:.1} kl {:.4}",
                stats.iteration,
                stats.mean_reward,
                stats.mean_kl
            );
            on_iteration(self, &stats)?;
            history.push(stats);
        }
        Ok(history)
    }

    pub fn into_nets(self) -> (Mlp, Mlp) {
        (self.policy, self.value)
    }
}

fn fresh_episode(network: &Network, demand: &DemandModel, sim: &SimConfig, seed: u64) -> Result<SimSnapshot> {
    let cfg = SimConfig { seed, ..sim.clone() };
    let mut s = Simulator::new(network, demand, cfg)?;
    if !s.advance_to_decision() {
        return Err(Error::Config("episode shorter than one rebalancing interval".into()));
    }
    Ok(s.snapshot())
}

struct RolloutCtx<'c> {
    network: &'c Network,
    demand: &'c DemandModel,
    sim: &'c SimConfig,
    config: &'c PpoConfig,
    head: &'c ActionHead,
    policy: &'c Mlp,
    value: &'c Mlp,
    reward_scale: f64,
}

impl RolloutCtx<'_> {
    fn rollout(&self, mut st: SamplerState, steps: usize) -> Result<Rollout> {
        let n = self.network.n();
        let mut sim = Simulator::from_snapshot(self.network, self.demand, self.sim.clone(), st.sim.clone())?;
        let mut samples = Vec::with_capacity(steps);
        let mut raw_rewards = Vec::with_capacity(steps);
        let mut returns = Vec::new();
        for _ in 0..steps {
            let obs = sim.observe();
            let scores = self.policy.predict_one(&obs)?;
            let (action, lps) = self.head.sample(&scores, &mut st.policy_rng);
            let log_prob = lps.iter().sum();
            let decision = Decision::Route(RoutedAction {
                action: action.clone(),
                log_probs: Some(lps),
                scores: None,
            });
            let dispatches = sim.apply(&decision)?;
            let r = sim.reward(&dispatches);
            st.episode_return += r;
            raw_rewards.push(r);
            let done = !sim.advance_to_decision();
            if done {
                returns.push(st.episode_return);
                st.episode_return = 0.0;
                let snap = fresh_episode(self.network, self.demand, self.sim, st.seed_rng.next_u64())?;
                sim = Simulator::from_snapshot(self.network, self.demand, self.sim.clone(), snap)?;
            }
            samples.push(PpoSample {
                obs,
                action,
                log_prob,
                old_scores: scores,
                reward: r / self.reward_scale,
                value: 0.0,
                advantage: 0.0,
                target: 0.0,
                done,
            });
        }
        let next_obs = sim.observe();
        let x = stack_rows(samples.iter().map(|s| s.obs.as_slice()).chain([next_obs.as_slice()]), n);
        let values = self.value.predict(x.view())?;
        for (s, v) in samples.iter_mut().zip(values.column(0)) {
            s.value = *v;
        }
        let bootstrap = values[[samples.len(), 0]];
        let mut start = 0;
        while start < samples.len() {
            let end = samples[start..].iter().position(|s| s.done).map_or(samples.len(), |p| start + p + 1);
            let seg = &samples[start..end];
            let tail = if seg.last().is_some_and(|s| s.done) { 0.0 } else { bootstrap };
            let rewards: Vec<f64> = seg.iter().map(|s| s.reward).collect();
            let vals: Vec<f64> = seg.iter().map(|s| s.value).collect();
            let (adv, targets) = gae_advantages(&rewards, &vals, tail, self.config.gamma, self.config.lambda);
            for (s, (a, tg)) in samples[start..end].iter_mut().zip(adv.into_iter().zip(targets)) {
                s.advantage = a;
                s.target = tg;
            }
            start = end;
        }
        st.sim = sim.snapshot();
        Ok(Rollout {
            state: st,
            samples,
            raw_rewards,
            returns,
        })
    }
}

/// Trains from scratch for `config.iterations` iterations.
pub fn train(
    config: PpoConfig,
    sim: SimConfig,
    network: &Network,
    demand: &DemandModel,
) -> Result<(Mlp, Mlp, Vec<IterationStats>)> {
    let mut trainer = Trainer::new(network, demand, sim, config)?;
    let history = trainer.run(|_, _| Ok(()))?;
    let (p, v) = trainer.into_nets();
    Ok((p, v, history))
}
