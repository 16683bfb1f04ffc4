//! Experiment harness: configuration loading with CLI overrides, the
//! train/eval/sweep/validate commands, and their CSV artifacts.
//!
//! Reproducibility scheme: every run derives its randomness from the run
//! seed through fixed ChaCha12 streams — the simulator consumes the seed
//! itself, network initialization uses stream 1, the training loop
//! (exploration, batch sampling, chain starts) stream 2, and evaluation
//! stream 3. Identical config + seeds therefore reproduce every CSV
//! bit-exactly; parallel workers only ever touch disjoint (value, seed)
//! cells that are written out in deterministic order.

use crate::agent::{Agent, AgentConfig, Algo, Transition};
use crate::env::{reward, Env, RewardParams};
use crate::error::{Error, Result};
use crate::macsim::{bianchi_fixed_point, sim_new, SimConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    D3pg,
    Ddpg,
    Beb,
}

impl Algorithm {
    pub fn as_str(&self) -> &'static str {
        match self {
            Algorithm::D3pg => "d3pg",
            Algorithm::Ddpg => "ddpg",
            Algorithm::Beb => "beb",
        }
    }

    fn agent_algo(&self) -> Option<Algo> {
        match self {
            Algorithm::D3pg => Some(Algo::D3pg),
            Algorithm::Ddpg => Some(Algo::Ddpg),
            Algorithm::Beb => None,
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "d3pg" => Ok(Algorithm::D3pg),
            "ddpg" => Ok(Algorithm::Ddpg),
            "beb" => Ok(Algorithm::Beb),
            other => Err(Error::Config(format!(
                "unknown algorithm '{other}' (expected d3pg|ddpg|beb)"
            ))),
        }
    }
}

/// Learner hyperparameters as they appear in config files; the state/action
/// dimensions are derived from the scenario.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct AgentHyper {
    pub hidden: Vec<usize>,
    pub denoise_steps: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub gamma: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub sigma0: f64,
    pub sigma_decay: f64,
    pub sigma_min: f64,
}

impl Default for AgentHyper {
    fn default() -> Self {
        let c = AgentConfig::new(1, 1);
        AgentHyper {
            hidden: c.hidden,
            denoise_steps: c.denoise_steps,
            actor_lr: c.actor_lr,
            critic_lr: c.critic_lr,
            gamma: c.gamma,
            tau: c.tau,
            batch_size: c.batch_size,
            buffer_capacity: c.buffer_capacity,
            sigma0: c.sigma0,
            sigma_decay: c.sigma_decay,
            sigma_min: c.sigma_min,
        }
    }
}

impl AgentHyper {
    pub fn agent_config(&self, state_dim: usize, action_dim: usize) -> AgentConfig {
        AgentConfig {
            state_dim,
            action_dim,
            hidden: self.hidden.clone(),
            denoise_steps: self.denoise_steps,
            actor_lr: self.actor_lr,
            critic_lr: self.critic_lr,
            gamma: self.gamma,
            tau: self.tau,
            batch_size: self.batch_size,
            buffer_capacity: self.buffer_capacity,
            sigma0: self.sigma0,
            sigma_decay: self.sigma_decay,
            sigma_min: self.sigma_min,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub algo: Algorithm,
    /// control periods per training run (100 s at the 50 ms period)
    pub interactions: u64,
    /// simulated seconds per evaluation episode, exploration off
    pub eval_seconds: f64,
    pub eval_episodes: u32,
    pub seeds: Vec<u64>,
    /// control period length in milliseconds
    pub dt_ms: f64,
    pub out_dir: PathBuf,
    /// checkpoint every this many interactions (0 = final checkpoint only)
    pub checkpoint_every: u64,
    pub scenario: SimConfig,
    pub agent: AgentHyper,
    pub reward: RewardParams,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            algo: Algorithm::D3pg,
            interactions: 2000,
            eval_seconds: 20.0,
            eval_episodes: 1,
            seeds: vec![0, 1, 2, 3, 4],
            dt_ms: 50.0,
            out_dir: PathBuf::from("out"),
            checkpoint_every: 0,
            scenario: SimConfig::default(),
            agent: AgentHyper::default(),
            reward: RewardParams::default(),
        }
    }
}

/// Optional command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seeds: Option<Vec<u64>>,
    pub out_dir: Option<PathBuf>,
    pub algo: Option<Algorithm>,
    pub stas: Option<usize>,
    pub denoise_steps: Option<usize>,
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                let c: ExperimentConfig = toml::from_str(&text)?;
                if c.schema_version != SCHEMA_VERSION {
                    return Err(Error::Config(format!(
                        "config schema version {} unsupported (expected {SCHEMA_VERSION})",
                        c.schema_version
                    )));
                }
                c
            }
            None => ExperimentConfig::default(),
        };
        if let Some(s) = &overrides.seeds {
            config.seeds = s.clone();
        }
        if let Some(o) = &overrides.out_dir {
            config.out_dir = o.clone();
        }
        if let Some(a) = overrides.algo {
            config.algo = a;
        }
        if let Some(n) = overrides.stas {
            config.scenario.n_stas = n;
        }
        if let Some(t) = overrides.denoise_steps {
            config.agent.denoise_steps = t;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds list must be non-empty".into()));
        }
        if self.interactions < 1 {
            return Err(Error::Config("interactions must be >= 1".into()));
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.dt_ms) || !positive(self.eval_seconds) {
            return Err(Error::Config(
                "dt_ms and eval_seconds must be > 0".into(),
            ));
        }
        self.scenario.validate()?;
        self.reward.validate()?;
        Ok(())
    }

    pub fn dt_us(&self) -> f64 {
        self.dt_ms * 1000.0
    }

    fn agent_config(&self) -> AgentConfig {
        self.agent.agent_config(
            1 + self.scenario.n_stas,
            2 * self.scenario.n_stas,
        )
    }

    /// Write the fully resolved configuration next to the run outputs.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("resolved-config.toml");
        let text = toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(&path, text)?;
        Ok(path)
    }
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

/// One training-log entry; learner columns stay empty for the static baseline
/// and for interactions before the buffer can fill a batch.
#[derive(Debug, Clone)]
pub struct LogRow {
    pub step: u64,
    pub reward: f64,
    pub critic_loss: Option<f64>,
    pub actor_objective: Option<f64>,
    pub sigma: Option<f64>,
}

impl LogRow {
    fn record(&self) -> Vec<String> {
        vec![
            self.step.to_string(),
            fmt(self.reward),
            self.critic_loss.map(fmt).unwrap_or_default(),
            self.actor_objective.map(fmt).unwrap_or_default(),
            self.sigma.map(fmt).unwrap_or_default(),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub resolved_config: PathBuf,
    pub training_logs: Vec<PathBuf>,
    pub checkpoint_dirs: Vec<PathBuf>,
    pub eval_summary: Option<PathBuf>,
}

/// Outcome of one seed's training run.
pub struct TrainedRun {
    pub seed: u64,
    pub log: Vec<LogRow>,
    pub agent: Option<Agent>,
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut r = ChaCha12Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Run the full interaction/training loop for one seed. For the static
/// baseline this simply advances the simulator period by period and logs the
/// reward it would earn. When `checkpoint_dir` is given and
/// `checkpoint_every` is non-zero, mid-training snapshots are written to
/// `checkpoint_dir/step-{step}`.
pub fn train_one(
    config: &ExperimentConfig,
    seed: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainedRun> {
    let dt_us = config.dt_us();
    let mut log = Vec::with_capacity(config.interactions as usize);
    let Some(algo) = config.algo.agent_algo() else {
        let mut sim = sim_new(&config.scenario, seed)?;
        for step in 1..=config.interactions {
            let metrics = sim.run_for(dt_us)?;
            let r = reward(metrics.throughput_mbps, &config.reward)?;
            log.push(LogRow {
                step,
                reward: r,
                critic_loss: None,
                actor_objective: None,
                sigma: None,
            });
        }
        return Ok(TrainedRun {
            seed,
            log,
            agent: None,
        });
    };
    let mut init_rng = rng_stream(seed, 1);
    let mut loop_rng = rng_stream(seed, 2);
    let mut agent = Agent::new(algo, config.agent_config(), &mut init_rng)?;
    let (mut env, s0) = Env::new(&config.scenario, seed, dt_us, config.reward)?;
    let mut s = s0;
    for step in 1..=config.interactions {
        let a = agent.act(&s.to_vec(), true, &mut loop_rng)?;
        let (_, s_next, r) = env.step(&a)?;
        agent.push_transition(Transition {
            s: s.to_vec(),
            a,
            r,
            s_next: s_next.to_vec(),
        })?;
        let trained = agent.train_step(&mut loop_rng)?;
        agent.noise.decay_step();
        log.push(LogRow {
            step,
            reward: r,
            critic_loss: trained.map(|(c, _)| c),
            actor_objective: trained.map(|(_, o)| o),
            sigma: Some(agent.noise.sigma),
        });
        if let Some(dir) = checkpoint_dir {
            if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 {
                agent.save_checkpoint(&dir.join(format!("step-{step}")))?;
            }
        }
        s = s_next;
    }
    Ok(TrainedRun {
        seed,
        log,
        agent: Some(agent),
    })
}

/// Evaluate one seed with exploration off: simulate `eval_seconds` in control
/// periods and report time-weighted throughput (Mbps) and ack-weighted mean
/// access delay (ms). `agent = None` evaluates the static baseline.
pub fn eval_one(
    config: &ExperimentConfig,
    seed: u64,
    agent: Option<&Agent>,
) -> Result<(f64, f64)> {
    let dt_us = config.dt_us();
    let total_us = config.eval_seconds * 1e6;
    let periods = (total_us / dt_us).ceil() as u64;
    let mut eval_rng = rng_stream(seed, 3);
    let mut thr_time = 0.0;
    let mut time = 0.0;
    let mut delay_weighted = 0.0;
    let mut acks_total = 0.0;
    match agent {
        None => {
            let mut sim = sim_new(&config.scenario, seed)?;
            for _ in 0..periods {
                let m = sim.run_for(dt_us)?;
                thr_time += m.throughput_mbps * m.duration_us;
                time += m.duration_us;
                let acks: u64 = m.ack_counts.iter().sum();
                delay_weighted += m.mean_access_delay_ms * acks as f64;
                acks_total += acks as f64;
            }
        }
        Some(agent) => {
            let (mut env, s0) = Env::new(&config.scenario, seed, dt_us, config.reward)?;
            let mut s = s0;
            for _ in 0..periods {
                let a = agent.act(&s.to_vec(), false, &mut eval_rng)?;
                let (m, s_next, _) = env.step(&a)?;
                thr_time += m.throughput_mbps * m.duration_us;
                time += m.duration_us;
                let acks: u64 = m.ack_counts.iter().sum();
                delay_weighted += m.mean_access_delay_ms * acks as f64;
                acks_total += acks as f64;
                s = s_next;
            }
        }
    }
    let thr = if time > 0.0 { thr_time / time } else { 0.0 };
    let delay = if acks_total > 0.0 {
        delay_weighted / acks_total
    } else {
        0.0
    };
    Ok((thr, delay))
}

fn seed_dir(config: &ExperimentConfig, seed: u64) -> PathBuf {
    config.out_dir.join(format!("seed-{seed}"))
}

/// Train across all configured seeds, writing one training log (and, for the
/// learning algorithms, checkpoints) per seed.
pub fn cmd_train(config: &ExperimentConfig) -> Result<RunArtifacts> {
    config.validate()?;
    std::fs::create_dir_all(&config.out_dir)?;
    let resolved = config.write_resolved(&config.out_dir)?;
    let runs: Vec<Result<TrainedRun>> = config
        .seeds
        .par_iter()
        .map(|&seed| {
            let ckpt = seed_dir(config, seed).join("checkpoints");
            train_one(config, seed, Some(&ckpt))
        })
        .collect();
    let mut training_logs = Vec::new();
    let mut checkpoint_dirs = Vec::new();
    for run in runs {
        let run = run?;
        let dir = seed_dir(config, run.seed);
        std::fs::create_dir_all(&dir)?;
        let log_path = dir.join("training_log.csv");
        write_csv(
            &log_path,
            &["step", "reward", "critic_loss", "actor_objective", "sigma"],
            &run.log.iter().map(|r| r.record()).collect::<Vec<_>>(),
        )?;
        training_logs.push(log_path);
        if let Some(agent) = &run.agent {
            let ckpt = dir.join("checkpoints").join("final");
            agent.save_checkpoint(&ckpt)?;
            checkpoint_dirs.push(ckpt);
        }
    }
    Ok(RunArtifacts {
        out_dir: config.out_dir.clone(),
        resolved_config: resolved,
        training_logs,
        checkpoint_dirs,
        eval_summary: None,
    })
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn stddev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

/// Evaluate a trained run (or the static baseline) across the configured
/// seeds and write eval_summary.csv: one row per seed, then "mean" and "std"
/// aggregate rows.
pub fn cmd_eval(config: &ExperimentConfig, checkpoint_root: Option<&Path>) -> Result<RunArtifacts> {
    config.validate()?;
    std::fs::create_dir_all(&config.out_dir)?;
    let resolved = config.write_resolved(&config.out_dir)?;
    let results: Vec<Result<(u64, f64, f64)>> = config
        .seeds
        .par_iter()
        .map(|&seed| -> Result<(u64, f64, f64)> {
            let agent = match config.algo {
                Algorithm::Beb => None,
                _ => {
                    let root = checkpoint_root.ok_or_else(|| {
                        Error::Config(format!(
                            "algorithm {} needs --checkpoint pointing at a training out dir",
                            config.algo.as_str()
                        ))
                    })?;
                    let dir = root
                        .join(format!("seed-{seed}"))
                        .join("checkpoints")
                        .join("final");
                    let agent = Agent::load_checkpoint(&dir)?;
                    if agent.config.state_dim != 1 + config.scenario.n_stas
                        || agent.config.action_dim != 2 * config.scenario.n_stas
                    {
                        return Err(Error::Config(format!(
                            "checkpoint dims (state {}, action {}) do not match a {}-station scenario",
                            agent.config.state_dim,
                            agent.config.action_dim,
                            config.scenario.n_stas
                        )));
                    }
                    Some(agent)
                }
            };
            let (thr, delay) = eval_one(config, seed, agent.as_ref())?;
            Ok((seed, thr, delay))
        })
        .collect();
    let mut rows = Vec::new();
    let mut thrs = Vec::new();
    let mut delays = Vec::new();
    for r in results {
        let (seed, thr, delay) = r?;
        rows.push(vec![
            config.algo.as_str().to_string(),
            seed.to_string(),
            fmt(thr),
            fmt(delay),
        ]);
        thrs.push(thr);
        delays.push(delay);
    }
    rows.push(vec![
        config.algo.as_str().to_string(),
        "mean".into(),
        fmt(mean(&thrs)),
        fmt(mean(&delays)),
    ]);
    rows.push(vec![
        config.algo.as_str().to_string(),
        "std".into(),
        fmt(stddev(&thrs)),
        fmt(stddev(&delays)),
    ]);
    let path = config.out_dir.join("eval_summary.csv");
    write_csv(
        &path,
        &["algo", "seed", "throughput_mbps", "mean_access_delay_ms"],
        &rows,
    )?;
    Ok(RunArtifacts {
        out_dir: config.out_dir.clone(),
        resolved_config: resolved,
        training_logs: Vec::new(),
        checkpoint_dirs: Vec::new(),
        eval_summary: Some(path),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Stas,
    DenoiseSteps,
}

impl SweepAxis {
    pub fn as_str(&self) -> &'static str {
        match self {
            SweepAxis::Stas => "stas",
            SweepAxis::DenoiseSteps => "denoise_steps",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stas" => Ok(SweepAxis::Stas),
            "denoise_steps" | "denoise-steps" => Ok(SweepAxis::DenoiseSteps),
            other => Err(Error::Config(format!(
                "unknown sweep axis '{other}' (expected stas|denoise_steps)"
            ))),
        }
    }
}

fn config_at(config: &ExperimentConfig, axis: SweepAxis, value: u64) -> Result<ExperimentConfig> {
    let mut c = config.clone();
    match axis {
        SweepAxis::Stas => c.scenario.n_stas = value as usize,
        SweepAxis::DenoiseSteps => {
            if config.algo != Algorithm::D3pg {
                return Err(Error::Config(
                    "denoise_steps sweep applies to the diffusion policy only".into(),
                ));
            }
            c.agent.denoise_steps = value as usize;
        }
    }
    c.validate()?;
    Ok(c)
}

/// Train (for the learning algorithms) and evaluate each (axis value, seed)
/// cell, then write sweep.csv with per-cell rows plus one "mean" aggregate
/// row per value.
pub fn cmd_sweep(
    config: &ExperimentConfig,
    axis: SweepAxis,
    values: &[u64],
) -> Result<RunArtifacts> {
    config.validate()?;
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one axis value".into()));
    }
    for &v in values {
        config_at(config, axis, v)?;
    }
    std::fs::create_dir_all(&config.out_dir)?;
    let resolved = config.write_resolved(&config.out_dir)?;
    let cells: Vec<(u64, u64)> = values
        .iter()
        .flat_map(|&v| config.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let results: Vec<Result<(u64, u64, f64, f64)>> = cells
        .par_iter()
        .map(|&(value, seed)| -> Result<(u64, u64, f64, f64)> {
            let point = config_at(config, axis, value)?;
            let agent = match point.algo {
                Algorithm::Beb => None,
                _ => train_one(&point, seed, None)?.agent,
            };
            let (thr, delay) = eval_one(&point, seed, agent.as_ref())?;
            Ok((value, seed, thr, delay))
        })
        .collect();
    let mut by_cell = std::collections::BTreeMap::new();
    for r in results {
        let (value, seed, thr, delay) = r?;
        by_cell.insert((value, seed), (thr, delay));
    }
    let mut rows = Vec::new();
    for &value in values {
        let mut thrs = Vec::new();
        let mut delays = Vec::new();
        for &seed in &config.seeds {
            let (thr, delay) = by_cell[&(value, seed)];
            rows.push(vec![
                axis.as_str().to_string(),
                value.to_string(),
                seed.to_string(),
                fmt(thr),
                fmt(delay),
            ]);
            thrs.push(thr);
            delays.push(delay);
        }
        rows.push(vec![
            axis.as_str().to_string(),
            value.to_string(),
            "mean".into(),
            fmt(mean(&thrs)),
            fmt(mean(&delays)),
        ]);
    }
    let path = config.out_dir.join("sweep.csv");
    write_csv(
        &path,
        &["axis", "value", "seed", "throughput_mbps", "mean_access_delay_ms"],
        &rows,
    )?;
    Ok(RunArtifacts {
        out_dir: config.out_dir.clone(),
        resolved_config: resolved,
        training_logs: Vec::new(),
        checkpoint_dirs: Vec::new(),
        eval_summary: Some(path),
    })
}

/// Compare the simulator's conditional collision probability against the
/// analytic fixed point on an error-free, single-MPDU, backoff-only network.
/// Writes validate.csv and fails with a validation error if any relative
/// error exceeds 5%.
pub fn cmd_validate(config: &ExperimentConfig, station_counts: &[usize]) -> Result<PathBuf> {
    config.validate()?;
    std::fs::create_dir_all(&config.out_dir)?;
    config.write_resolved(&config.out_dir)?;
    let seed = config.seeds[0];
    let w = config.scenario.cw_min;
    let m = config.scenario.max_stage();
    let results: Vec<Result<(usize, f64, f64, f64)>> = station_counts
        .par_iter()
        .map(|&n| -> Result<(usize, f64, f64, f64)> {
            let mut scenario = config.scenario.clone();
            scenario.n_stas = n;
            scenario.per_mpdu_error_prob = 0.0;
            scenario.beb_agg_len = 1;
            let mut sim = sim_new(&scenario, seed)?;
            let metrics = sim.run_events(1_000_000)?;
            let tx: u64 = metrics.tx_counts.iter().sum();
            let ack: u64 = metrics.ack_counts.iter().sum();
            let p_sim = if tx > 0 {
                1.0 - ack as f64 / tx as f64
            } else {
                0.0
            };
            let (_, p_oracle) = bianchi_fixed_point(n, w, m)?;
            let rel = if p_oracle > 0.0 {
                (p_sim - p_oracle).abs() / p_oracle
            } else {
                p_sim.abs()
            };
            Ok((n, p_sim, p_oracle, rel))
        })
        .collect();
    let mut rows = Vec::new();
    let mut worst: Option<(usize, f64)> = None;
    for r in results {
        let (n, p_sim, p_oracle, rel) = r?;
        rows.push(vec![
            n.to_string(),
            fmt(p_sim),
            fmt(p_oracle),
            fmt(rel),
        ]);
        if rel > worst.map(|(_, r)| r).unwrap_or(-1.0) {
            worst = Some((n, rel));
        }
    }
    let path = config.out_dir.join("validate.csv");
    write_csv(&path, &["n_stas", "p_sim", "p_oracle", "rel_err"], &rows)?;
    if let Some((n, rel)) = worst {
        if rel > 0.05 {
            return Err(Error::Validation(format!(
                "collision probability off by {:.2}% at n = {n} (limit 5%), see {}",
                rel * 100.0,
                path.display()
            )));
        }
    }
    Ok(path)
}
