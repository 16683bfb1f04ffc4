//! Control-loop environment around the channel simulator: observation
//! construction (idle-time proportion + per-station loss rate), mapping of
//! raw unit-interval actions to contention-window/aggregation assignments,
//! the throughput-shaped reward, and the period-step composition.

use crate::error::{Error, Result};
use crate::macsim::{MacControl, PeriodMetrics, SimConfig, SimState};
use serde::{Deserialize, Serialize};

/// Observation: channel idle-time proportion plus one loss rate per station;
/// dimension 1 + n_stas.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    pub itp: f64,
    pub plr: Vec<f64>,
}

impl StateVector {
    pub fn dim(&self) -> usize {
        1 + self.plr.len()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.push(self.itp);
        v.extend_from_slice(&self.plr);
        v
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct RewardParams {
    /// throughput scale (Mbps) controlling reward sensitivity
    pub lambda: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        RewardParams { lambda: 450.0 }
    }
}

impl RewardParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::Config(format!(
                "lambda must be > 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// itp = idle/duration; plr_i = 1 - ack_i/tx_i, and 0 for stations that did
/// not transmit in the period.
pub fn build_state(m: &PeriodMetrics) -> Result<StateVector> {
    if !(m.duration_us.is_finite() && m.duration_us > 0.0) {
        return Err(Error::Config(format!(
            "period duration must be > 0, got {}",
            m.duration_us
        )));
    }
    let plr = m
        .tx_counts
        .iter()
        .zip(&m.ack_counts)
        .map(|(&tx, &ack)| {
            if tx == 0 {
                0.0
            } else {
                1.0 - ack as f64 / tx as f64
            }
        })
        .collect();
    Ok(StateVector {
        itp: m.idle_us / m.duration_us,
        plr,
    })
}

/// Map a raw action in [0,1]^{2 n} to per-station MAC controls: the first n
/// entries select a window from the power-of-two ladder, cw = 2^(k+4) - 1
/// with k = round(u*6); the last n set the aggregation length 1 + round(v*255).
pub fn map_action(a: &[f64], n_stas: usize) -> Result<MacControl> {
    if a.len() != 2 * n_stas {
        return Err(Error::Shape(format!(
            "action length {} != 2 * {n_stas}",
            a.len()
        )));
    }
    let mut cw = Vec::with_capacity(n_stas);
    let mut agg = Vec::with_capacity(n_stas);
    for i in 0..n_stas {
        let u = a[i].clamp(0.0, 1.0);
        let v = a[n_stas + i].clamp(0.0, 1.0);
        let k = (u * 6.0).round() as u32;
        cw.push((1u32 << (k + 4)) - 1);
        agg.push(1 + (v * 255.0).round() as u32);
    }
    Ok(MacControl { cw, agg_len: agg })
}

/// r = 2 (sigmoid(thr/lambda) - 1/2), strictly increasing, in [0, 1).
pub fn reward(throughput_mbps: f64, p: &RewardParams) -> Result<f64> {
    p.validate()?;
    if throughput_mbps.is_nan() || throughput_mbps < 0.0 {
        return Err(Error::Config(format!(
            "throughput must be >= 0, got {throughput_mbps}"
        )));
    }
    let z = throughput_mbps / p.lambda;
    Ok(2.0 * (1.0 / (1.0 + (-z).exp()) - 0.5))
}

/// One control period: map the raw action, assign it, advance the simulator
/// by dt, and derive the next observation and reward.
pub fn env_step(
    sim: &mut SimState,
    a: &[f64],
    dt_us: f64,
    params: &RewardParams,
) -> Result<(PeriodMetrics, StateVector, f64)> {
    let control = map_action(a, sim.config.n_stas)?;
    sim.apply_control(&control)?;
    let metrics = sim.run_for(dt_us)?;
    let state = build_state(&metrics)?;
    let r = reward(metrics.throughput_mbps, params)?;
    Ok((metrics, state, r))
}

/// Simulator plus the reward/period configuration, with a fixed warm-up
/// convention for the first observation: one period under the midpoint
/// action (the ladder midpoint, cw 127 / aggregation 129, i.e. all raw
/// components 0.5) before the agent sees the state.
#[derive(Debug, Clone)]
pub struct Env {
    pub sim: SimState,
    pub dt_us: f64,
    pub params: RewardParams,
}

impl Env {
    /// Build a fresh environment and return it with the initial observation.
    pub fn new(
        scenario: &SimConfig,
        seed: u64,
        dt_us: f64,
        params: RewardParams,
    ) -> Result<(Env, StateVector)> {
        params.validate()?;
        if !(dt_us.is_finite() && dt_us > 0.0) {
            return Err(Error::Config(format!("dt must be > 0, got {dt_us}")));
        }
        let mut config = scenario.clone();
        config.seed = seed;
        let mut sim = SimState::new(config)?;
        let warmup = vec![0.5; 2 * sim.config.n_stas];
        let s0 = if sim.config.n_stas > 0 {
            let control = map_action(&warmup, sim.config.n_stas)?;
            sim.apply_control(&control)?;
            let metrics = sim.run_for(dt_us)?;
            build_state(&metrics)?
        } else {
            let metrics = sim.run_for(dt_us)?;
            build_state(&metrics)?
        };
        Ok((
            Env {
                sim,
                dt_us,
                params,
            },
            s0,
        ))
    }

    pub fn state_dim(&self) -> usize {
        1 + self.sim.config.n_stas
    }

    pub fn action_dim(&self) -> usize {
        2 * self.sim.config.n_stas
    }

    pub fn step(&mut self, a: &[f64]) -> Result<(PeriodMetrics, StateVector, f64)> {
        env_step(&mut self.sim, a, self.dt_us, &self.params)
    }
}
