//! Slot-based saturated DCF channel simulator: per-station contention
//! windows with binary exponential backoff or externally assigned fixed
//! windows, A-MPDU aggregation with a per-MPDU loss model and block-ACK
//! abstraction, and the stationary fixed-point collision model used to
//! validate the engine.
//!
//! The engine is synchronous and slotted: every channel event (one idle slot
//! or one busy transmission interval) counts as one backoff slot for every
//! non-transmitting station, the standard analytical-model reading of DCF
//! slot time.

use crate::error::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

pub const CW_LADDER: [u32; 7] = [15, 31, 63, 127, 255, 511, 1023];

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SimConfig {
    pub n_stas: usize,
    pub slot_us: f64,
    pub sifs_us: f64,
    pub difs_us: f64,
    pub phy_rate_mbps: f64,
    pub preamble_us: f64,
    pub ack_us: f64,
    /// busy tail after an unacknowledged transmission (timeout waiting for
    /// the ACK); default SIFS + ACK so failed and successful transmissions
    /// occupy the channel equally long
    pub ack_timeout_us: f64,
    pub payload_bytes: u32,
    /// fixed per-MPDU MAC framing overhead added to the payload
    pub mpdu_overhead_bytes: u32,
    pub cw_min: u32,
    pub cw_max: u32,
    pub max_agg: u32,
    pub per_mpdu_error_prob: f64,
    /// fixed aggregation length used by stations in backoff (uncontrolled) mode
    pub beb_agg_len: u32,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_stas: 32,
            slot_us: 9.0,
            sifs_us: 16.0,
            difs_us: 34.0,
            phy_rate_mbps: 1000.0,
            preamble_us: 40.0,
            ack_us: 28.0,
            ack_timeout_us: 44.0,
            payload_bytes: 1448,
            mpdu_overhead_bytes: 0,
            cw_min: 15,
            cw_max: 1023,
            max_agg: 256,
            per_mpdu_error_prob: 0.1,
            beb_agg_len: 64,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cw_min > self.cw_max {
            return Err(Error::Config(format!(
                "cw_min {} > cw_max {}",
                self.cw_min, self.cw_max
            )));
        }
        if self.max_agg < 1 {
            return Err(Error::Config("max_agg must be >= 1".into()));
        }
        for (name, v) in [
            ("slot_us", self.slot_us),
            ("sifs_us", self.sifs_us),
            ("difs_us", self.difs_us),
            ("preamble_us", self.preamble_us),
            ("ack_us", self.ack_us),
            ("ack_timeout_us", self.ack_timeout_us),
            ("phy_rate_mbps", self.phy_rate_mbps),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.payload_bytes == 0 {
            return Err(Error::Config("payload_bytes must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.per_mpdu_error_prob) {
            return Err(Error::Config(format!(
                "per_mpdu_error_prob {} outside [0,1)",
                self.per_mpdu_error_prob
            )));
        }
        if self.beb_agg_len < 1 || self.beb_agg_len > self.max_agg {
            return Err(Error::Config(format!(
                "beb_agg_len {} outside [1,{}]",
                self.beb_agg_len, self.max_agg
            )));
        }
        Ok(())
    }

    /// Highest backoff stage that still grows the window: the smallest stage
    /// whose doubled window reaches cw_max.
    pub fn max_stage(&self) -> u32 {
        let mut stage = 0u32;
        while ((self.cw_min as u64 + 1) << stage) - 1 < self.cw_max as u64 {
            stage += 1;
        }
        stage
    }
}

/// Transmission duration of an aggregate of `l` MPDUs:
/// preamble + l * (payload + overhead) * 8 / rate.
pub fn ppdu_duration(l: u32, config: &SimConfig) -> Result<f64> {
    if l < 1 || l > config.max_agg {
        return Err(Error::Config(format!(
            "aggregation length {l} outside [1,{}]",
            config.max_agg
        )));
    }
    let bits = l as f64 * (config.payload_bytes + config.mpdu_overhead_bytes) as f64 * 8.0;
    Ok(config.preamble_us + bits / config.phy_rate_mbps)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StationMode {
    Beb,
    Controlled,
}

#[derive(Debug, Clone)]
pub struct StationState {
    pub mode: StationMode,
    pub current_cw: u32,
    pub backoff_counter: u32,
    pub beb_stage: u32,
    pub assigned_cw: u32,
    pub assigned_agg: u32,
    pub tx_count: u64,
    pub ack_count: u64,
    pub hol_enqueue_time: f64,
}

impl StationState {
    fn agg_len(&self, config: &SimConfig) -> u32 {
        match self.mode {
            StationMode::Beb => config.beb_agg_len,
            StationMode::Controlled => self.assigned_agg,
        }
    }
}

/// Per-station (CW, L) assignment for one control period.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MacControl {
    pub cw: Vec<u32>,
    pub agg_len: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SlotOutcome {
    Idle,
    Success { sta: usize, n_mpdus_delivered: u32 },
    Collision { stas: Vec<usize> },
    ErrorLoss { sta: usize },
}

/// One channel event for the optional debug trace.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub index: u64,
    pub outcome: SlotOutcome,
    /// aggregation length of the (longest) transmission, 0 for idle slots
    pub l: u32,
    pub duration_us: f64,
}

/// Metrics accumulated over one observation period.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodMetrics {
    pub duration_us: f64,
    pub throughput_mbps: f64,
    pub mean_access_delay_ms: f64,
    pub idle_us: f64,
    pub tx_counts: Vec<u64>,
    pub ack_counts: Vec<u64>,
    pub collision_count: u64,
    pub error_loss_count: u64,
}

#[derive(Debug, Clone)]
pub struct SimState {
    pub config: SimConfig,
    pub stations: Vec<StationState>,
    pub now_us: f64,
    pub event_count: u64,
    rng: ChaCha12Rng,
}

/// Build a saturated network; `seed` overrides the config's seed field.
pub fn sim_new(config: &SimConfig, seed: u64) -> Result<SimState> {
    let mut config = config.clone();
    config.seed = seed;
    SimState::new(config)
}

impl SimState {
    pub fn new(config: SimConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
        let stations = (0..config.n_stas)
            .map(|_| StationState {
                mode: StationMode::Beb,
                current_cw: config.cw_min,
                backoff_counter: rng.random_range(0..=config.cw_min),
                beb_stage: 0,
                assigned_cw: config.cw_min,
                assigned_agg: config.beb_agg_len,
                tx_count: 0,
                ack_count: 0,
                hol_enqueue_time: 0.0,
            })
            .collect();
        Ok(SimState {
            config,
            stations,
            now_us: 0.0,
            event_count: 0,
            rng,
        })
    }

    /// Switch every station to a fixed externally assigned window and
    /// aggregation length; backoff counters are re-drawn in [0, cw].
    pub fn apply_control(&mut self, control: &MacControl) -> Result<()> {
        if control.cw.len() != self.config.n_stas || control.agg_len.len() != self.config.n_stas {
            return Err(Error::Shape(format!(
                "control holds {} cw / {} agg entries for {} stations",
                control.cw.len(),
                control.agg_len.len(),
                self.config.n_stas
            )));
        }
        for (&cw, &l) in control.cw.iter().zip(&control.agg_len) {
            if !CW_LADDER.contains(&cw) {
                return Err(Error::Config(format!(
                    "cw {cw} not in the allowed ladder {CW_LADDER:?}"
                )));
            }
            if l < 1 || l > self.config.max_agg {
                return Err(Error::Config(format!(
                    "aggregation length {l} outside [1,{}]",
                    self.config.max_agg
                )));
            }
        }
        for (i, sta) in self.stations.iter_mut().enumerate() {
            sta.mode = StationMode::Controlled;
            sta.assigned_cw = control.cw[i];
            sta.assigned_agg = control.agg_len[i];
            sta.current_cw = control.cw[i];
            sta.beb_stage = 0;
            sta.backoff_counter = self.rng.random_range(0..=control.cw[i]);
        }
        Ok(())
    }

    /// Advance by one channel event. Returns (elapsed_us, outcome, and the
    /// head-of-line-to-ACK delay when the event delivered an acknowledged
    /// aggregate).
    fn channel_event(&mut self) -> (f64, SlotOutcome, Option<f64>) {
        let cfg = self.config.clone();
        let event_start = self.now_us;
        let tx: Vec<usize> = self
            .stations
            .iter()
            .enumerate()
            .filter(|(_, s)| s.backoff_counter == 0)
            .map(|(i, _)| i)
            .collect();
        self.event_count += 1;
        if self.stations.is_empty() || tx.is_empty() {
            for sta in &mut self.stations {
                // all counters are >= 1 here, but stay defensive
                sta.backoff_counter = sta.backoff_counter.saturating_sub(1);
            }
            self.now_us += cfg.slot_us;
            return (cfg.slot_us, SlotOutcome::Idle, None);
        }
        let (busy, outcome, delay) = if tx.len() >= 2 {
            // collision: channel occupied until the longest aggregate ends,
            // no ACK for anyone
            let l_max = tx
                .iter()
                .map(|&i| self.stations[i].agg_len(&cfg))
                .max()
                .unwrap();
            let ppdu = ppdu_duration(l_max, &cfg).expect("validated agg length");
            let busy = ppdu + cfg.ack_timeout_us + cfg.difs_us;
            for &i in &tx {
                self.finish_attempt(i, false, event_start + busy);
            }
            (busy, SlotOutcome::Collision { stas: tx.clone() }, None)
        } else {
            let winner = tx[0];
            let l = self.stations[winner].agg_len(&cfg);
            let ppdu = ppdu_duration(l, &cfg).expect("validated agg length");
            let mut delivered = 0u32;
            for _ in 0..l {
                if self.rng.random::<f64>() >= cfg.per_mpdu_error_prob {
                    delivered += 1;
                }
            }
            if delivered >= 1 {
                let busy = ppdu + cfg.sifs_us + cfg.ack_us + cfg.difs_us;
                let ack_time = event_start + ppdu + cfg.sifs_us + cfg.ack_us;
                let delay = ack_time - self.stations[winner].hol_enqueue_time;
                self.stations[winner].ack_count += 1;
                self.finish_attempt(winner, true, event_start + busy);
                (
                    busy,
                    SlotOutcome::Success {
                        sta: winner,
                        n_mpdus_delivered: delivered,
                    },
                    Some(delay),
                )
            } else {
                let busy = ppdu + cfg.ack_timeout_us + cfg.difs_us;
                self.finish_attempt(winner, false, event_start + busy);
                (busy, SlotOutcome::ErrorLoss { sta: winner }, None)
            }
        };
        // every busy event counts as one backoff slot for bystanders
        for (i, sta) in self.stations.iter_mut().enumerate() {
            if !tx.contains(&i) && sta.backoff_counter > 0 {
                sta.backoff_counter -= 1;
            }
        }
        self.now_us += busy;
        (busy, outcome, delay)
    }

    /// Post-attempt bookkeeping: counters, window adaptation, counter redraw,
    /// and the next head-of-line frame (saturated sources regenerate).
    fn finish_attempt(&mut self, i: usize, acked: bool, event_end: f64) {
        let cfg = self.config.clone();
        let sta = &mut self.stations[i];
        sta.tx_count += 1;
        match sta.mode {
            StationMode::Beb => {
                if acked {
                    sta.beb_stage = 0;
                } else {
                    sta.beb_stage = (sta.beb_stage + 1).min(cfg.max_stage());
                }
                sta.current_cw =
                    ((((cfg.cw_min as u64 + 1) << sta.beb_stage) - 1) as u32).min(cfg.cw_max);
            }
            StationMode::Controlled => {
                sta.current_cw = sta.assigned_cw;
            }
        }
        sta.backoff_counter = self.rng.random_range(0..=sta.current_cw);
        sta.hol_enqueue_time = event_end;
    }

    /// Run whole channel events until at least `duration_us` has elapsed.
    /// The reported duration is the actual (event-aligned) elapsed time.
    pub fn run_for(&mut self, duration_us: f64) -> Result<PeriodMetrics> {
        self.run_period(Some(duration_us), None, None)
    }

    pub fn run_for_traced(
        &mut self,
        duration_us: f64,
        trace: &mut Vec<TraceRow>,
    ) -> Result<PeriodMetrics> {
        self.run_period(Some(duration_us), None, Some(trace))
    }

    /// Run exactly `n_events` channel events (used by the analytic validation).
    pub fn run_events(&mut self, n_events: u64) -> Result<PeriodMetrics> {
        self.run_period(None, Some(n_events), None)
    }

    fn run_period(
        &mut self,
        duration_us: Option<f64>,
        n_events: Option<u64>,
        mut trace: Option<&mut Vec<TraceRow>>,
    ) -> Result<PeriodMetrics> {
        if let Some(d) = duration_us {
            if !(d.is_finite() && d > 0.0) {
                return Err(Error::Config(format!("duration must be > 0, got {d}")));
            }
        }
        let tx_start: Vec<u64> = self.stations.iter().map(|s| s.tx_count).collect();
        let ack_start: Vec<u64> = self.stations.iter().map(|s| s.ack_count).collect();
        let mut idle_acc = 0.0f64;
        let mut busy_acc = 0.0f64;
        let mut delivered_mpdus: u64 = 0;
        let mut collision_count: u64 = 0;
        let mut error_loss_count: u64 = 0;
        let mut delay_sum_us = 0.0f64;
        let mut delay_n: u64 = 0;
        let mut events: u64 = 0;
        loop {
            match (duration_us, n_events) {
                (Some(d), _) if idle_acc + busy_acc >= d => break,
                (None, Some(n)) if events >= n => break,
                (None, None) => unreachable!("run_period needs a stop condition"),
                _ => {}
            }
            let (dt, outcome, delay) = self.channel_event();
            events += 1;
            match &outcome {
                SlotOutcome::Idle => idle_acc += dt,
                _ => busy_acc += dt,
            }
            match &outcome {
                SlotOutcome::Idle => {}
                SlotOutcome::Success {
                    n_mpdus_delivered, ..
                } => {
                    delivered_mpdus += *n_mpdus_delivered as u64;
                    delay_sum_us += delay.expect("success events carry a delay");
                    delay_n += 1;
                }
                SlotOutcome::Collision { .. } => collision_count += 1,
                SlotOutcome::ErrorLoss { .. } => error_loss_count += 1,
            }
            if let Some(t) = trace.as_deref_mut() {
                let l = match &outcome {
                    SlotOutcome::Idle => 0,
                    SlotOutcome::Success { sta, .. } | SlotOutcome::ErrorLoss { sta } => {
                        self.stations[*sta].agg_len(&self.config)
                    }
                    SlotOutcome::Collision { stas } => stas
                        .iter()
                        .map(|&i| self.stations[i].agg_len(&self.config))
                        .max()
                        .unwrap_or(0),
                };
                t.push(TraceRow {
                    index: self.event_count - 1,
                    outcome: outcome.clone(),
                    l,
                    duration_us: dt,
                });
            }
        }
        let duration = idle_acc + busy_acc;
        let throughput_mbps = if duration > 0.0 {
            delivered_mpdus as f64 * self.config.payload_bytes as f64 * 8.0 / duration
        } else {
            0.0
        };
        let mean_access_delay_ms = if delay_n > 0 {
            delay_sum_us / delay_n as f64 / 1000.0
        } else {
            0.0
        };
        Ok(PeriodMetrics {
            duration_us: duration,
            throughput_mbps,
            mean_access_delay_ms,
            idle_us: idle_acc,
            tx_counts: self
                .stations
                .iter()
                .zip(&tx_start)
                .map(|(s, &b)| s.tx_count - b)
                .collect(),
            ack_counts: self
                .stations
                .iter()
                .zip(&ack_start)
                .map(|(s, &b)| s.ack_count - b)
                .collect(),
            collision_count,
            error_loss_count,
        })
    }
}

/// Saturated-DCF fixed point: per-slot transmit probability tau and
/// conditional collision probability p for n stations, minimum window W,
/// and m doubling stages, solved by damped iteration to residual < 1e-12.
pub fn bianchi_fixed_point(n: usize, w: u32, m: u32) -> Result<(f64, f64)> {
    if n < 1 || w < 1 {
        return Err(Error::Config(format!(
            "fixed point needs n >= 1 and W >= 1, got n={n}, W={w}"
        )));
    }
    let wf = w as f64;
    let mf = m as f64;
    let tau_of_p = |p: f64| -> f64 {
        if (1.0 - 2.0 * p).abs() < 1e-9 {
            // limit at p = 1/2 (removable singularity)
            4.0 / (2.0 * wf + 2.0 + mf * wf)
        } else {
            2.0 * (1.0 - 2.0 * p)
                / ((1.0 - 2.0 * p) * (wf + 1.0) + p * wf * (1.0 - (2.0 * p).powf(mf)))
        }
    };
    if n == 1 {
        return Ok((2.0 / (wf + 1.0), 0.0));
    }
    let mut tau = 2.0 / (wf + 1.0);
    let mut p = 1.0 - (1.0 - tau).powi(n as i32 - 1);
    for _ in 0..200_000 {
        let tau_new = tau_of_p(p);
        let tau_next = 0.5 * tau + 0.5 * tau_new;
        let p_next = 1.0 - (1.0 - tau_next).powi(n as i32 - 1);
        let residual = (tau_next - tau).abs().max((p_next - p).abs());
        tau = tau_next;
        p = p_next;
        if residual < 1e-12 {
            return Ok((tau, p));
        }
    }
    Err(Error::Numeric(
        "fixed-point iteration did not converge".into(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize, seed: u64) -> SimConfig {
        SimConfig {
            n_stas: n,
            seed,
            ..SimConfig::default()
        }
    }

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn config_validation() {
        assert!(SimConfig::default().validate().is_ok());
        let bad = |f: fn(&mut SimConfig)| {
            let mut c = SimConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.cw_min = 2048));
        assert!(bad(|c| c.slot_us = 0.0));
        assert!(bad(|c| c.per_mpdu_error_prob = 1.0));
        assert!(bad(|c| c.max_agg = 0));
    }

    #[test]
    fn ppdu_duration_goldens() {
        let c = SimConfig::default();
        assert_close(ppdu_duration(1, &c).unwrap(), 51.584, 1e-12);
        assert_close(ppdu_duration(64, &c).unwrap(), 781.376, 1e-12);
        assert_close(ppdu_duration(256, &c).unwrap(), 3005.504, 1e-12);
        // overhead amortization: doubling L less than doubles duration
        for l in [1u32, 2, 4, 32, 128] {
            let d1 = ppdu_duration(l, &c).unwrap();
            let d2 = ppdu_duration(2 * l, &c).unwrap();
            assert!(d2 < 2.0 * d1);
        }
        assert!(ppdu_duration(256, &c).unwrap() < 256.0 * ppdu_duration(1, &c).unwrap());
        assert!(ppdu_duration(0, &c).is_err());
        assert!(ppdu_duration(257, &c).is_err());
    }

    #[test]
    fn new_sim_draws_initial_backoff_within_minimum_window() {
        let sim = SimState::new(cfg(64, 7)).unwrap();
        assert_eq!(sim.stations.len(), 64);
        for s in &sim.stations {
            assert!(s.backoff_counter <= 15);
            assert_eq!(s.mode, StationMode::Beb);
            assert_eq!(s.current_cw, 15);
        }
        let sim2 = SimState::new(cfg(64, 7)).unwrap();
        let a: Vec<u32> = sim.stations.iter().map(|s| s.backoff_counter).collect();
        let b: Vec<u32> = sim2.stations.iter().map(|s| s.backoff_counter).collect();
        assert_eq!(a, b);
        let sim3 = SimState::new(cfg(64, 8)).unwrap();
        let c: Vec<u32> = sim3.stations.iter().map(|s| s.backoff_counter).collect();
        assert_ne!(a, c);
    }

    #[test]
    fn empty_network_is_permanently_idle() {
        let mut sim = SimState::new(cfg(0, 1)).unwrap();
        let m = sim.run_for(1000.0).unwrap();
        assert_eq!(m.throughput_mbps, 0.0);
        assert_eq!(m.idle_us, m.duration_us);
        assert!(m.duration_us >= 1000.0);
        assert_eq!(m.collision_count, 0);
    }

    #[test]
    fn single_idle_slot() {
        let mut sim = SimState::new(cfg(4, 3)).unwrap();
        for s in &mut sim.stations {
            s.backoff_counter = 5;
        }
        let mut trace = Vec::new();
        let m = sim.run_for_traced(1.0, &mut trace).unwrap();
        assert_eq!(trace.len(), 1);
        assert_eq!(trace[0].outcome, SlotOutcome::Idle);
        assert_eq!(m.idle_us, 9.0);
        assert_eq!(m.duration_us, 9.0);
        for s in &sim.stations {
            assert_eq!(s.backoff_counter, 4);
        }
    }

    #[test]
    fn single_station_never_collides() {
        let mut c = cfg(1, 5);
        c.per_mpdu_error_prob = 0.0;
        let mut sim = SimState::new(c).unwrap();
        let m = sim.run_for(200_000.0).unwrap();
        assert_eq!(m.collision_count, 0);
        assert_eq!(m.error_loss_count, 0);
        assert_eq!(m.tx_counts[0], m.ack_counts[0]);
        assert!(m.tx_counts[0] > 0);
        assert!(m.throughput_mbps > 0.0);
        assert!(m.mean_access_delay_ms > 0.0);
    }

    #[test]
    fn apply_control_validates_and_switches_mode() {
        let mut sim = SimState::new(cfg(2, 1)).unwrap();
        let bad_cw = MacControl {
            cw: vec![16, 15],
            agg_len: vec![1, 1],
        };
        assert!(sim.apply_control(&bad_cw).is_err());
        let bad_l = MacControl {
            cw: vec![15, 15],
            agg_len: vec![0, 1],
        };
        assert!(sim.apply_control(&bad_l).is_err());
        let bad_len = MacControl {
            cw: vec![15],
            agg_len: vec![1],
        };
        assert!(sim.apply_control(&bad_len).is_err());
        let good = MacControl {
            cw: vec![15, 1023],
            agg_len: vec![1, 256],
        };
        sim.apply_control(&good).unwrap();
        assert_eq!(sim.stations[0].mode, StationMode::Controlled);
        assert_eq!(sim.stations[0].current_cw, 15);
        assert_eq!(sim.stations[0].assigned_agg, 1);
        assert_eq!(sim.stations[1].current_cw, 1023);
        assert!(sim.stations[1].backoff_counter <= 1023);
        // idempotent up to the backoff re-draw
        sim.apply_control(&good).unwrap();
        assert_eq!(sim.stations[1].assigned_cw, 1023);
        assert_eq!(sim.stations[1].assigned_agg, 256);
    }

    #[test]
    fn controlled_cw_does_not_double_after_losses() {
        let mut c = cfg(2, 9);
        c.per_mpdu_error_prob = 0.9; // almost every aggregate lost
        let mut sim = SimState::new(c).unwrap();
        sim.apply_control(&MacControl {
            cw: vec![15, 15],
            agg_len: vec![1, 1],
        })
        .unwrap();
        sim.run_for(100_000.0).unwrap();
        for s in &sim.stations {
            assert_eq!(s.current_cw, 15);
            assert!(s.backoff_counter <= 15);
        }
    }

    #[test]
    fn beb_doubles_and_resets() {
        let mut c = cfg(2, 11);
        c.per_mpdu_error_prob = 0.0;
        let mut sim = SimState::new(c).unwrap();
        // force simultaneous transmission -> collision -> both double
        sim.stations[0].backoff_counter = 0;
        sim.stations[1].backoff_counter = 0;
        let mut trace = Vec::new();
        sim.run_for_traced(1.0, &mut trace).unwrap();
        assert!(matches!(trace[0].outcome, SlotOutcome::Collision { .. }));
        assert_eq!(sim.stations[0].current_cw, 31);
        assert_eq!(sim.stations[1].current_cw, 31);
        assert_eq!(sim.stations[0].beb_stage, 1);
        // force a solo success for station 0 -> reset to minimum window
        sim.stations[0].backoff_counter = 0;
        sim.stations[1].backoff_counter = 31;
        let mut trace2 = Vec::new();
        sim.run_for_traced(1.0, &mut trace2).unwrap();
        assert!(matches!(trace2[0].outcome, SlotOutcome::Success { .. }));
        assert_eq!(sim.stations[0].current_cw, 15);
        assert_eq!(sim.stations[0].beb_stage, 0);
    }

    #[test]
    fn beb_stage_caps_at_max_window() {
        let c = SimConfig::default();
        assert_eq!(c.max_stage(), 6);
        let mut c2 = cfg(1, 1);
        c2.per_mpdu_error_prob = 0.0;
        let mut sim = SimState::new(c2).unwrap();
        for _ in 0..12 {
            let i = 0;
            sim.finish_attempt(i, false, 0.0);
        }
        assert_eq!(sim.stations[0].current_cw, 1023);
        assert_eq!(sim.stations[0].beb_stage, 6);
    }

    #[test]
    fn time_is_conserved_exactly() {
        let mut sim = SimState::new(cfg(8, 21)).unwrap();
        let mut trace = Vec::new();
        let m = sim.run_for_traced(100_000.0, &mut trace).unwrap();
        let mut idle = 0.0;
        let mut busy = 0.0;
        for row in &trace {
            match row.outcome {
                SlotOutcome::Idle => idle += row.duration_us,
                _ => busy += row.duration_us,
            }
        }
        assert_eq!(m.idle_us.to_bits(), idle.to_bits());
        assert_eq!(m.duration_us.to_bits(), (idle + busy).to_bits());
        assert!(m.idle_us <= m.duration_us);
        assert_close(sim.now_us, m.duration_us, 1e-9);
    }

    #[test]
    fn counters_are_consistent() {
        let mut sim = SimState::new(cfg(10, 31)).unwrap();
        let mut trace = Vec::new();
        let m = sim.run_for_traced(300_000.0, &mut trace).unwrap();
        let successes = trace
            .iter()
            .filter(|r| matches!(r.outcome, SlotOutcome::Success { .. }))
            .count() as u64;
        let busy_events = trace
            .iter()
            .filter(|r| !matches!(r.outcome, SlotOutcome::Idle))
            .count() as u64;
        assert_eq!(
            m.collision_count + successes + m.error_loss_count,
            busy_events
        );
        let total_acks: u64 = m.ack_counts.iter().sum();
        assert_eq!(total_acks, successes);
        for (tx, ack) in m.tx_counts.iter().zip(&m.ack_counts) {
            assert!(ack <= tx);
        }
        for s in &sim.stations {
            assert!(s.backoff_counter <= s.current_cw);
        }
    }

    #[test]
    fn identical_seeds_reproduce_metrics_bit_exactly() {
        let control = MacControl {
            cw: vec![63; 6],
            agg_len: vec![32; 6],
        };
        let run = || -> PeriodMetrics {
            let mut sim = SimState::new(cfg(6, 77)).unwrap();
            let _ = sim.run_for(50_000.0).unwrap();
            sim.apply_control(&control).unwrap();
            sim.run_for(50_000.0).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.duration_us.to_bits(), b.duration_us.to_bits());
        assert_eq!(a.throughput_mbps.to_bits(), b.throughput_mbps.to_bits());
        assert_eq!(
            a.mean_access_delay_ms.to_bits(),
            b.mean_access_delay_ms.to_bits()
        );
        assert_eq!(a.tx_counts, b.tx_counts);
        assert_eq!(a.ack_counts, b.ack_counts);
        assert_eq!(a.collision_count, b.collision_count);
    }

    #[test]
    fn smaller_window_wins_more_often() {
        let mut c = cfg(2, 13);
        c.per_mpdu_error_prob = 0.0;
        let mut sim = SimState::new(c).unwrap();
        sim.apply_control(&MacControl {
            cw: vec![15, 1023],
            agg_len: vec![8, 8],
        })
        .unwrap();
        let m = sim.run_events(200_000).unwrap();
        assert!(
            m.ack_counts[0] > 10 * m.ack_counts[1].max(1),
            "share not skewed: {:?}",
            m.ack_counts
        );
    }

    #[test]
    fn fixed_point_golden_values() {
        // frozen from an independent bisection solver
        let cases: [(usize, f64, f64); 7] = [
            (1, 0.125, 0.0),
            (2, 0.11035198138473908, 0.11035198138473908),
            (5, 0.07905937853395492, 0.2806727411344135),
            (10, 0.053968001056197035, 0.3930506683636985),
            (20, 0.0347073162253132, 0.4888818811967292),
            (32, 0.025321850351860265, 0.548458018227267),
            (64, 0.01576256637656629, 0.632470375372563),
        ];
        for (n, tau_ref, p_ref) in cases {
            let (tau, p) = bianchi_fixed_point(n, 15, 6).unwrap();
            assert_close(tau, tau_ref, 1e-10);
            assert_close(p, p_ref, 1e-10);
        }
        assert!(bianchi_fixed_point(0, 15, 6).is_err());
        assert!(bianchi_fixed_point(5, 0, 6).is_err());
    }

    #[test]
    fn fixed_point_p_is_monotone_in_n() {
        let mut prev = -1.0;
        for n in [1usize, 2, 4, 8, 16, 32, 64, 128] {
            let (_, p) = bianchi_fixed_point(n, 15, 6).unwrap();
            assert!(p > prev, "p not increasing at n={n}");
            assert!((0.0..1.0).contains(&p));
            prev = p;
        }
    }

    #[test]
    fn fixed_point_without_doubling_is_fixed_window() {
        // m = 0: tau = 2/(W+1) independent of collisions
        for n in [2usize, 10, 40] {
            let (tau, p) = bianchi_fixed_point(n, 31, 0).unwrap();
            assert_close(tau, 2.0 / 32.0, 1e-12);
            let expect_p = 1.0 - (1.0 - tau).powi(n as i32 - 1);
            assert_close(p, expect_p, 1e-12);
        }
    }

    #[test]
    fn simulated_collision_probability_tracks_fixed_point() {
        // n = 10, W = 15, m = 6, L = 1, error-free channel
        let mut c = cfg(10, 123);
        c.per_mpdu_error_prob = 0.0;
        c.beb_agg_len = 1;
        let mut sim = SimState::new(c).unwrap();
        let m = sim.run_events(500_000).unwrap();
        let tx: u64 = m.tx_counts.iter().sum();
        let ack: u64 = m.ack_counts.iter().sum();
        let p_sim = 1.0 - ack as f64 / tx as f64;
        let (_, p_ref) = bianchi_fixed_point(10, 15, 6).unwrap();
        let rel = (p_sim - p_ref).abs() / p_ref;
        assert!(rel < 0.05, "p_sim {p_sim} vs p_ref {p_ref} (rel {rel})");
    }

    #[test]
    fn beb_throughput_declines_under_heavy_contention() {
        let mut results = Vec::new();
        for n in [8usize, 16, 32, 64] {
            let mut c = cfg(n, 55);
            c.per_mpdu_error_prob = 0.1;
            let mut sim = SimState::new(c).unwrap();
            let m = sim.run_for(10_000_000.0).unwrap();
            results.push(m.throughput_mbps);
        }
        let peak = results.iter().cloned().fold(f64::MIN, f64::max);
        assert!(
            results[3] < peak,
            "no decline at 64 STAs: {results:?}"
        );
        assert!(results[0] > results[3], "8-STA should beat 64-STA: {results:?}");
    }
}
