//! Actor-critic learners: replay buffer, exploration schedule, and the
//! training step shared by the diffusion-policy agent and the plain
//! feedforward baseline.
//!
//! Both agents use the same critic, TD targets, Adam updates, and soft target
//! tracking; they differ only in the actor: a conditioned multi-step denoiser
//! versus a sigmoid-squashed state-to-action network.

use crate::diffusion::{
    denoise, denoise_backward, denoise_trace, vp_schedule, DenoiseMode, Denoiser,
    DiffusionSchedule,
};
use crate::error::{Error, Result};
use crate::nn::{soft_update, Adam, Grads, Mlp};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub s_next: Vec<f64>,
}

/// Fixed-capacity ring buffer of transitions; oldest entries evicted first.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    state_dim: usize,
    action_dim: usize,
    storage: Vec<Transition>,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, state_dim: usize, action_dim: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be >= 1".into()));
        }
        Ok(ReplayBuffer {
            capacity,
            state_dim,
            action_dim,
            storage: Vec::with_capacity(capacity),
            cursor: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        if t.s.len() != self.state_dim
            || t.s_next.len() != self.state_dim
            || t.a.len() != self.action_dim
        {
            return Err(Error::Shape(format!(
                "transition dims (s {}, a {}, s' {}) != buffer dims (s {}, a {})",
                t.s.len(),
                t.a.len(),
                t.s_next.len(),
                self.state_dim,
                self.action_dim
            )));
        }
        if !t.r.is_finite() {
            return Err(Error::Numeric("non-finite reward".into()));
        }
        if self.storage.len() < self.capacity {
            self.storage.push(t);
        } else {
            self.storage[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        Ok(())
    }

    /// Uniform draw of n transitions with replacement; None while fewer than
    /// n entries are stored (training step is skipped).
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Option<Vec<&Transition>> {
        if self.storage.len() < n {
            return None;
        }
        Some(
            (0..n)
                .map(|_| &self.storage[rng.random_range(0..self.storage.len())])
                .collect(),
        )
    }

    fn sample_owned(&self, n: usize, rng: &mut impl Rng) -> Option<Vec<Transition>> {
        self.sample(n, rng)
            .map(|v| v.into_iter().cloned().collect())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExplorationNoise {
    pub sigma: f64,
    pub decay: f64,
    pub sigma_min: f64,
}

impl ExplorationNoise {
    pub fn new(sigma0: f64, decay: f64, sigma_min: f64) -> Self {
        ExplorationNoise {
            sigma: sigma0,
            decay,
            sigma_min,
        }
    }

    /// Multiplicative decay applied once per environment interaction.
    pub fn decay_step(&mut self) {
        self.sigma = (self.sigma * self.decay).max(self.sigma_min);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    D3pg,
    Ddpg,
}

/// Learner hyperparameters with ready-to-train defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentConfig {
    pub state_dim: usize,
    pub action_dim: usize,
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

impl AgentConfig {
    pub fn new(state_dim: usize, action_dim: usize) -> Self {
        AgentConfig {
            state_dim,
            action_dim,
            hidden: vec![256, 256],
            denoise_steps: 5,
            actor_lr: 2e-3,
            critic_lr: 2e-2,
            gamma: 0.1,
            tau: 0.05,
            batch_size: 12,
            buffer_capacity: 256,
            sigma0: 0.2,
            sigma_decay: 0.999,
            sigma_min: 0.01,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.state_dim == 0 || self.action_dim == 0 {
            return Err(Error::Config("state/action dims must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0,1)", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau {} outside [0,1]", self.tau)));
        }
        if self.batch_size == 0 || self.buffer_capacity < self.batch_size {
            return Err(Error::Config(
                "need batch_size >= 1 and buffer_capacity >= batch_size".into(),
            ));
        }
        if self.denoise_steps == 0 {
            return Err(Error::Config("denoise_steps must be >= 1".into()));
        }
        Ok(())
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// The actor half of the agent.
#[derive(Debug, Clone)]
pub enum Policy {
    Diffusion {
        denoiser: Denoiser,
        schedule: DiffusionSchedule,
    },
    /// state -> action network, outputs squashed by sigmoid
    Feedforward { net: Mlp },
}

impl Policy {
    pub fn net(&self) -> &Mlp {
        match self {
            Policy::Diffusion { denoiser, .. } => &denoiser.net,
            Policy::Feedforward { net } => net,
        }
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        match self {
            Policy::Diffusion { denoiser, .. } => &mut denoiser.net,
            Policy::Feedforward { net } => net,
        }
    }

    /// Deterministic action for a state. The diffusion actor draws its chain
    /// start x_T from `rng`; the feedforward actor consumes no randomness.
    pub fn deterministic_action(&self, s: &[f64], rng: &mut impl Rng) -> Result<Vec<f64>> {
        match self {
            Policy::Diffusion { denoiser, schedule } => {
                let x_t: Vec<f64> = (0..denoiser.action_dim)
                    .map(|_| rng.sample(StandardNormal))
                    .collect();
                denoise(denoiser, s, &x_t, schedule, DenoiseMode::Deterministic, rng)
            }
            Policy::Feedforward { net } => {
                let (z, _) = net.forward(s)?;
                Ok(z.into_iter().map(sigmoid).collect())
            }
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    algo: Algo,
    train_steps: u64,
    sigma: f64,
    config: AgentConfig,
}

/// Off-policy actor-critic learner with target networks.
#[derive(Debug, Clone)]
pub struct Agent {
    pub config: AgentConfig,
    pub algo: Algo,
    pub actor: Policy,
    pub actor_target: Policy,
    pub critic: Mlp,
    pub critic_target: Mlp,
    pub actor_opt: Adam,
    pub critic_opt: Adam,
    pub noise: ExplorationNoise,
    pub buffer: ReplayBuffer,
    pub train_steps: u64,
}

impl Agent {
    pub fn new(algo: Algo, config: AgentConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let actor = match algo {
            Algo::D3pg => {
                let schedule = vp_schedule(config.denoise_steps)?;
                let in_dim = config.action_dim + config.state_dim + config.denoise_steps;
                let mut sizes = vec![in_dim];
                sizes.extend_from_slice(&config.hidden);
                sizes.push(config.action_dim);
                let net = Mlp::init(&sizes, rng)?;
                Policy::Diffusion {
                    denoiser: Denoiser::new(
                        net,
                        config.action_dim,
                        config.state_dim,
                        config.denoise_steps,
                    )?,
                    schedule,
                }
            }
            Algo::Ddpg => {
                let mut sizes = vec![config.state_dim];
                sizes.extend_from_slice(&config.hidden);
                sizes.push(config.action_dim);
                Policy::Feedforward {
                    net: Mlp::init(&sizes, rng)?,
                }
            }
        };
        let mut critic_sizes = vec![config.state_dim + config.action_dim];
        critic_sizes.extend_from_slice(&config.hidden);
        critic_sizes.push(1);
        let critic = Mlp::init(&critic_sizes, rng)?;
        let actor_target = actor.clone();
        let critic_target = critic.clone();
        let actor_opt = Adam::new(actor.net());
        let critic_opt = Adam::new(&critic);
        let noise = ExplorationNoise::new(config.sigma0, config.sigma_decay, config.sigma_min);
        let buffer = ReplayBuffer::new(
            config.buffer_capacity,
            config.state_dim,
            config.action_dim,
        )?;
        Ok(Agent {
            config,
            algo,
            actor,
            actor_target,
            critic,
            critic_target,
            actor_opt,
            critic_opt,
            noise,
            buffer,
            train_steps: 0,
        })
    }

    /// Deterministic policy action, optionally perturbed by the current
    /// exploration noise and clamped back to [0,1].
    pub fn act(&self, s: &[f64], explore: bool, rng: &mut impl Rng) -> Result<Vec<f64>> {
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite state passed to act".into()));
        }
        let mut a = self.actor.deterministic_action(s, rng)?;
        if explore {
            for v in &mut a {
                let n: f64 = rng.sample(StandardNormal);
                *v = (*v + self.noise.sigma * n).clamp(0.0, 1.0);
            }
        }
        Ok(a)
    }

    pub fn push_transition(&mut self, t: Transition) -> Result<()> {
        self.buffer.push(t)
    }

    /// TD targets y_i = r_i + gamma * Q_target(s'_i, actor_target(s'_i)),
    /// with the target actor run in deterministic mode.
    pub fn critic_target_values(
        &self,
        batch: &[Transition],
        rng: &mut impl Rng,
    ) -> Result<Vec<f64>> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let mut out = Vec::with_capacity(batch.len());
        for t in batch {
            let a_next = self.actor_target.deterministic_action(&t.s_next, rng)?;
            let q = self.q_of(&self.critic_target, &t.s_next, &a_next)?;
            out.push(t.r + self.config.gamma * q);
        }
        Ok(out)
    }

    fn q_of(&self, critic: &Mlp, s: &[f64], a: &[f64]) -> Result<f64> {
        let mut input = Vec::with_capacity(s.len() + a.len());
        input.extend_from_slice(s);
        input.extend_from_slice(a);
        let (q, _) = critic.forward(&input)?;
        Ok(q[0])
    }

    /// Mean squared TD error over the batch and its gradient w.r.t. the
    /// online critic parameters.
    fn critic_grads_for(&self, batch: &[Transition], y: &[f64]) -> Result<(f64, Grads)> {
        let n = batch.len() as f64;
        let mut grads = Grads::zeros_like(&self.critic);
        let mut loss = 0.0;
        for (t, &target) in batch.iter().zip(y) {
            let mut input = Vec::with_capacity(t.s.len() + t.a.len());
            input.extend_from_slice(&t.s);
            input.extend_from_slice(&t.a);
            let (q, cache) = self.critic.forward(&input)?;
            let err = q[0] - target;
            loss += err * err / n;
            let (g, _) = self.critic.backward(&cache, &[2.0 * err / n])?;
            grads.add_scaled(&g, 1.0);
        }
        Ok((loss, grads))
    }

    /// Mean Q(s, pi(s)) over the batch (the ascent objective) and its gradient
    /// w.r.t. the actor parameters, propagated through the critic input and —
    /// for the diffusion actor — the full deterministic denoising chain.
    /// `x_ts` supplies the chain starts (one per sample) for the diffusion
    /// actor and is ignored by the feedforward actor.
    fn actor_grads_for(
        &self,
        batch: &[Transition],
        x_ts: Option<&[Vec<f64>]>,
    ) -> Result<(f64, Grads)> {
        let n = batch.len() as f64;
        let mut grads = Grads::zeros_like(self.actor.net());
        let mut objective = 0.0;
        for (i, t) in batch.iter().enumerate() {
            match &self.actor {
                Policy::Diffusion { denoiser, schedule } => {
                    let x_t = &x_ts
                        .ok_or_else(|| Error::Shape("missing chain starts".into()))?[i];
                    let (a, trace) = denoise_trace(denoiser, &t.s, x_t, schedule)?;
                    let mut input = Vec::with_capacity(t.s.len() + a.len());
                    input.extend_from_slice(&t.s);
                    input.extend_from_slice(&a);
                    let (q, cache) = self.critic.forward(&input)?;
                    objective += q[0] / n;
                    let (_, gin) = self.critic.backward(&cache, &[1.0 / n])?;
                    let da = &gin[t.s.len()..];
                    let g = denoise_backward(denoiser, schedule, &trace, da)?;
                    grads.add_scaled(&g, 1.0);
                }
                Policy::Feedforward { net } => {
                    let (z, cache_a) = net.forward(&t.s)?;
                    let a: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();
                    let mut input = Vec::with_capacity(t.s.len() + a.len());
                    input.extend_from_slice(&t.s);
                    input.extend_from_slice(&a);
                    let (q, cache_q) = self.critic.forward(&input)?;
                    objective += q[0] / n;
                    let (_, gin) = self.critic.backward(&cache_q, &[1.0 / n])?;
                    let gz: Vec<f64> = gin[t.s.len()..]
                        .iter()
                        .zip(&a)
                        .map(|(&g, &y)| g * y * (1.0 - y))
                        .collect();
                    let (g, _) = net.backward(&cache_a, &gz)?;
                    grads.add_scaled(&g, 1.0);
                }
            }
        }
        Ok((objective, grads))
    }

    /// One learning iteration: sample a batch, one Adam step on the critic
    /// (TD regression), one Adam step on the actor (Q ascent), soft-update
    /// both targets. Returns None while the buffer holds fewer than
    /// batch_size transitions.
    pub fn train_step(&mut self, rng: &mut impl Rng) -> Result<Option<(f64, f64)>> {
        let Some(batch) = self.buffer.sample_owned(self.config.batch_size, rng) else {
            return Ok(None);
        };
        let y = self.critic_target_values(&batch, rng)?;
        let (critic_loss, critic_grads) = self.critic_grads_for(&batch, &y)?;
        if !critic_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite critic loss at train step {}",
                self.train_steps
            )));
        }
        self.critic_opt
            .step(&mut self.critic, &critic_grads, self.config.critic_lr)?;

        let x_ts: Option<Vec<Vec<f64>>> = match &self.actor {
            Policy::Diffusion { .. } => Some(
                (0..batch.len())
                    .map(|_| {
                        (0..self.config.action_dim)
                            .map(|_| rng.sample(StandardNormal))
                            .collect()
                    })
                    .collect(),
            ),
            Policy::Feedforward { .. } => None,
        };
        let (actor_objective, actor_grads) = self.actor_grads_for(&batch, x_ts.as_deref())?;
        if !actor_objective.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite actor objective at train step {}",
                self.train_steps
            )));
        }
        let mut descent = Grads::zeros_like(self.actor.net());
        descent.add_scaled(&actor_grads, -1.0);
        self.actor_opt
            .step(self.actor.net_mut(), &descent, self.config.actor_lr)?;

        soft_update(self.actor_target.net_mut(), self.actor.net(), self.config.tau)?;
        soft_update(&mut self.critic_target, &self.critic, self.config.tau)?;
        self.train_steps += 1;
        Ok(Some((critic_loss, actor_objective)))
    }

    /// Write actor/critic/target snapshots plus a manifest into `dir`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.actor.net().save(&dir.join("actor.txt"))?;
        self.actor_target.net().save(&dir.join("actor-target.txt"))?;
        self.critic.save(&dir.join("critic.txt"))?;
        self.critic_target.save(&dir.join("critic-target.txt"))?;
        let manifest = CheckpointManifest {
            format: "agent-checkpoint v1".into(),
            algo: self.algo,
            train_steps: self.train_steps,
            sigma: self.noise.sigma,
            config: self.config.clone(),
        };
        std::fs::write(
            dir.join("manifest.toml"),
            toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?,
        )?;
        Ok(())
    }

    pub fn load_checkpoint(dir: &Path) -> Result<Agent> {
        let manifest: CheckpointManifest =
            toml::from_str(&std::fs::read_to_string(dir.join("manifest.toml"))?)?;
        if manifest.format != "agent-checkpoint v1" {
            return Err(Error::Config(format!(
                "unsupported checkpoint format '{}'",
                manifest.format
            )));
        }
        manifest.config.validate()?;
        let config = manifest.config;
        let wrap = |net: Mlp| -> Result<Policy> {
            match manifest.algo {
                Algo::D3pg => Ok(Policy::Diffusion {
                    denoiser: Denoiser::new(
                        net,
                        config.action_dim,
                        config.state_dim,
                        config.denoise_steps,
                    )?,
                    schedule: vp_schedule(config.denoise_steps)?,
                }),
                Algo::Ddpg => Ok(Policy::Feedforward { net }),
            }
        };
        let actor = wrap(Mlp::load(&dir.join("actor.txt"))?)?;
        let actor_target = wrap(Mlp::load(&dir.join("actor-target.txt"))?)?;
        let critic = Mlp::load(&dir.join("critic.txt"))?;
        let critic_target = Mlp::load(&dir.join("critic-target.txt"))?;
        let actor_opt = Adam::new(actor.net());
        let critic_opt = Adam::new(&critic);
        let buffer = ReplayBuffer::new(
            config.buffer_capacity,
            config.state_dim,
            config.action_dim,
        )?;
        let noise = ExplorationNoise::new(manifest.sigma, config.sigma_decay, config.sigma_min);
        Ok(Agent {
            algo: manifest.algo,
            actor,
            actor_target,
            critic,
            critic_target,
            actor_opt,
            critic_opt,
            noise,
            buffer,
            train_steps: manifest.train_steps,
            config,
        })
    }
}
