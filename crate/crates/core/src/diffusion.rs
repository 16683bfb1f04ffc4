//! Generative-diffusion core: Variance Preserving noise schedule, forward
//! noising, reverse posterior, and the conditioned multi-step denoising
//! sampler used as the policy.
//!
//! The reverse chain reconstructs x̂0 from the predicted noise at every step,
//! clips it to the action box [0,1] before forming the posterior mean (keeping
//! the composed chain bounded), and clamps the final output. The companion
//! backward pass uses one-sided box subgradients: a gradient component passes
//! when the pre-clip value is interior, or when it points back into the box;
//! outward-pushing components at the boundary are zeroed. This keeps the
//! policy-gradient field alive at the box faces without rewarding runaway
//! pre-clip magnitudes.

use crate::error::{Error, Result};
use crate::nn::{ForwardCache, Grads, Mlp};
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub t_steps: usize,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

const BETA_MIN: f64 = 0.1;
const BETA_MAX: f64 = 10.0;

/// Variance Preserving schedule:
/// beta_t = 1 - exp(-beta_min/T - (beta_max-beta_min)(2t-1)/(2T^2)).
pub fn vp_schedule(t_steps: usize) -> Result<DiffusionSchedule> {
    if t_steps == 0 {
        return Err(Error::Config("denoise step count must be >= 1".into()));
    }
    let tf = t_steps as f64;
    let mut betas = Vec::with_capacity(t_steps);
    let mut alphas = Vec::with_capacity(t_steps);
    let mut alpha_bars = Vec::with_capacity(t_steps);
    let mut prod = 1.0;
    for t in 1..=t_steps {
        let exponent = -BETA_MIN / tf - (BETA_MAX - BETA_MIN) * (2.0 * t as f64 - 1.0) / (2.0 * tf * tf);
        let beta = 1.0 - exponent.exp();
        let alpha = 1.0 - beta;
        prod *= alpha;
        betas.push(beta);
        alphas.push(alpha);
        alpha_bars.push(prod);
    }
    Ok(DiffusionSchedule {
        t_steps,
        betas,
        alphas,
        alpha_bars,
    })
}

impl DiffusionSchedule {
    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.t_steps {
            return Err(Error::Config(format!(
                "step {t} out of range 1..={}",
                self.t_steps
            )));
        }
        Ok(())
    }

    /// alpha_bar_{t-1} with the boundary convention alpha_bar_0 = 1.
    fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t >= 2 {
            self.alpha_bars[t - 2]
        } else {
            1.0
        }
    }
}

/// One forward noising step: x_{t+1} = sqrt(1-beta) x_t + sqrt(beta) eps.
pub fn forward_step(x_t: &[f64], beta: f64, eps: &[f64]) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Config(format!("beta {beta} outside [0,1]")));
    }
    if x_t.len() != eps.len() {
        return Err(Error::Shape("forward_step dimension mismatch".into()));
    }
    let keep = (1.0 - beta).sqrt();
    let mix = beta.sqrt();
    Ok(x_t
        .iter()
        .zip(eps)
        .map(|(x, e)| keep * x + mix * e)
        .collect())
}

/// Direct jump to step t: x_t = sqrt(1-abar_t) eps + sqrt(abar_t) x_0.
pub fn forward_sample(
    x_0: &[f64],
    t: usize,
    schedule: &DiffusionSchedule,
    eps: &[f64],
) -> Result<Vec<f64>> {
    schedule.check_t(t)?;
    if x_0.len() != eps.len() {
        return Err(Error::Shape("forward_sample dimension mismatch".into()));
    }
    let ab = schedule.alpha_bars[t - 1];
    let signal = ab.sqrt();
    let noise = (1.0 - ab).sqrt();
    Ok(x_0
        .iter()
        .zip(eps)
        .map(|(x, e)| noise * e + signal * x)
        .collect())
}

/// Reverse-posterior parameters from the noise prediction, raw (no clipping):
/// x̂0 = (x_t - sqrt(1-abar_t) eps_hat)/sqrt(abar_t),
/// mu = c1 x_t + c2 x̂0 with c1 = sqrt(alpha_t)(1-abar_{t-1})/(1-abar_t),
/// c2 = sqrt(abar_{t-1}) beta_t/(1-abar_t); sigma^2 = beta_t(1-abar_{t-1})/(1-abar_t).
/// At t = 1 (abar_0 = 1): mu = x̂0 exactly, sigma = 0.
pub fn posterior_params(
    x_t: &[f64],
    eps_hat: &[f64],
    t: usize,
    schedule: &DiffusionSchedule,
) -> Result<(Vec<f64>, f64)> {
    schedule.check_t(t)?;
    if x_t.len() != eps_hat.len() {
        return Err(Error::Shape("posterior_params dimension mismatch".into()));
    }
    let ab = schedule.alpha_bars[t - 1];
    if ab <= 0.0 {
        return Err(Error::Numeric(
            "alpha_bar = 0: cannot reconstruct x0".into(),
        ));
    }
    let sqrt_ab = ab.sqrt();
    let noise_coef = (1.0 - ab).sqrt();
    let x0_hat: Vec<f64> = x_t
        .iter()
        .zip(eps_hat)
        .map(|(x, e)| (x - noise_coef * e) / sqrt_ab)
        .collect();
    if t == 1 {
        return Ok((x0_hat, 0.0));
    }
    let ab_prev = schedule.alpha_bar_prev(t);
    let alpha = schedule.alphas[t - 1];
    let beta = schedule.betas[t - 1];
    let c1 = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    let c2 = ab_prev.sqrt() * beta / (1.0 - ab);
    let mu = x_t
        .iter()
        .zip(&x0_hat)
        .map(|(x, x0)| c1 * x + c2 * x0)
        .collect();
    let var = beta * (1.0 - ab_prev) / (1.0 - ab);
    Ok((mu, var.sqrt()))
}

/// Conditioned denoiser: predicts the jump noise from [x_t, state, onehot(t)].
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub net: Mlp,
    pub action_dim: usize,
    pub state_dim: usize,
    pub t_steps: usize,
}

impl Denoiser {
    pub fn new(net: Mlp, action_dim: usize, state_dim: usize, t_steps: usize) -> Result<Self> {
        if net.input_dim() != action_dim + state_dim + t_steps {
            return Err(Error::Shape(format!(
                "denoiser input {} != action {} + state {} + steps {}",
                net.input_dim(),
                action_dim,
                state_dim,
                t_steps
            )));
        }
        if net.output_dim() != action_dim {
            return Err(Error::Shape("denoiser output dim != action dim".into()));
        }
        Ok(Denoiser {
            net,
            action_dim,
            state_dim,
            t_steps,
        })
    }

    fn input(&self, x: &[f64], state: &[f64], t: usize) -> Vec<f64> {
        let mut inp = Vec::with_capacity(self.net.input_dim());
        inp.extend_from_slice(x);
        inp.extend_from_slice(state);
        let mut hot = vec![0.0; self.t_steps];
        hot[t - 1] = 1.0;
        inp.extend(hot);
        inp
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenoiseMode {
    Deterministic,
    Stochastic,
}

/// Record of one reverse step, kept for the chain backward pass.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub t: usize,
    pub x_t: Vec<f64>,
    pub cache: ForwardCache,
    /// x̂0 reconstruction before clipping to [0,1].
    pub x0_pre: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DenoiseTrace {
    pub steps: Vec<StepRecord>,
    /// final chain value before the output clamp
    pub final_pre: Vec<f64>,
}

fn clip01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

fn denoise_impl(
    d: &Denoiser,
    state: &[f64],
    x_big_t: &[f64],
    schedule: &DiffusionSchedule,
    mode: DenoiseMode,
    rng: &mut impl Rng,
    mut trace: Option<&mut Vec<StepRecord>>,
) -> Result<Vec<f64>> {
    if x_big_t.len() != d.action_dim {
        return Err(Error::Shape("x_T dimension != action dimension".into()));
    }
    if state.len() != d.state_dim {
        return Err(Error::Shape("state dimension mismatch".into()));
    }
    if schedule.t_steps != d.t_steps {
        return Err(Error::Shape("schedule length != denoiser conditioning".into()));
    }
    let mut x = x_big_t.to_vec();
    for t in (1..=schedule.t_steps).rev() {
        let inp = d.input(&x, state, t);
        let (eps_hat, cache) = d.net.forward(&inp)?;
        let ab = schedule.alpha_bars[t - 1];
        let sqrt_ab = ab.sqrt();
        let noise_coef = (1.0 - ab).sqrt();
        let x0_pre: Vec<f64> = x
            .iter()
            .zip(&eps_hat)
            .map(|(xv, e)| (xv - noise_coef * e) / sqrt_ab)
            .collect();
        let next: Vec<f64> = if t == 1 {
            x0_pre.iter().map(|&v| clip01(v)).collect()
        } else {
            let ab_prev = schedule.alpha_bar_prev(t);
            let alpha = schedule.alphas[t - 1];
            let beta = schedule.betas[t - 1];
            let c1 = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
            let c2 = ab_prev.sqrt() * beta / (1.0 - ab);
            let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
            x.iter()
                .zip(&x0_pre)
                .map(|(xv, &x0)| {
                    let mut v = c1 * xv + c2 * clip01(x0);
                    if mode == DenoiseMode::Stochastic {
                        let n: f64 = rng.sample(StandardNormal);
                        v += sigma * n;
                    }
                    v
                })
                .collect()
        };
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite value at denoise step {t}"
            )));
        }
        if let Some(rec) = trace.as_deref_mut() {
            rec.push(StepRecord {
                t,
                x_t: x.clone(),
                cache,
                x0_pre,
            });
        }
        x = next;
    }
    Ok(x.iter().map(|&v| clip01(v)).collect())
}

/// Run the reverse chain from x_T conditioned on `state`; returns the action
/// candidate in [0,1]^dim. Deterministic mode suppresses the posterior noise.
pub fn denoise(
    d: &Denoiser,
    state: &[f64],
    x_big_t: &[f64],
    schedule: &DiffusionSchedule,
    mode: DenoiseMode,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    denoise_impl(d, state, x_big_t, schedule, mode, rng, None)
}

/// Deterministic denoise that also records everything the backward pass needs.
pub fn denoise_trace(
    d: &Denoiser,
    state: &[f64],
    x_big_t: &[f64],
    schedule: &DiffusionSchedule,
) -> Result<(Vec<f64>, DenoiseTrace)> {
    let mut steps = Vec::with_capacity(schedule.t_steps);
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(0);
    use rand::SeedableRng;
    let out = denoise_impl(
        d,
        state,
        x_big_t,
        schedule,
        DenoiseMode::Deterministic,
        &mut rng,
        Some(&mut steps),
    )?;
    // the value entering the final clamp is the t = 1 step's clipped x̂0,
    // reconstructed here from the recorded pre-clip values
    let final_pre: Vec<f64> = steps
        .last()
        .map(|s| s.x0_pre.iter().map(|&v| clip01(v)).collect())
        .unwrap_or_else(|| out.clone());
    Ok((
        out,
        DenoiseTrace {
            steps,
            final_pre,
        },
    ))
}

/// One-sided box subgradient for clip to [0,1]: identity in the interior,
/// pass at a face only when the ascent direction (+g) points back inside.
fn one_sided(pre: f64, g: f64) -> f64 {
    let interior = pre > 0.0 && pre < 1.0;
    let points_back_in = (pre >= 1.0 && g < 0.0) || (pre <= 0.0 && g > 0.0);
    if interior || points_back_in {
        g
    } else {
        0.0
    }
}

/// Backpropagate `output_grad` (gradient of a scalar objective to ASCEND,
/// w.r.t. the clamped chain output) through the full deterministic denoising
/// chain into the denoiser parameters.
pub fn denoise_backward(
    d: &Denoiser,
    schedule: &DiffusionSchedule,
    trace: &DenoiseTrace,
    output_grad: &[f64],
) -> Result<Grads> {
    if output_grad.len() != d.action_dim {
        return Err(Error::Shape("output_grad dim != action dim".into()));
    }
    // final clamp: the incoming value is the t=1 clipped x̂0 (already in [0,1]);
    // gate at the faces exactly as for the interior clips
    let mut g: Vec<f64> = trace
        .final_pre
        .iter()
        .zip(output_grad)
        .map(|(&pre, &gv)| one_sided(pre, gv))
        .collect();
    let mut grads = Grads::zeros_like(&d.net);
    for rec in trace.steps.iter().rev() {
        let t = rec.t;
        let ab = schedule.alpha_bars[t - 1];
        let sqrt_ab = ab.sqrt();
        let noise_coef = (1.0 - ab).sqrt();
        let (c1, c2) = if t == 1 {
            (0.0, 1.0)
        } else {
            let ab_prev = schedule.alpha_bar_prev(t);
            (
                schedule.alphas[t - 1].sqrt() * (1.0 - ab_prev) / (1.0 - ab),
                ab_prev.sqrt() * schedule.betas[t - 1] / (1.0 - ab),
            )
        };
        // gradient arriving at the clipped x̂0, gated one-sidedly
        let gx0: Vec<f64> = rec
            .x0_pre
            .iter()
            .zip(&g)
            .map(|(&pre, &gv)| one_sided(pre, c2 * gv))
            .collect();
        // x̂0_pre = (x_t - sqrt(1-abar) eps_hat)/sqrt(abar)
        let geps: Vec<f64> = gx0.iter().map(|&gv| -noise_coef / sqrt_ab * gv).collect();
        let (dnet, gin) = d.net.backward(&rec.cache, &geps)?;
        grads.add_scaled(&dnet, 1.0);
        let mut g_prev = vec![0.0; d.action_dim];
        for i in 0..d.action_dim {
            g_prev[i] = c1 * g[i] + gx0[i] / sqrt_ab + gin[i];
        }
        g = g_prev;
    }
    Ok(grads)
}
