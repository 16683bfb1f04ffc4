//! Minimal dense network kernel: parameter container, exact forward/backward,
//! Adam, soft target updates, and bit-exact text snapshots.
//!
//! Hidden layers use the ramp nonlinearity max(0, x); the output layer is
//! identity. Weights are row-major per layer: `weights[k][o * in + i]`.

use crate::error::{Error, Result};
use rand::Rng;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

/// Per-layer pre-activations and activations kept for the backward pass.
/// `activations[0]` is the input; `activations[k+1]` is layer k's output.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub activations: Vec<Vec<f64>>,
    pub pre: Vec<Vec<f64>>,
}

/// Gradient buffer with the same shapes as an `Mlp`.
#[derive(Debug, Clone)]
pub struct Grads {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Grads {
    pub fn zeros_like(net: &Mlp) -> Self {
        Grads {
            weights: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &Grads, scale: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().flatten().all(|v| v.is_finite())
            && self.biases.iter().flatten().all(|v| v.is_finite())
    }
}

impl Mlp {
    /// Fan-in-scaled uniform initialization (bound 1/sqrt(fan_in)), zero biases.
    pub fn init(sizes: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!(
                "layer sizes need >=2 positive entries, got {sizes:?}"
            )));
        }
        let mut weights = Vec::with_capacity(sizes.len() - 1);
        let mut biases = Vec::with_capacity(sizes.len() - 1);
        for k in 0..sizes.len() - 1 {
            let (fan_in, fan_out) = (sizes[k], sizes[k + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            weights.push(w);
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Mlp {
            sizes: sizes.to_vec(),
            weights,
            biases,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        if input.len() != self.sizes[0] {
            return Err(Error::Shape(format!(
                "input length {} != layer size {}",
                input.len(),
                self.sizes[0]
            )));
        }
        let n_layers = self.weights.len();
        let mut activations = Vec::with_capacity(n_layers + 1);
        let mut pre = Vec::with_capacity(n_layers);
        activations.push(input.to_vec());
        for k in 0..n_layers {
            let (n_in, n_out) = (self.sizes[k], self.sizes[k + 1]);
            let x = &activations[k];
            let mut z = self.biases[k].clone();
            let w = &self.weights[k];
            for o in 0..n_out {
                let row = &w[o * n_in..(o + 1) * n_in];
                let mut acc = 0.0;
                for i in 0..n_in {
                    acc += row[i] * x[i];
                }
                z[o] += acc;
            }
            let act = if k + 1 < n_layers {
                z.iter().map(|&v| v.max(0.0)).collect()
            } else {
                z.clone()
            };
            pre.push(z);
            activations.push(act);
        }
        Ok((activations[n_layers].clone(), ForwardCache { activations, pre }))
    }

    /// Exact reverse-mode gradients of `output . output_grad` w.r.t. all
    /// parameters and the input.
    pub fn backward(&self, cache: &ForwardCache, output_grad: &[f64]) -> Result<(Grads, Vec<f64>)> {
        let n_layers = self.weights.len();
        if cache.activations.len() != n_layers + 1 {
            return Err(Error::Shape("cache does not match network depth".into()));
        }
        if output_grad.len() != self.output_dim() {
            return Err(Error::Shape(format!(
                "output_grad length {} != output dim {}",
                output_grad.len(),
                self.output_dim()
            )));
        }
        let mut grads = Grads::zeros_like(self);
        let mut g = output_grad.to_vec();
        for k in (0..n_layers).rev() {
            let (n_in, n_out) = (self.sizes[k], self.sizes[k + 1]);
            if k + 1 < n_layers {
                // ramp nonlinearity: pass gradient where the pre-activation is positive
                for (gv, &z) in g.iter_mut().zip(&cache.pre[k]) {
                    if z <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
            let x = &cache.activations[k];
            let gw = &mut grads.weights[k];
            for o in 0..n_out {
                let go = g[o];
                let row = &mut gw[o * n_in..(o + 1) * n_in];
                for i in 0..n_in {
                    row[i] += go * x[i];
                }
                grads.biases[k][o] += go;
            }
            let w = &self.weights[k];
            let mut g_prev = vec![0.0; n_in];
            for o in 0..n_out {
                let go = g[o];
                let row = &w[o * n_in..(o + 1) * n_in];
                for i in 0..n_in {
                    g_prev[i] += row[i] * go;
                }
            }
            g = g_prev;
        }
        Ok((grads, g))
    }

    /// Text snapshot: format-version header, layer sizes, then row-major
    /// weights and biases per layer. f64 values use the shortest
    /// round-trip decimal form, so save/load is bit-exact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str("mlp-snapshot v1\n");
        out.push_str("sizes");
        for s in &self.sizes {
            out.push_str(&format!(" {s}"));
        }
        out.push('\n');
        for k in 0..self.weights.len() {
            out.push_str(&format!("w{k}"));
            for v in &self.weights[k] {
                out.push_str(&format!(" {v}"));
            }
            out.push('\n');
            out.push_str(&format!("b{k}"));
            for v in &self.biases[k] {
                out.push_str(&format!(" {v}"));
            }
            out.push('\n');
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(out.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let mut lines = BufReader::new(f).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Config("empty snapshot file".into()))??;
        if header != "mlp-snapshot v1" {
            return Err(Error::Config(format!("unknown snapshot header: {header}")));
        }
        let sizes_line = lines
            .next()
            .ok_or_else(|| Error::Config("snapshot missing sizes".into()))??;
        let mut parts = sizes_line.split_whitespace();
        if parts.next() != Some("sizes") {
            return Err(Error::Config("snapshot sizes line malformed".into()));
        }
        let sizes: Vec<usize> = parts
            .map(|p| {
                p.parse()
                    .map_err(|e| Error::Config(format!("bad size {p}: {e}")))
            })
            .collect::<Result<_>>()?;
        if sizes.len() < 2 {
            return Err(Error::Config("snapshot needs >=2 layer sizes".into()));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for k in 0..sizes.len() - 1 {
            let wl = lines
                .next()
                .ok_or_else(|| Error::Config(format!("snapshot missing w{k}")))??;
            let bl = lines
                .next()
                .ok_or_else(|| Error::Config(format!("snapshot missing b{k}")))??;
            let parse_row = |line: &str, tag: &str, expect: usize| -> Result<Vec<f64>> {
                let mut it = line.split_whitespace();
                if it.next() != Some(tag) {
                    return Err(Error::Config(format!("expected row tag {tag}")));
                }
                let row: Vec<f64> = it
                    .map(|p| {
                        p.parse()
                            .map_err(|e| Error::Config(format!("bad value {p}: {e}")))
                    })
                    .collect::<Result<_>>()?;
                if row.len() != expect {
                    return Err(Error::Shape(format!(
                        "row {tag} has {} values, expected {expect}",
                        row.len()
                    )));
                }
                Ok(row)
            };
            weights.push(parse_row(&wl, &format!("w{k}"), sizes[k] * sizes[k + 1])?);
            biases.push(parse_row(&bl, &format!("b{k}"), sizes[k + 1])?);
        }
        Ok(Mlp {
            sizes,
            weights,
            biases,
        })
    }
}

/// target <- tau * online + (1 - tau) * target, element-wise.
pub fn soft_update(target: &mut Mlp, online: &Mlp, tau: f64) -> Result<()> {
    if target.sizes != online.sizes {
        return Err(Error::Shape("soft_update shape mismatch".into()));
    }
    for (t, o) in target.weights.iter_mut().zip(&online.weights) {
        for (tv, ov) in t.iter_mut().zip(o) {
            *tv = tau * ov + (1.0 - tau) * *tv;
        }
    }
    for (t, o) in target.biases.iter_mut().zip(&online.biases) {
        for (tv, ov) in t.iter_mut().zip(o) {
            *tv = tau * ov + (1.0 - tau) * *tv;
        }
    }
    Ok(())
}

/// Adam optimizer state (beta1 = 0.9, beta2 = 0.999, eps = 1e-8).
#[derive(Debug, Clone)]
pub struct Adam {
    pub m: Grads,
    pub v: Grads,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Adam {
    pub fn new(net: &Mlp) -> Self {
        Adam {
            m: Grads::zeros_like(net),
            v: Grads::zeros_like(net),
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// One bias-corrected Adam update. Non-finite gradients abort the update
    /// (parameters and moments untouched) and report a numeric error.
    pub fn step(&mut self, net: &mut Mlp, grads: &Grads, lr: f64) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::Numeric("non-finite gradient in adam step".into()));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + self.epsilon);
            }
        };
        for k in 0..net.weights.len() {
            update(
                &mut net.weights[k],
                &grads.weights[k],
                &mut self.m.weights[k],
                &mut self.v.weights[k],
            );
            update(
                &mut net.biases[k],
                &grads.biases[k],
                &mut self.m.biases[k],
                &mut self.v.biases[k],
            );
        }
        Ok(())
    }
}
