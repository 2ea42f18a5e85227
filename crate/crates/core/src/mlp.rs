//! Fully connected ReLU network with a scalar linear output, trained with Adam.
//!
//! Parameters live in one flat vector, layer by layer: the `out × in`
//! weight matrix (row-major) followed by the `out` biases.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub hidden_layers: usize,
    pub width: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            hidden_layers: 2,
            width: 4,
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 500,
            batch_size: None,
            seed: 0,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if self.width == 0 || self.hidden_layers == 0 {
            return Err(crate::Error::usage("MLP width and depth must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(crate::Error::usage("MLP learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(crate::Error::usage("Adam moments must lie in [0, 1) and epsilon must be positive"));
        }
        if self.batch_size == Some(0) {
            return Err(crate::Error::usage("batch size must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    /// Layer widths, input first, `1` last.
    pub sizes: Vec<usize>,
    pub params: Vec<f64>,
}

/// Per-evaluation activations kept for the backward pass.
pub struct Tape {
    /// Post-activation values of every layer, input included.
    acts: Vec<Vec<f64>>,
}

impl Mlp {
    /// Weights and biases drawn `U(-1/√fan_in, 1/√fan_in)`.
    pub fn new(inputs: usize, config: &MlpConfig) -> Self {
        let mut sizes = vec![inputs];
        sizes.extend(std::iter::repeat_n(config.width, config.hidden_layers));
        sizes.push(1);
        let mut rng = rng::stream(config.seed, rng::STREAM_INIT);
        let mut params = Vec::new();
        for l in 0..sizes.len() - 1 {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            for _ in 0..fan_in * fan_out + fan_out {
                params.push(rng.random_range(-bound..bound));
            }
        }
        Mlp { sizes, params }
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn n_inputs(&self) -> usize {
        self.sizes[0]
    }

    pub fn forward(&self, x: &[f64]) -> f64 {
        self.forward_tape(x).0
    }

    pub fn forward_tape(&self, x: &[f64]) -> (f64, Tape) {
        let mut acts = vec![x.to_vec()];
        let mut offset = 0;
        let last = self.sizes.len() - 2;
        for l in 0..=last {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[offset..offset + fan_in * fan_out];
            let b = &self.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            let input = &acts[l];
            let mut out = vec![0.0; fan_out];
            for o in 0..fan_out {
                let z = b[o] + w[o * fan_in..(o + 1) * fan_in].iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
                out[o] = if l == last { z } else { z.max(0.0) };
            }
            acts.push(out);
            offset += fan_in * fan_out + fan_out;
        }
        (acts[acts.len() - 1][0], Tape { acts })
    }

    /// Accumulates `upstream · ∂output/∂params` into `grad`.
    pub fn backward(&self, tape: &Tape, upstream: f64, grad: &mut [f64]) {
        let n_layers = self.sizes.len() - 1;
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for l in 0..n_layers {
            offsets.push(off);
            off += self.sizes[l] * self.sizes[l + 1] + self.sizes[l + 1];
        }
        // delta = ∂out/∂z at the current layer
        let mut delta = vec![upstream];
        for l in (0..n_layers).rev() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let base = offsets[l];
            let input = &tape.acts[l];
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                for i in 0..fan_in {
                    grad[base + o * fan_in + i] += d * input[i];
                }
                grad[base + fan_in * fan_out + o] += d;
            }
            if l == 0 {
                break;
            }
            let w = &self.params[base..base + fan_in * fan_out];
            let mut prev = vec![0.0; fan_in];
            for (i, p) in prev.iter_mut().enumerate() {
                // ReLU derivative: active units have positive output.
                if input[i] > 0.0 {
                    *p = (0..fan_out).map(|o| delta[o] * w[o * fan_in + i]).sum();
                }
            }
            delta = prev;
        }
    }
}

/// Adam state over a flat parameter vector.
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], cfg: &MlpConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grad[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon);
        }
    }
}
