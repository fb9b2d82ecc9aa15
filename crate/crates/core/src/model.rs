//! A small frame classifier with hand-written reverse-mode gradients.
//!
//! Architecture, per frame `t`:
//!
//! ```text
//! h0_t   = tanh(W_in x_t + b_in)
//! h_l+1  = h_l + tanh(depthwise_conv_l(h_l) + d_l)      (l = 0..layers)
//! z_t    = W_out dropout(h_L)_t + b_out
//! logp_t = log_softmax(z_t)
//! ```
//!
//! The depthwise convolution mixes each hidden channel over a centred
//! window of frames, zero-padded at the sequence edges.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fst::{Emissions, GradientMatrix};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("feature width {got} does not match model input width {expected}")]
    FeatureWidth { expected: usize, got: usize },
    #[error("parameters contain NaN or inf; training diverged")]
    NonFiniteParams,
    #[error("gradient length {got} does not match parameter count {expected}")]
    GradientLength { expected: usize, got: usize },
    #[error("invalid model config: {0}")]
    Config(String),
}

/// A `frames × dim` feature matrix, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Features {
    pub frames: usize,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl Features {
    pub fn new(frames: usize, dim: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), frames * dim, "feature shape mismatch");
        Self { frames, dim, values }
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub hidden: usize,
    /// Output classes including blank.
    pub vocab: usize,
    pub window: usize,
    pub layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            hidden: 48,
            vocab: 9,
            window: 5,
            layers: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.feature_dim == 0 || self.hidden == 0 || self.vocab < 2 {
            return Err(ModelError::Config("feature_dim, hidden must be > 0 and vocab >= 2".into()));
        }
        if self.window % 2 == 0 {
            return Err(ModelError::Config(format!("window {} must be odd", self.window)));
        }
        if !(1..=2).contains(&self.layers) {
            return Err(ModelError::Config(format!("layers {} must be 1 or 2", self.layers)));
        }
        Ok(())
    }

    fn layout(&self) -> Layout {
        let (f, h, v, w) = (self.feature_dim, self.hidden, self.vocab, self.window);
        let w_in = 0;
        let b_in = w_in + h * f;
        let mut next = b_in + h;
        let mut conv = Vec::with_capacity(self.layers);
        for _ in 0..self.layers {
            conv.push((next, next + h * w));
            next += h * w + h;
        }
        let w_out = next;
        let b_out = w_out + v * h;
        Layout {
            w_in,
            b_in,
            conv,
            w_out,
            b_out,
            len: b_out + v,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().len
    }
}

/// Offsets of each tensor in the flat parameter vector.
#[derive(Clone, Debug)]
struct Layout {
    w_in: usize,
    b_in: usize,
    /// `(kernel, bias)` per conv layer.
    conv: Vec<(usize, usize)>,
    w_out: usize,
    b_out: usize,
    len: usize,
}

/// Stochastic perturbation applied in [`SequenceModel::forward`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Perturb {
    Off,
    /// Inverted dropout on the last hidden layer, drawn from `seed`.
    Dropout { rate: f64, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceModel {
    config: ModelConfig,
    params: Vec<f64>,
}

/// Intermediate activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    features: Features,
    /// Hidden states `h_0 ..= h_L`, each `frames × hidden`.
    hidden: Vec<Vec<f64>>,
    /// `tanh` outputs of each conv layer.
    mixed: Vec<Vec<f64>>,
    /// Per-entry dropout scale (`0` or `1 / (1 - rate)`), if any.
    dropout: Option<Vec<f64>>,
    dropped: Vec<f64>,
    emissions: Emissions,
}

impl ForwardCache {
    pub fn emissions(&self) -> &Emissions {
        &self.emissions
    }
}

impl SequenceModel {
    /// Random initialization from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = config.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; layout.len];
        let (f, h, v, w) = (config.feature_dim, config.hidden, config.vocab, config.window);
        let mut fill = |range: std::ops::Range<usize>, scale: f64| {
            for p in &mut params[range] {
                *p = rng.random_range(-scale..scale);
            }
        };
        fill(layout.w_in..layout.b_in, (6.0 / (f + h) as f64).sqrt());
        for &(k, _) in &layout.conv {
            fill(k..k + h * w, (1.0 / w as f64).sqrt());
        }
        fill(layout.w_out..layout.b_out, (6.0 / (h + v) as f64).sqrt());
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self, ModelError> {
        config.validate()?;
        if params.len() != config.param_count() {
            return Err(ModelError::GradientLength {
                expected: config.param_count(),
                got: params.len(),
            });
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Zeroes the output projection and bias, making every row uniform.
    pub fn zero_output(&mut self) {
        let l = self.config.layout();
        self.params[l.w_out..l.len].fill(0.0);
    }

    /// Per-frame log-probabilities.
    pub fn emissions(&self, features: &Features, perturb: Perturb) -> Result<Emissions, ModelError> {
        Ok(self.forward(features, perturb)?.emissions)
    }

    pub fn forward(&self, features: &Features, perturb: Perturb) -> Result<ForwardCache, ModelError> {
        let cfg = &self.config;
        if features.dim != cfg.feature_dim {
            return Err(ModelError::FeatureWidth {
                expected: cfg.feature_dim,
                got: features.dim,
            });
        }
        if self.params.iter().any(|p| !p.is_finite()) {
            return Err(ModelError::NonFiniteParams);
        }
        let l = cfg.layout();
        let p = &self.params;
        let (frames, f, h, v, w) = (features.frames, cfg.feature_dim, cfg.hidden, cfg.vocab, cfg.window);
        let half = w / 2;

        let mut h0 = vec![0.0; frames * h];
        for t in 0..frames {
            let x = features.row(t);
            for j in 0..h {
                let row = &p[l.w_in + j * f..l.w_in + (j + 1) * f];
                let a: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + p[l.b_in + j];
                h0[t * h + j] = a.tanh();
            }
        }
        let mut hidden = vec![h0];
        let mut mixed = Vec::with_capacity(cfg.layers);
        for &(k_off, d_off) in &l.conv {
            let prev = hidden.last().expect("h0 pushed");
            let mut u = vec![0.0; frames * h];
            let mut next = prev.clone();
            for t in 0..frames {
                for j in 0..h {
                    let mut c = p[d_off + j];
                    for k in 0..w {
                        let src = t + k;
                        if src < half || src - half >= frames {
                            continue;
                        }
                        c += p[k_off + j * w + k] * prev[(src - half) * h + j];
                    }
                    let ut = c.tanh();
                    u[t * h + j] = ut;
                    next[t * h + j] += ut;
                }
            }
            mixed.push(u);
            hidden.push(next);
        }

        let last = hidden.last().expect("at least h0");
        let dropout = match perturb {
            Perturb::Dropout { rate, seed } if rate > 0.0 => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let keep = 1.0 - rate;
                Some(
                    (0..frames * h)
                        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                        .collect::<Vec<f64>>(),
                )
            }
            _ => None,
        };
        let dropped: Vec<f64> = match &dropout {
            Some(mask) => last.iter().zip(mask).map(|(a, m)| a * m).collect(),
            None => last.clone(),
        };

        let mut logits = vec![0.0; frames * v];
        for t in 0..frames {
            let ht = &dropped[t * h..(t + 1) * h];
            for c in 0..v {
                let row = &p[l.w_out + c * h..l.w_out + (c + 1) * h];
                logits[t * v + c] = row.iter().zip(ht).map(|(a, b)| a * b).sum::<f64>() + p[l.b_out + c];
            }
        }
        let emissions = Emissions::log_softmax(frames, v, &logits).map_err(|_| ModelError::NonFiniteParams)?;
        Ok(ForwardCache {
            features: features.clone(),
            hidden,
            mixed,
            dropout,
            dropped,
            emissions,
        })
    }

    /// Parameter gradient of a scalar loss, given `d loss / d log-probs`.
    pub fn backward(&self, cache: &ForwardCache, grad_logp: &GradientMatrix) -> Vec<f64> {
        let cfg = &self.config;
        let l = cfg.layout();
        let p = &self.params;
        let (f, h, v, w) = (cfg.feature_dim, cfg.hidden, cfg.vocab, cfg.window);
        let frames = cache.features.frames;
        let half = w / 2;
        let mut g = vec![0.0; l.len];

        // log_softmax: dz = g - softmax * sum(g)
        let mut gz = vec![0.0; frames * v];
        for t in 0..frames {
            let gr = grad_logp.row(t);
            let total: f64 = gr.iter().sum();
            for c in 0..v {
                gz[t * v + c] = gr[c] - cache.emissions.prob(t, c) * total;
            }
        }

        let mut gh = vec![0.0; frames * h];
        for t in 0..frames {
            let ht = &cache.dropped[t * h..(t + 1) * h];
            for c in 0..v {
                let d = gz[t * v + c];
                if d == 0.0 {
                    continue;
                }
                g[l.b_out + c] += d;
                let row = l.w_out + c * h;
                for j in 0..h {
                    g[row + j] += d * ht[j];
                    gh[t * h + j] += d * p[row + j];
                }
            }
        }
        if let Some(mask) = &cache.dropout {
            gh.iter_mut().zip(mask).for_each(|(a, m)| *a *= m);
        }

        for (layer, &(k_off, d_off)) in l.conv.iter().enumerate().rev() {
            let input = &cache.hidden[layer];
            let u = &cache.mixed[layer];
            let mut g_in = gh.clone();
            for t in 0..frames {
                for j in 0..h {
                    let gc = gh[t * h + j] * (1.0 - u[t * h + j] * u[t * h + j]);
                    if gc == 0.0 {
                        continue;
                    }
                    g[d_off + j] += gc;
                    for k in 0..w {
                        let src = t + k;
                        if src < half || src - half >= frames {
                            continue;
                        }
                        let s = src - half;
                        g[k_off + j * w + k] += gc * input[s * h + j];
                        g_in[s * h + j] += gc * p[k_off + j * w + k];
                    }
                }
            }
            gh = g_in;
        }

        let h0 = &cache.hidden[0];
        for t in 0..frames {
            let x = cache.features.row(t);
            for j in 0..h {
                let ga = gh[t * h + j] * (1.0 - h0[t * h + j] * h0[t * h + j]);
                if ga == 0.0 {
                    continue;
                }
                g[l.b_in + j] += ga;
                let row = l.w_in + j * f;
                for (i, &xi) in x.iter().enumerate() {
                    g[row + i] += ga * xi;
                }
            }
        }
        g
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Global gradient-norm bound; `<= 0` disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            momentum: 0.9,
            clip_norm: 5.0,
        }
    }
}

/// Student, EMA teacher and optimizer state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub student: SequenceModel,
    pub teacher: SequenceModel,
    pub velocity: Vec<f64>,
    pub optim: OptimConfig,
    pub ema_decay: f64,
    pub step: u64,
}

/// Scales `grads` in place so its L2 norm is at most `bound`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [f64], bound: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if bound > 0.0 && norm > bound {
        let k = bound / norm;
        grads.iter_mut().for_each(|g| *g *= k);
    }
    norm
}

impl TrainState {
    /// Teacher starts as a copy of the student.
    pub fn new(student: SequenceModel, optim: OptimConfig, ema_decay: f64) -> Self {
        let velocity = vec![0.0; student.params.len()];
        Self {
            teacher: student.clone(),
            student,
            velocity,
            optim,
            ema_decay,
            step: 0,
        }
    }

    /// Clipped momentum SGD on the student.
    pub fn sgd_step(&mut self, grads: &[f64]) -> Result<(), ModelError> {
        if grads.len() != self.student.params.len() {
            return Err(ModelError::GradientLength {
                expected: self.student.params.len(),
                got: grads.len(),
            });
        }
        let mut grads = grads.to_vec();
        clip_global_norm(&mut grads, self.optim.clip_norm);
        let (lr, mu) = (self.optim.learning_rate, self.optim.momentum);
        for ((p, vel), g) in self.student.params.iter_mut().zip(&mut self.velocity).zip(&grads) {
            *vel = mu * *vel + g;
            *p -= lr * *vel;
        }
        self.step += 1;
        if self.student.params.iter().any(|p| !p.is_finite()) {
            return Err(ModelError::NonFiniteParams);
        }
        Ok(())
    }

    /// `teacher <- decay * teacher + (1 - decay) * student`.
    pub fn ema_update(&mut self) {
        let d = self.ema_decay;
        for (t, s) in self.teacher.params.iter_mut().zip(&self.student.params) {
            *t = d * *t + (1.0 - d) * s;
        }
    }

    /// Sets the teacher to the student.
    pub fn sync_teacher(&mut self) {
        self.teacher = self.student.clone();
    }
}
