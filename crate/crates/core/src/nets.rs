//! Dense encoder/decoder networks with hand-written backward passes, and Adam.
//!
//! The encoder is a trunk MLP followed by linear heads. In diagonal mode the
//! heads are `μ` and `log s` (both `d′ → d`); in AR(1) mode they are `μ`
//! (`d′ → d`) plus two scalar heads `log s` and `ρ_raw` (`d′ → 1` each), with
//! `s = exp(log s)` and `ρ = tanh(ρ_raw)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::posterior::{Ar1Posterior, DiagPosterior, Posterior, PosteriorGrad};

/// Raw `log s` outputs are clamped to this range before exponentiation so
/// `s` stays finite and positive.
pub const LOG_SCALE_LIMIT: f64 = 40.0;
/// Raw correlation outputs are clamped here; `tanh(18) < 1` in f64.
pub const RHO_RAW_LIMIT: f64 = 18.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-v).exp()),
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, out: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if out > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - out * out,
            Activation::Sigmoid => out * (1.0 - out),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosteriorKind {
    Diag,
    Ar1,
}

impl std::fmt::Display for PosteriorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PosteriorKind::Diag => "diag",
            PosteriorKind::Ar1 => "ar1",
        })
    }
}

/// Fully connected layer `y = act(W x + b)`, `W` stored row-major as
/// `outputs × inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    inputs: usize,
    outputs: usize,
    activation: Activation,
    weight: Vec<f64>,
    bias: Vec<f64>,
    grad_weight: Vec<f64>,
    grad_bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            inputs,
            outputs,
            activation,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
            grad_weight: vec![0.0; inputs * outputs],
            grad_bias: vec![0.0; outputs],
        }
    }

    /// Weights uniform in `±1/√fan_in`, zero biases.
    pub fn fan_in_uniform<R: Rng + ?Sized>(inputs: usize, outputs: usize, activation: Activation, rng: &mut R) -> Self {
        let mut layer = Self::zeros(inputs, outputs, activation);
        let bound = 1.0 / (inputs as f64).sqrt();
        for w in &mut layer.weight {
            *w = rng.random_range(-bound..bound);
        }
        layer
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn grad_weight(&self) -> &[f64] {
        &self.grad_weight
    }

    pub fn grad_bias(&self) -> &[f64] {
        &self.grad_bias
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn weight_mut(&mut self) -> &mut [f64] {
        &mut self.weight
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.inputs {
            return Err(Error::Dimension {
                what: "dense layer input",
                expected: self.inputs,
                actual: x.len(),
            });
        }
        Ok(self
            .weight
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| {
                let pre = row.iter().zip(x).fold(*b, |acc, (w, v)| acc + w * v);
                self.activation.apply(pre)
            })
            .collect())
    }

    /// Accumulates parameter gradients for one (input, output) pair and
    /// returns the gradient with respect to the input.
    pub fn backward(&mut self, input: &[f64], output: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.inputs || output.len() != self.outputs {
            return Err(Error::StaleCache("dense layer activations do not match layer shape"));
        }
        if upstream.len() != self.outputs {
            return Err(Error::Dimension {
                what: "dense layer upstream gradient",
                expected: self.outputs,
                actual: upstream.len(),
            });
        }
        let mut grad_input = vec![0.0; self.inputs];
        for (o, (&out, &up)) in output.iter().zip(upstream).enumerate() {
            let g = up * self.activation.derivative_from_output(out);
            if g == 0.0 {
                continue;
            }
            self.grad_bias[o] += g;
            let row = o * self.inputs;
            let w = &self.weight[row..row + self.inputs];
            let gw = &mut self.grad_weight[row..row + self.inputs];
            for i in 0..self.inputs {
                gw[i] += g * input[i];
                grad_input[i] += g * w[i];
            }
        }
        Ok(grad_input)
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.fill(0.0);
        self.grad_bias.fill(0.0);
    }

    fn visit(&mut self, f: &mut dyn FnMut(&mut [f64], &[f64])) {
        f(&mut self.weight, &self.grad_weight);
        f(&mut self.bias, &self.grad_bias);
    }
}

/// Anything whose parameters an optimizer can walk, in a fixed order.
pub trait Trainable {
    /// Calls `f(values, grads)` once per parameter tensor.
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &[f64]));

    fn param_shapes(&mut self) -> Vec<usize> {
        let mut shapes = Vec::new();
        self.visit_params(&mut |p, _| shapes.push(p.len()));
        shapes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
    version: u64,
}

/// Activations recorded by [`Mlp::forward`]; `activations[0]` is the input
/// and `activations[k + 1]` the output of layer `k`.
#[derive(Debug, Clone)]
pub struct MlpCache {
    version: u64,
    activations: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("cache holds at least the input")
    }

    pub fn input(&self) -> &[f64] {
        &self.activations[0]
    }
}

impl Mlp {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Dimension {
                what: "mlp layer count",
                expected: 1,
                actual: 0,
            });
        }
        for pair in layers.windows(2) {
            if pair[0].outputs != pair[1].inputs {
                return Err(Error::Dimension {
                    what: "mlp layer chaining",
                    expected: pair[0].outputs,
                    actual: pair[1].inputs,
                });
            }
        }
        Ok(Self { layers, version: 0 })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn forward(&self, x: &[f64]) -> Result<MlpCache> {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_vec());
        for layer in &self.layers {
            let next = layer.forward(activations.last().expect("non-empty"))?;
            activations.push(next);
        }
        Ok(MlpCache {
            version: self.version,
            activations,
        })
    }

    pub fn infer(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut cur = x.to_vec();
        for layer in &self.layers {
            cur = layer.forward(&cur)?;
        }
        Ok(cur)
    }

    /// Accumulates gradients into the layers' buffers and returns
    /// `∂loss/∂input`. The cache must come from `forward` on the current
    /// parameters.
    pub fn backward(&mut self, cache: &MlpCache, upstream: &[f64]) -> Result<Vec<f64>> {
        if cache.version != self.version {
            return Err(Error::StaleCache("parameters changed since the forward pass"));
        }
        if cache.activations.len() != self.layers.len() + 1 {
            return Err(Error::StaleCache("cache was recorded on a different network"));
        }
        let mut grad = upstream.to_vec();
        for (k, layer) in self.layers.iter_mut().enumerate().rev() {
            grad = layer.backward(&cache.activations[k], &cache.activations[k + 1], &grad)?;
        }
        Ok(grad)
    }

    pub fn zero_grad(&mut self) {
        self.layers.iter_mut().for_each(Dense::zero_grad);
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }
}

impl Trainable for Mlp {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &[f64])) {
        self.version += 1;
        for layer in &mut self.layers {
            layer.visit(f);
        }
    }
}

/// Raw (pre-squash) head outputs for one input.
#[derive(Debug, Clone, PartialEq)]
pub enum RawHeads {
    Diagonal { mu: Vec<f64>, log_var: Vec<f64> },
    Ar1 { mu: Vec<f64>, log_s: f64, rho_raw: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum EncoderHeads {
    Diagonal { mu: Dense, log_var: Dense },
    Ar1 { mu: Dense, log_s: Dense, rho_raw: Dense },
}

fn clamp_derivative(raw: f64, limit: f64) -> f64 {
    if raw.abs() <= limit {
        1.0
    } else {
        0.0
    }
}

impl EncoderHeads {
    pub fn kind(&self) -> PosteriorKind {
        match self {
            EncoderHeads::Diagonal { .. } => PosteriorKind::Diag,
            EncoderHeads::Ar1 { .. } => PosteriorKind::Ar1,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            EncoderHeads::Diagonal { mu, .. } | EncoderHeads::Ar1 { mu, .. } => mu.inputs,
        }
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            EncoderHeads::Diagonal { mu, .. } | EncoderHeads::Ar1 { mu, .. } => mu.outputs,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            EncoderHeads::Diagonal { mu, log_var } => mu.param_count() + log_var.param_count(),
            EncoderHeads::Ar1 { mu, log_s, rho_raw } => mu.param_count() + log_s.param_count() + rho_raw.param_count(),
        }
    }

    pub fn forward(&self, h: &[f64]) -> Result<RawHeads> {
        Ok(match self {
            EncoderHeads::Diagonal { mu, log_var } => RawHeads::Diagonal {
                mu: mu.forward(h)?,
                log_var: log_var.forward(h)?,
            },
            EncoderHeads::Ar1 { mu, log_s, rho_raw } => RawHeads::Ar1 {
                mu: mu.forward(h)?,
                log_s: log_s.forward(h)?[0],
                rho_raw: rho_raw.forward(h)?[0],
            },
        })
    }

    /// Squashes raw outputs into a valid posterior.
    pub fn posterior(raw: &RawHeads) -> Result<Posterior> {
        Ok(match raw {
            RawHeads::Diagonal { mu, log_var } => Posterior::Diag(DiagPosterior::new(
                mu.clone(),
                log_var
                    .iter()
                    .map(|v| v.clamp(-LOG_SCALE_LIMIT, LOG_SCALE_LIMIT).exp())
                    .collect(),
            )?),
            RawHeads::Ar1 { mu, log_s, rho_raw } => Posterior::Ar1(Ar1Posterior::new(
                mu.clone(),
                rho_raw.clamp(-RHO_RAW_LIMIT, RHO_RAW_LIMIT).tanh(),
                log_s.clamp(-LOG_SCALE_LIMIT, LOG_SCALE_LIMIT).exp(),
            )?),
        })
    }

    /// Backpropagates a posterior gradient (already expressed in raw
    /// coordinates) through the heads; returns the gradient for the trunk
    /// output `h`.
    pub fn backward(&mut self, h: &[f64], raw: &RawHeads, grad: &PosteriorGrad) -> Result<Vec<f64>> {
        let mut g_h = match (self, raw, grad) {
            (EncoderHeads::Diagonal { mu, log_var }, RawHeads::Diagonal { mu: m, log_var: lv }, PosteriorGrad::Diag(g)) => {
                let g_lv: Vec<f64> = g
                    .d_log_var
                    .iter()
                    .zip(lv)
                    .map(|(g, r)| g * clamp_derivative(*r, LOG_SCALE_LIMIT))
                    .collect();
                let a = mu.backward(h, m, &g.d_mu)?;
                let b = log_var.backward(h, lv, &g_lv)?;
                a.into_iter().zip(b).map(|(x, y)| x + y).collect::<Vec<_>>()
            }
            (EncoderHeads::Ar1 { mu, log_s, rho_raw }, RawHeads::Ar1 { mu: m, log_s: ls, rho_raw: rr }, PosteriorGrad::Ar1(g)) => {
                let a = mu.backward(h, m, &g.d_mu)?;
                let b = log_s.backward(h, &[*ls], &[g.d_log_s * clamp_derivative(*ls, LOG_SCALE_LIMIT)])?;
                let c = rho_raw.backward(h, &[*rr], &[g.d_rho_raw * clamp_derivative(*rr, RHO_RAW_LIMIT)])?;
                a.iter().zip(&b).zip(&c).map(|((x, y), z)| x + y + z).collect()
            }
            _ => return Err(Error::StaleCache("head outputs recorded for the other posterior family")),
        };
        g_h.shrink_to_fit();
        Ok(g_h)
    }

    pub fn zero_grad(&mut self) {
        match self {
            EncoderHeads::Diagonal { mu, log_var } => {
                mu.zero_grad();
                log_var.zero_grad();
            }
            EncoderHeads::Ar1 { mu, log_s, rho_raw } => {
                mu.zero_grad();
                log_s.zero_grad();
                rho_raw.zero_grad();
            }
        }
    }

    fn named_layers(&self) -> Vec<(&'static str, &Dense)> {
        match self {
            EncoderHeads::Diagonal { mu, log_var } => vec![("mu", mu), ("log_var", log_var)],
            EncoderHeads::Ar1 { mu, log_s, rho_raw } => vec![("mu", mu), ("log_s", log_s), ("rho_raw", rho_raw)],
        }
    }

    fn layers_mut(&mut self) -> Vec<&mut Dense> {
        match self {
            EncoderHeads::Diagonal { mu, log_var } => vec![mu, log_var],
            EncoderHeads::Ar1 { mu, log_s, rho_raw } => vec![mu, log_s, rho_raw],
        }
    }
}

impl Trainable for EncoderHeads {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &[f64])) {
        for layer in self.layers_mut() {
            layer.visit(f);
        }
    }
}

/// Shape of a VAE: `input → hidden (relu) → heads` and
/// `latent → hidden (relu) → input (output activation)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaeSpec {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub posterior: PosteriorKind,
    pub output_activation: Activation,
}

impl VaeSpec {
    fn validate(&self) -> Result<()> {
        for (what, v) in [
            ("input dimension", self.input_dim),
            ("hidden dimension", self.hidden_dim),
            ("latent dimension", self.latent_dim),
        ] {
            if v == 0 {
                return Err(Error::Dimension { what, expected: 1, actual: 0 });
            }
        }
        Ok(())
    }
}

// Each component draws its initial weights from its own ChaCha stream, so
// switching the posterior family leaves the trunk, decoder and mean head
// bit-identical for a given seed.
const STREAM_TRUNK: u64 = 1;
const STREAM_DECODER: u64 = 2;
const STREAM_MU_HEAD: u64 = 3;
const STREAM_SCALE_HEADS: u64 = 4;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vae {
    spec: VaeSpec,
    encoder: Mlp,
    heads: EncoderHeads,
    decoder: Mlp,
}

/// Everything the backward pass needs from one encoder evaluation.
#[derive(Debug, Clone)]
pub struct EncoderPass {
    pub trunk: MlpCache,
    pub raw: RawHeads,
    pub posterior: Posterior,
}

impl Vae {
    pub fn new(spec: VaeSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let (n, h, d) = (spec.input_dim, spec.hidden_dim, spec.latent_dim);
        let mut rng = stream(seed, STREAM_TRUNK);
        let encoder = Mlp::new(vec![Dense::fan_in_uniform(n, h, Activation::Relu, &mut rng)])?;

        let mut rng = stream(seed, STREAM_DECODER);
        let decoder = Mlp::new(vec![
            Dense::fan_in_uniform(d, h, Activation::Relu, &mut rng),
            Dense::fan_in_uniform(h, n, spec.output_activation, &mut rng),
        ])?;

        let mu = Dense::fan_in_uniform(h, d, Activation::Identity, &mut stream(seed, STREAM_MU_HEAD));
        let mut rng = stream(seed, STREAM_SCALE_HEADS);
        let heads = match spec.posterior {
            PosteriorKind::Diag => EncoderHeads::Diagonal {
                mu,
                log_var: Dense::fan_in_uniform(h, d, Activation::Identity, &mut rng),
            },
            PosteriorKind::Ar1 => EncoderHeads::Ar1 {
                mu,
                log_s: Dense::fan_in_uniform(h, 1, Activation::Identity, &mut rng),
                rho_raw: Dense::fan_in_uniform(h, 1, Activation::Identity, &mut rng),
            },
        };
        Ok(Self {
            spec,
            encoder,
            heads,
            decoder,
        })
    }

    /// All weights and biases zero.
    pub fn zeroed(spec: VaeSpec) -> Result<Self> {
        spec.validate()?;
        let (n, h, d) = (spec.input_dim, spec.hidden_dim, spec.latent_dim);
        let heads = match spec.posterior {
            PosteriorKind::Diag => EncoderHeads::Diagonal {
                mu: Dense::zeros(h, d, Activation::Identity),
                log_var: Dense::zeros(h, d, Activation::Identity),
            },
            PosteriorKind::Ar1 => EncoderHeads::Ar1 {
                mu: Dense::zeros(h, d, Activation::Identity),
                log_s: Dense::zeros(h, 1, Activation::Identity),
                rho_raw: Dense::zeros(h, 1, Activation::Identity),
            },
        };
        Ok(Self {
            spec,
            encoder: Mlp::new(vec![Dense::zeros(n, h, Activation::Relu)])?,
            heads,
            decoder: Mlp::new(vec![
                Dense::zeros(d, h, Activation::Relu),
                Dense::zeros(h, n, spec.output_activation),
            ])?,
        })
    }

    pub fn spec(&self) -> &VaeSpec {
        &self.spec
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn heads(&self) -> &EncoderHeads {
        &self.heads
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    pub fn heads_mut(&mut self) -> &mut EncoderHeads {
        &mut self.heads
    }

    pub fn encode(&self, x: &[f64]) -> Result<Posterior> {
        let h = self.encoder.infer(x)?;
        EncoderHeads::posterior(&self.heads.forward(&h)?)
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.decoder.infer(z)
    }

    pub fn encode_cached(&self, x: &[f64]) -> Result<EncoderPass> {
        let trunk = self.encoder.forward(x)?;
        let raw = self.heads.forward(trunk.output())?;
        let posterior = EncoderHeads::posterior(&raw)?;
        Ok(EncoderPass { trunk, raw, posterior })
    }

    pub fn decode_cached(&self, z: &[f64]) -> Result<MlpCache> {
        self.decoder.forward(z)
    }

    /// Returns `∂loss/∂z`.
    pub fn backward_decoder(&mut self, cache: &MlpCache, upstream: &[f64]) -> Result<Vec<f64>> {
        self.decoder.backward(cache, upstream)
    }

    pub fn backward_encoder(&mut self, pass: &EncoderPass, grad: &PosteriorGrad) -> Result<()> {
        let g_h = self.heads.backward(pass.trunk.output(), &pass.raw, grad)?;
        self.encoder.backward(&pass.trunk, &g_h)?;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.encoder.zero_grad();
        self.heads.zero_grad();
        self.decoder.zero_grad();
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.heads.param_count() + self.decoder.param_count()
    }

    /// `(name, values, grads)` for every parameter tensor in optimizer order.
    pub fn named_tensors(&self) -> Vec<(String, &[f64], &[f64])> {
        fn push_layer<'a>(prefix: String, l: &'a Dense, out: &mut Vec<(String, &'a [f64], &'a [f64])>) {
            out.push((format!("{prefix}.weight"), &l.weight[..], &l.grad_weight[..]));
            out.push((format!("{prefix}.bias"), &l.bias[..], &l.grad_bias[..]));
        }
        let mut out = Vec::new();
        for (k, l) in self.encoder.layers.iter().enumerate() {
            push_layer(format!("encoder.{k}"), l, &mut out);
        }
        for (name, l) in self.heads.named_layers() {
            push_layer(format!("heads.{name}"), l, &mut out);
        }
        for (k, l) in self.decoder.layers.iter().enumerate() {
            push_layer(format!("decoder.{k}"), l, &mut out);
        }
        out
    }

    pub fn params_flat(&self) -> Vec<f64> {
        self.named_tensors().into_iter().flat_map(|(_, v, _)| v.iter().copied()).collect()
    }

    pub fn grads_flat(&self) -> Vec<f64> {
        self.named_tensors().into_iter().flat_map(|(_, _, g)| g.iter().copied()).collect()
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        let total = self.param_count();
        if flat.len() != total {
            return Err(Error::Dimension {
                what: "flat parameter vector",
                expected: total,
                actual: flat.len(),
            });
        }
        let mut offset = 0;
        self.visit_params(&mut |p, _| {
            p.copy_from_slice(&flat[offset..offset + p.len()]);
            offset += p.len();
        });
        Ok(())
    }

    /// Euclidean norm of every tensor, for diagnostics.
    pub fn param_norms(&self) -> Vec<(String, f64)> {
        self.named_tensors()
            .into_iter()
            .map(|(name, v, _)| (name, v.iter().map(|x| x * x).sum::<f64>().sqrt()))
            .collect()
    }
}

impl Trainable for Vae {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &[f64])) {
        self.encoder.visit_params(f);
        self.heads.visit_params(f);
        self.decoder.visit_params(f);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of a single tensor; `step` is the 1-based
/// index of this update.
pub fn adam_update(params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64], step: u64, cfg: &AdamConfig) -> Result<()> {
    for (what, len) in [("adam gradient", grads.len()), ("adam first moment", m.len()), ("adam second moment", v.len())] {
        if len != params.len() {
            return Err(Error::Dimension {
                what,
                expected: params.len(),
                actual: len,
            });
        }
    }
    let t = step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct AdamState {
    config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, shapes: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_model<M: Trainable>(config: AdamConfig, model: &mut M) -> Self {
        Self::new(config, &model.param_shapes())
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step<M: Trainable>(&mut self, model: &mut M) -> Result<()> {
        let shapes = model.param_shapes();
        if shapes.len() != self.first.len() {
            return Err(Error::Dimension {
                what: "adam tensor count",
                expected: self.first.len(),
                actual: shapes.len(),
            });
        }
        if let Some((k, &n)) = shapes.iter().enumerate().find(|(k, n)| self.first[*k].len() != **n) {
            return Err(Error::Dimension {
                what: "adam tensor shape",
                expected: self.first[k].len(),
                actual: n,
            });
        }
        self.step += 1;
        let step = self.step;
        let cfg = self.config;
        let mut k = 0;
        let mut result = Ok(());
        model.visit_params(&mut |p, g| {
            if result.is_ok() {
                result = adam_update(p, g, &mut self.first[k], &mut self.second[k], step, &cfg);
            }
            k += 1;
        });
        result
    }
}
