//! Two-stage multimodal policy and the unimodal Gaussian baseline.
//!
//! The multimodal policy maps a state through `f_b` to `N x M` mode logits,
//! samples one class per factor, flattens the one-hot rows (factor 0 first)
//! into a single `N*M` vector and maps that through `f_a` to the mean and
//! log-std of a tanh-squashed Gaussian. `f_a` never sees the state.

use std::collections::BTreeMap;

use rand::Rng as _;
use thiserror::Error;

use crate::distributions::{
    gaussian_head, gumbel_softmax_with_noise, sample_gumbel, sample_standard_normal, squash,
    squashed_gaussian_with_noise, ste_categorical_with_uniforms, DistError, GumbelConfig, ModeSample,
};
use crate::gradcore::{Activation, Backend, Eager, GradError, Matrix};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("{what}: expected width {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("no states given")]
    EmptyStates,
    #[error("mode diagnostics need a multimodal policy")]
    NotMultimodal,
    #[error("invalid layer stack: {0}")]
    Layers(String),
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error(transparent)]
    Grad(#[from] GradError),
}

pub type Result<T> = std::result::Result<T, PolicyError>;

/// Hidden width for full-scale runs.
pub const FULL_SCALE_HIDDEN: usize = 300;
pub const DEFAULT_HIDDEN: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `in x out`.
    pub weight: Matrix,
    /// `1 x out`.
    pub bias: Matrix,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

impl Mlp {
    /// Glorot-uniform weights and zero biases; ELU on hidden layers, linear
    /// output.
    pub fn new(dims: &[usize], rng: &mut Rng) -> Self {
        Self::build(dims, |fan_in, fan_out| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            Matrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-limit..limit))
        })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::build(dims, Matrix::zeros)
    }

    fn build(dims: &[usize], mut weight: impl FnMut(usize, usize) -> Matrix) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Layer {
                weight: weight(w[0], w[1]),
                bias: Matrix::zeros(1, w[1]),
                activation: if i == last { Activation::Linear } else { Activation::Elu },
            })
            .collect();
        Self { layers }
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(PolicyError::Layers("no layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.rows() != 1 || l.bias.cols() != l.weight.cols() {
                return Err(PolicyError::Layers(format!(
                    "layer {i}: bias shape {:?}",
                    l.bias.shape()
                )));
            }
            if i > 0 && layers[i - 1].weight.cols() != l.weight.rows() {
                return Err(PolicyError::Layers(format!("layer {i} does not chain")));
            }
        }
        if layers.last().map(|l| l.activation) != Some(Activation::Linear) {
            return Err(PolicyError::Layers("final activation must be linear".into()));
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.cols()
    }

    /// Zeroes the final layer so the output starts constant at zero.
    pub fn zero_output_layer(&mut self) {
        let last = self.layers.len() - 1;
        let l = &mut self.layers[last];
        l.weight.as_mut_slice().fill(0.0);
        l.bias.as_mut_slice().fill(0.0);
    }

    pub fn hidden_layers(&self) -> usize {
        self.layers.len() - 1
    }

    /// Weight then bias for each layer, in order.
    pub fn params(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// `(prefix.l{i}.weight | prefix.l{i}.bias, tensor)` pairs.
    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Matrix)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("{prefix}.l{i}.weight"), &l.weight),
                    (format!("{prefix}.l{i}.bias"), &l.bias),
                ]
            })
            .collect()
    }

    pub fn bind<B: Backend>(&self, b: &mut B) -> BoundMlp<B::Value> {
        BoundMlp {
            layers: self
                .layers
                .iter()
                .map(|l| (b.param(&l.weight), b.param(&l.bias), l.activation))
                .collect(),
        }
    }

    pub fn forward_eager(&self, x: &Matrix) -> Result<Matrix> {
        let mut e = Eager;
        let bound = self.bind(&mut e);
        bound.forward(&mut e, x)
    }
}

/// An [`Mlp`] whose parameters live on a backend.
#[derive(Debug, Clone)]
pub struct BoundMlp<V> {
    layers: Vec<(V, V, Activation)>,
}

impl<V: Clone> BoundMlp<V> {
    pub fn forward<B: Backend<Value = V>>(&self, b: &mut B, x: &V) -> Result<V> {
        let expected = b.value(&self.layers[0].0).rows();
        let got = b.value(x).cols();
        if expected != got {
            return Err(PolicyError::Dimension {
                what: "mlp input",
                expected,
                got,
            });
        }
        let mut h = x.clone();
        for (w, bias, act) in &self.layers {
            let lin = b.matmul(&h, w)?;
            let pre = b.add_bias(&lin, bias)?;
            h = b.activate(&pre, *act);
        }
        Ok(h)
    }

    /// Parameter handles in [`Mlp::params`] order.
    pub fn vars(&self) -> Vec<V> {
        self.layers
            .iter()
            .flat_map(|(w, b, _)| [w.clone(), b.clone()])
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeMethod {
    Ste,
    Gumbel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolicyDims {
    pub state_dim: usize,
    pub action_dim: usize,
    pub hidden: usize,
    pub n_factors: usize,
    pub n_classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalPolicy {
    /// state -> h -> h -> N*M logits.
    pub f_b: Mlp,
    /// N*M mode vector -> h -> h -> 2k (mean, log-std).
    pub f_a: Mlp,
    pub n_factors: usize,
    pub n_classes: usize,
    pub action_dim: usize,
    pub gumbel: GumbelConfig,
    pub method: ModeMethod,
}

impl MultimodalPolicy {
    pub fn new(dims: PolicyDims, method: ModeMethod, gumbel: GumbelConfig, rng: &mut Rng) -> Self {
        let modes = dims.n_factors * dims.n_classes;
        let h = dims.hidden;
        let f_b = Mlp::new(&[dims.state_dim, h, h, modes], rng);
        Self {
            f_b,
            f_a: Mlp::new(&[modes, h, h, 2 * dims.action_dim], rng),
            n_factors: dims.n_factors,
            n_classes: dims.n_classes,
            action_dim: dims.action_dim,
            gumbel,
            method,
        }
    }

    pub fn mode_width(&self) -> usize {
        self.n_factors * self.n_classes
    }

    pub fn n_modes(&self) -> u128 {
        (self.n_classes as u128).pow(self.n_factors as u32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnimodalPolicy {
    /// state -> h -> h -> h -> 2k.
    pub f: Mlp,
    pub action_dim: usize,
}

impl UnimodalPolicy {
    pub fn new(state_dim: usize, action_dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            f: Mlp::new(&[state_dim, hidden, hidden, hidden, 2 * action_dim], rng),
            action_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    Multimodal(MultimodalPolicy),
    Unimodal(UnimodalPolicy),
}

#[derive(Debug, Clone)]
pub enum BoundPolicy<V> {
    Multimodal { f_b: BoundMlp<V>, f_a: BoundMlp<V> },
    Unimodal { f: BoundMlp<V> },
}

impl<V: Clone> BoundPolicy<V> {
    pub fn vars(&self) -> Vec<V> {
        match self {
            BoundPolicy::Multimodal { f_b, f_a } => {
                let mut v = f_b.vars();
                v.extend(f_a.vars());
                v
            }
            BoundPolicy::Unimodal { f } => f.vars(),
        }
    }
}

/// Noise consumed by one stochastic action.
#[derive(Debug, Clone)]
pub enum ModeNoise {
    /// Gumbel draws, `(B*N) x M`.
    Gumbel(Matrix),
    /// One uniform per categorical row, `B*N` values.
    Uniform(Vec<f64>),
    None,
}

#[derive(Debug, Clone)]
pub struct ActNoise {
    pub mode: ModeNoise,
    /// Standard normal draws, `B x k`.
    pub action: Matrix,
}

/// Independent generators for mode noise and action noise.
#[derive(Debug, Clone)]
pub struct NoiseStreams {
    pub mode: Rng,
    pub action: Rng,
}

impl NoiseStreams {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            mode: crate::rng::stream(seed, crate::rng::GUMBEL),
            action: crate::rng::stream(seed, crate::rng::POLICY_NOISE),
        }
    }
}

/// Supplies the noise for each stochastic action.
pub trait NoiseSource {
    fn draw(&mut self, policy: &Policy, batch: usize) -> ActNoise;
}

impl NoiseSource for NoiseStreams {
    fn draw(&mut self, policy: &Policy, batch: usize) -> ActNoise {
        policy.draw_noise(batch, self)
    }
}

impl<F: FnMut(&Policy, usize) -> ActNoise> NoiseSource for F {
    fn draw(&mut self, policy: &Policy, batch: usize) -> ActNoise {
        self(policy, batch)
    }
}

#[derive(Debug, Clone)]
pub struct ActionSample<V> {
    /// `B x k`, strictly inside (-1, 1).
    pub action: V,
    pub pre_tanh: V,
    pub mean: V,
    pub log_std: V,
    pub mode: Option<ModeSample<V>>,
    /// Mixed-radix mode index per batch row; empty for the unimodal policy.
    pub mode_index: Vec<usize>,
}

/// Deterministic (evaluation-time) action for a batch of states.
#[derive(Debug, Clone, PartialEq)]
pub struct GreedyAction {
    pub action: Matrix,
    pub mode_index: Vec<usize>,
}

/// Mixed-radix index of per-factor classes, factor 0 most significant.
pub fn encode_mode(classes: &[usize], n_classes: usize) -> usize {
    classes.iter().fold(0, |acc, &c| acc * n_classes + c)
}

pub fn decode_mode(mut index: usize, n_factors: usize, n_classes: usize) -> Vec<usize> {
    let mut out = vec![0; n_factors];
    for slot in out.iter_mut().rev() {
        *slot = index % n_classes;
        index /= n_classes;
    }
    out
}

impl Policy {
    pub fn multimodal(dims: PolicyDims, method: ModeMethod, gumbel: GumbelConfig, rng: &mut Rng) -> Self {
        Policy::Multimodal(MultimodalPolicy::new(dims, method, gumbel, rng))
    }

    pub fn unimodal(state_dim: usize, action_dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        Policy::Unimodal(UnimodalPolicy::new(state_dim, action_dim, hidden, rng))
    }

    pub fn state_dim(&self) -> usize {
        match self {
            Policy::Multimodal(p) => p.f_b.input_dim(),
            Policy::Unimodal(p) => p.f.input_dim(),
        }
    }

    pub fn action_dim(&self) -> usize {
        match self {
            Policy::Multimodal(p) => p.action_dim,
            Policy::Unimodal(p) => p.action_dim,
        }
    }

    pub fn is_multimodal(&self) -> bool {
        matches!(self, Policy::Multimodal(_))
    }

    pub fn params(&self) -> Vec<&Matrix> {
        match self {
            Policy::Multimodal(p) => {
                let mut v = p.f_b.params();
                v.extend(p.f_a.params());
                v
            }
            Policy::Unimodal(p) => p.f.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            Policy::Multimodal(p) => {
                let mut v = p.f_b.params_mut();
                v.extend(p.f_a.params_mut());
                v
            }
            Policy::Unimodal(p) => p.f.params_mut(),
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Matrix)> {
        match self {
            Policy::Multimodal(p) => {
                let mut v = p.f_b.named_params("f_b");
                v.extend(p.f_a.named_params("f_a"));
                v
            }
            Policy::Unimodal(p) => p.f.named_params("f"),
        }
    }

    pub fn bind<B: Backend>(&self, b: &mut B) -> BoundPolicy<B::Value> {
        match self {
            Policy::Multimodal(p) => BoundPolicy::Multimodal {
                f_b: p.f_b.bind(b),
                f_a: p.f_a.bind(b),
            },
            Policy::Unimodal(p) => BoundPolicy::Unimodal { f: p.f.bind(b) },
        }
    }

    /// Draws the noise one stochastic action over `batch` states consumes.
    pub fn draw_noise(&self, batch: usize, streams: &mut NoiseStreams) -> ActNoise {
        let mode = match self {
            Policy::Multimodal(p) => {
                let rows = batch * p.n_factors;
                match p.method {
                    ModeMethod::Gumbel => ModeNoise::Gumbel(sample_gumbel(rows, p.n_classes, &mut streams.mode)),
                    ModeMethod::Ste => ModeNoise::Uniform((0..rows).map(|_| streams.mode.random::<f64>()).collect()),
                }
            }
            Policy::Unimodal(_) => ModeNoise::None,
        };
        let action = sample_standard_normal(batch, self.action_dim(), &mut streams.action);
        ActNoise { mode, action }
    }

    /// `(B*N) x M` mode logits for a `B x state_dim` batch.
    pub fn mode_logits<B: Backend>(
        &self,
        b: &mut B,
        bound: &BoundPolicy<B::Value>,
        state: &B::Value,
    ) -> Result<B::Value> {
        let (Policy::Multimodal(p), BoundPolicy::Multimodal { f_b, .. }) = (self, bound) else {
            return Err(PolicyError::NotMultimodal);
        };
        let flat = f_b.forward(b, state)?;
        let rows = b.value(&flat).rows();
        Ok(b.reshape(&flat, rows * p.n_factors, p.n_classes)?)
    }

    /// Stochastic action with freshly drawn noise.
    pub fn act<B: Backend>(
        &self,
        b: &mut B,
        bound: &BoundPolicy<B::Value>,
        state: &B::Value,
        noise: &mut impl NoiseSource,
    ) -> Result<ActionSample<B::Value>> {
        let batch = b.value(state).rows();
        let noise = noise.draw(self, batch);
        self.act_with_noise(b, bound, state, &noise)
    }

    pub fn act_with_noise<B: Backend>(
        &self,
        b: &mut B,
        bound: &BoundPolicy<B::Value>,
        state: &B::Value,
        noise: &ActNoise,
    ) -> Result<ActionSample<B::Value>> {
        let batch = b.value(state).rows();
        match (self, bound) {
            (Policy::Multimodal(p), BoundPolicy::Multimodal { f_a, .. }) => {
                let logits = self.mode_logits(b, bound, state)?;
                let mode = match (&p.method, &noise.mode) {
                    (ModeMethod::Ste, ModeNoise::Uniform(u)) => ste_categorical_with_uniforms(b, &logits, u)?,
                    (ModeMethod::Gumbel, ModeNoise::Gumbel(g)) => {
                        gumbel_softmax_with_noise(b, &logits, &p.gumbel, g.clone())?
                    }
                    _ => {
                        return Err(DistError::NoiseShape {
                            expected: batch * p.n_factors,
                            got: 0,
                        }
                        .into())
                    }
                };
                let flat = b.reshape(&mode.z, batch, p.mode_width())?;
                let head = f_a.forward(b, &flat)?;
                let mode_index = mode
                    .indices
                    .chunks(p.n_factors)
                    .map(|c| encode_mode(c, p.n_classes))
                    .collect();
                let dist = gaussian_head(b, &head, p.action_dim)?;
                let s = squashed_gaussian_with_noise(b, &dist, noise.action.clone())?;
                Ok(ActionSample {
                    action: s.action,
                    pre_tanh: s.pre_tanh,
                    mean: dist.mean,
                    log_std: dist.log_std,
                    mode: Some(mode),
                    mode_index,
                })
            }
            (Policy::Unimodal(p), BoundPolicy::Unimodal { f }) => {
                let head = f.forward(b, state)?;
                let dist = gaussian_head(b, &head, p.action_dim)?;
                let s = squashed_gaussian_with_noise(b, &dist, noise.action.clone())?;
                Ok(ActionSample {
                    action: s.action,
                    pre_tanh: s.pre_tanh,
                    mean: dist.mean,
                    log_std: dist.log_std,
                    mode: None,
                    mode_index: Vec::new(),
                })
            }
            _ => Err(PolicyError::Layers("bound parameters do not match policy".into())),
        }
    }

    /// Noise-free action: per-factor argmax mode, then `tanh(mean)`.
    pub fn act_deterministic(&self, states: &Matrix) -> Result<GreedyAction> {
        let mut e = Eager;
        let bound = self.bind(&mut e);
        match (self, &bound) {
            (Policy::Multimodal(p), BoundPolicy::Multimodal { f_a, .. }) => {
                let logits = self.mode_logits(&mut e, &bound, states)?;
                let probs = e.softmax_rows(&logits);
                let classes = probs.argmax_rows();
                let one_hot = Matrix::one_hot(&classes, p.n_classes);
                let flat = e.reshape(&one_hot, states.rows(), p.mode_width())?;
                let head = f_a.forward(&mut e, &flat)?;
                let dist = gaussian_head(&mut e, &head, p.action_dim)?;
                Ok(GreedyAction {
                    action: squash(&mut e, &dist.mean),
                    mode_index: classes
                        .chunks(p.n_factors)
                        .map(|c| encode_mode(c, p.n_classes))
                        .collect(),
                })
            }
            (Policy::Unimodal(p), BoundPolicy::Unimodal { f }) => {
                let head = f.forward(&mut e, states)?;
                let dist = gaussian_head(&mut e, &head, p.action_dim)?;
                Ok(GreedyAction {
                    action: squash(&mut e, &dist.mean),
                    mode_index: Vec::new(),
                })
            }
            _ => unreachable!("bound from self"),
        }
    }

    /// Action for given mode indices, bypassing mode sampling. With `eps`
    /// the action is sampled, otherwise it is `tanh(mean)`.
    pub fn act_for_modes(&self, mode_index: &[usize], eps: Option<&Matrix>) -> Result<Matrix> {
        let Policy::Multimodal(p) = self else {
            return Err(PolicyError::NotMultimodal);
        };
        let mut e = Eager;
        let rows = mode_index.len();
        let classes: Vec<usize> = mode_index
            .iter()
            .flat_map(|&i| decode_mode(i, p.n_factors, p.n_classes))
            .collect();
        let one_hot = Matrix::one_hot(&classes, p.n_classes);
        let flat = e.reshape(&one_hot, rows, p.mode_width())?;
        let head = p.f_a.forward_eager(&flat)?;
        let dist = gaussian_head(&mut e, &head, p.action_dim)?;
        Ok(match eps {
            Some(eps) => squashed_gaussian_with_noise(&mut e, &dist, eps.clone())?.action,
            None => squash(&mut e, &dist.mean),
        })
    }

    /// Counts of greedy mode indices over `states`.
    pub fn mode_usage_histogram(&self, states: &Matrix) -> Result<ModeUsage> {
        if states.rows() == 0 {
            return Err(PolicyError::EmptyStates);
        }
        if !self.is_multimodal() {
            return Err(PolicyError::NotMultimodal);
        }
        let greedy = self.act_deterministic(states)?;
        let mut usage = ModeUsage::default();
        usage.extend(&greedy.mode_index);
        Ok(usage)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ModeUsage {
    pub counts: BTreeMap<usize, usize>,
}

impl ModeUsage {
    pub fn extend(&mut self, indices: &[usize]) {
        for &i in indices {
            *self.counts.entry(i).or_default() += 1;
        }
    }

    pub fn distinct(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }
}

#[cfg(test)]
mod tests;
