use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::layer::{BatchNorm, Conv2d, Dense, Layer, Padding, Window};
use super::tensor::{Shape, Tensor};

pub type ParamId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Scale,
    Shift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    /// Running statistics are state, never updated by the optimiser.
    pub fn is_learnable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

/// Which fine-tuning unit a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamGroup {
    Block(usize),
    Head,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub group: ParamGroup,
    /// Fan-in used by He initialisation.
    pub fan_in: usize,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// A layer graph plus the shapes of its parameters, without any storage.
#[derive(Debug, Clone)]
pub struct Architecture {
    pub root: Layer,
    pub params: Vec<ParamSpec>,
    pub input: Shape,
    pub blocks: usize,
}

impl Architecture {
    pub fn learnable_count(&self) -> u64 {
        self.params.iter().filter(|p| p.kind.is_learnable()).map(|p| p.numel() as u64).sum()
    }

    pub fn total_count(&self) -> u64 {
        self.params.iter().map(|p| p.numel() as u64).sum()
    }

    pub fn output_shape(&self) -> Shape {
        self.root.output_shape(self.input)
    }

    pub fn head_params(&self) -> impl Iterator<Item = (ParamId, &ParamSpec)> {
        self.params.iter().enumerate().filter(|(_, p)| p.group == ParamGroup::Head)
    }
}

/// Builds architectures while assigning parameter ids, names and groups.
pub struct ArchBuilder {
    params: Vec<ParamSpec>,
    group: ParamGroup,
    prefix: Vec<String>,
    blocks: usize,
}

impl Default for ArchBuilder {
    fn default() -> Self {
        Self::new()
    }
}

impl ArchBuilder {
    pub fn new() -> Self {
        Self { params: Vec::new(), group: ParamGroup::Block(0), prefix: Vec::new(), blocks: 0 }
    }

    /// Starts a new fine-tuning block; parameters created afterwards belong to it.
    pub fn begin_block(&mut self) {
        self.group = ParamGroup::Block(self.blocks);
        self.blocks += 1;
    }

    pub fn begin_head(&mut self) {
        self.group = ParamGroup::Head;
    }

    pub fn scoped<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        self.prefix.push(name.to_string());
        let out = f(self);
        self.prefix.pop();
        out
    }

    fn param(&mut self, name: &str, shape: Vec<usize>, kind: ParamKind, fan_in: usize) -> ParamId {
        let mut full = self.prefix.join(".");
        if !full.is_empty() {
            full.push('.');
        }
        full.push_str(name);
        debug_assert!(!self.params.iter().any(|p| p.name == full), "duplicate parameter {full}");
        self.params.push(ParamSpec { name: full, shape, kind, group: self.group, fan_in });
        self.params.len() - 1
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: Padding,
        groups: usize,
        bias: bool,
    ) -> Layer {
        assert!(in_channels.is_multiple_of(groups) && out_channels.is_multiple_of(groups), "channels not divisible by groups");
        let fan_in = in_channels / groups * kernel.0 * kernel.1;
        self.scoped(name, |b| {
            let weight = b.param(
                "weight",
                vec![out_channels, in_channels / groups, kernel.0, kernel.1],
                ParamKind::Weight,
                fan_in,
            );
            let bias = bias.then(|| b.param("bias", vec![out_channels], ParamKind::Bias, fan_in));
            Layer::Conv(Conv2d {
                weight,
                bias,
                in_channels,
                out_channels,
                groups,
                window: Window { kh: kernel.0, kw: kernel.1, sh: stride, sw: stride, padding },
            })
        })
    }

    pub fn batch_norm(&mut self, name: &str, channels: usize, scale: bool, eps: f64) -> Layer {
        self.scoped(name, |b| {
            let gamma = scale.then(|| b.param("gamma", vec![channels], ParamKind::Scale, 1));
            let beta = b.param("beta", vec![channels], ParamKind::Shift, 1);
            let mean = b.param("running_mean", vec![channels], ParamKind::RunningMean, 1);
            let var = b.param("running_var", vec![channels], ParamKind::RunningVar, 1);
            Layer::BatchNorm(BatchNorm { gamma, beta, mean, var, channels, eps })
        })
    }

    pub fn dense(&mut self, name: &str, inputs: usize, outputs: usize) -> Layer {
        self.scoped(name, |b| {
            let weight = b.param("weight", vec![outputs, inputs], ParamKind::Weight, inputs);
            let bias = b.param("bias", vec![outputs], ParamKind::Bias, inputs);
            Layer::Dense(Dense { weight, bias, inputs, outputs })
        })
    }

    pub fn finish(self, root: Layer, input: Shape) -> Architecture {
        Architecture { root, params: self.params, input, blocks: self.blocks }
    }
}

/// Per-parameter gradient buffers; only trainable parameters get a slot.
#[derive(Debug, Clone)]
pub struct Gradients {
    slots: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn slot(&self, id: ParamId) -> Option<&[f64]> {
        self.slots[id].as_deref()
    }

    pub(crate) fn slot_mut(&mut self, id: ParamId) -> Option<&mut [f64]> {
        self.slots[id].as_deref_mut()
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            if let (Some(a), Some(b)) = (a, b) {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for s in self.slots.iter_mut().flatten() {
            s.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slots.iter().flatten().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// An architecture with concrete parameter values and trainability flags.
#[derive(Debug, Clone)]
pub struct Network {
    arch: Architecture,
    values: Vec<Vec<f64>>,
    trainable: Vec<bool>,
}

/// Per-sample result of a training pass.
#[derive(Debug, Clone)]
pub struct SampleLoss {
    pub loss: f64,
    pub probabilities: Vec<f64>,
}

impl Network {
    /// He-normal weights, zero biases and shifts, unit scales and variances.
    pub fn initialized(arch: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = arch.params.iter().map(|spec| init_values(spec, &mut rng)).collect();
        let trainable = arch.params.iter().map(|p| p.kind.is_learnable()).collect();
        Self { arch, values, trainable }
    }

    pub fn from_values(arch: Architecture, values: Vec<Vec<f64>>) -> Self {
        assert_eq!(arch.params.len(), values.len(), "parameter count mismatch");
        for (spec, v) in arch.params.iter().zip(&values) {
            assert_eq!(spec.numel(), v.len(), "parameter {} has wrong length", spec.name);
        }
        let trainable = arch.params.iter().map(|p| p.kind.is_learnable()).collect();
        Self { arch, values, trainable }
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.values[id]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id]
    }

    /// Marks learnable parameters trainable when `pred` accepts their group.
    pub fn set_trainable(&mut self, pred: impl Fn(ParamGroup) -> bool) {
        for (flag, spec) in self.trainable.iter_mut().zip(&self.arch.params) {
            *flag = spec.kind.is_learnable() && pred(spec.group);
        }
    }

    pub fn trainable_count(&self) -> u64 {
        self.arch
            .params
            .iter()
            .zip(&self.trainable)
            .filter(|(_, &t)| t)
            .map(|(p, _)| p.numel() as u64)
            .sum()
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            slots: self
                .arch
                .params
                .iter()
                .zip(&self.trainable)
                .map(|(p, &t)| t.then(|| vec![0.0; p.numel()]))
                .collect(),
        }
    }

    /// Raw output logits in inference mode.
    pub fn logits(&self, x: &Tensor) -> Tensor {
        self.arch.root.forward(&self.values, x.clone(), false).0
    }

    pub fn probabilities(&self, x: &Tensor) -> Vec<f64> {
        softmax(self.logits(x).data())
    }

    /// Forward and backward pass for one labelled sample; gradients of the
    /// cross-entropy loss are accumulated into `grads`.
    pub fn accumulate(&self, x: &Tensor, target: usize, grads: &mut Gradients) -> SampleLoss {
        let (logits, cache) = self.arch.root.forward(&self.values, x.clone(), true);
        let probabilities = softmax(logits.data());
        let loss = cross_entropy(logits.data(), target);
        let mut d = probabilities.clone();
        d[target] -= 1.0;
        self.arch.root.backward(&self.values, cache, Tensor::from_vec(logits.shape(), d), grads);
        SampleLoss { loss, probabilities }
    }

    pub fn loss(&self, x: &Tensor, target: usize) -> f64 {
        cross_entropy(self.logits(x).data(), target)
    }
}

fn init_values(spec: &ParamSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = spec.numel();
    match spec.kind {
        ParamKind::Weight => {
            let std = (2.0 / spec.fan_in.max(1) as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("finite std");
            (0..n).map(|_| dist.sample(rng)).collect()
        }
        ParamKind::Scale | ParamKind::RunningVar => vec![1.0; n],
        ParamKind::Bias | ParamKind::Shift | ParamKind::RunningMean => vec![0.0; n],
    }
}

/// Re-draws the given parameters from a dedicated stream.
pub fn reinitialize(net: &mut Network, ids: &[ParamId], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for &id in ids {
        let spec = net.arch.params[id].clone();
        net.values[id] = init_values(&spec, &mut rng);
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[target]
}
