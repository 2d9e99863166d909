//! Parameter storage, forward contexts and the layer primitives.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::graph::{BatchStats, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Learnable parameters plus non-learnable buffers (batch-norm running statistics).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S> {
    params: BTreeMap<String, Tensor<S>>,
    buffers: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new(), buffers: BTreeMap::new() }
    }

    pub fn insert_param(&mut self, name: impl Into<String>, value: Tensor<S>) {
        self.params.insert(name.into(), value);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor<S>) {
        self.buffers.insert(name.into(), value);
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<S>> {
        self.params.get(name).ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<S>> {
        self.buffers.get(name).ok_or_else(|| Error::Contract(format!("unknown buffer {name}")))
    }

    pub fn set_param(&mut self, name: &str, value: Tensor<S>) -> Result<()> {
        match self.params.get_mut(name) {
            Some(slot) if slot.shape() == value.shape() => {
                *slot = value;
                Ok(())
            }
            Some(slot) => Err(shape_err("set_param", format!("{name}: {:?} vs {:?}", slot.shape(), value.shape()))),
            None => Err(Error::Contract(format!("unknown parameter {name}"))),
        }
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<S>> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor<S>> {
        &self.buffers
    }

    /// Number of learnable scalars, optionally restricted to a name prefix.
    pub fn count(&self, prefix: &str) -> usize {
        self.params.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, t)| t.len()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Applies recorded batch statistics to the running state of each batch-norm layer.
    pub fn apply_batch_stats(&mut self, stats: &[(String, BatchStats<S>)], momentum: S) -> Result<()> {
        for (prefix, batch) in stats {
            let mut state = BatchNormState::from_store(self, prefix, momentum)?;
            state.update(batch);
            self.buffers.insert(format!("{prefix}.running_mean"), Tensor::new(&[state.running_mean.len()], state.running_mean)?);
            self.buffers.insert(format!("{prefix}.running_var"), Tensor::new(&[state.running_var.len()], state.running_var)?);
        }
        Ok(())
    }
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<S> {
    pub running_mean: Vec<S>,
    pub running_var: Vec<S>,
    pub momentum: S,
    pub epsilon: S,
}

impl<S: Scalar> BatchNormState<S> {
    pub fn new(channels: usize, momentum: S, epsilon: S) -> Self {
        Self { running_mean: vec![S::zero(); channels], running_var: vec![S::one(); channels], momentum, epsilon }
    }

    fn from_store(store: &ParamStore<S>, prefix: &str, momentum: S) -> Result<Self> {
        Ok(Self {
            running_mean: store.buffer(&format!("{prefix}.running_mean"))?.to_vec(),
            running_var: store.buffer(&format!("{prefix}.running_var"))?.to_vec(),
            momentum,
            epsilon: S::of(BN_EPS),
        })
    }

    /// `running <- (1 - momentum) * running + momentum * batch`.
    pub fn update(&mut self, batch: &BatchStats<S>) {
        let keep = S::one() - self.momentum;
        for (r, &b) in self.running_mean.iter_mut().zip(&batch.mean) {
            *r = keep * *r + self.momentum * b;
        }
        let floor = S::min_positive_value();
        for (r, &b) in self.running_var.iter_mut().zip(&batch.var) {
            *r = (keep * *r + self.momentum * b).max(floor);
        }
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;

/// Pre-affine batch normalization over the last axis of `x`. Training mode
/// normalizes with batch statistics and updates `state`; evaluation mode uses
/// the running statistics.
pub fn batch_norm<S: Scalar>(graph: &mut Graph<S>, x: Var, state: &mut BatchNormState<S>, training: bool) -> Result<Var> {
    let shape = graph.shape(x).to_vec();
    let channels = *shape.last().expect("rank >= 1");
    if channels != state.running_mean.len() {
        return Err(shape_err("batch_norm", format!("{channels} channels, state has {}", state.running_mean.len())));
    }
    if training {
        let rows = graph.value(x).len() / channels;
        let flat = graph.reshape(x, &[rows, channels])?;
        let (y, stats) = graph.batch_norm_train(flat, state.epsilon)?;
        state.update(&stats);
        graph.reshape(y, &shape)
    } else {
        let (scale, shift) = eval_affine(&state.running_mean, &state.running_var, state.epsilon);
        let scale = graph.constant(Tensor::new(&[channels], scale)?)?;
        let shift = graph.constant(Tensor::new(&[channels], shift)?)?;
        let y = graph.mul_suffix(x, scale)?;
        graph.add_suffix(y, shift)
    }
}

fn eval_affine<S: Scalar>(mean: &[S], var: &[S], eps: S) -> (Vec<S>, Vec<S>) {
    let scale: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
    let shift = mean.iter().zip(&scale).map(|(&m, &s)| -m * s).collect();
    (scale, shift)
}

/// One forward pass: the graph, lazily bound parameters, and per-pass randomness.
pub struct Forward<'p, S> {
    pub graph: Graph<S>,
    store: &'p ParamStore<S>,
    bound: HashMap<String, Var>,
    training: bool,
    rng: ChaCha8Rng,
    batch_stats: Vec<(String, BatchStats<S>)>,
}

impl<'p, S: Scalar> Forward<'p, S> {
    pub fn new(store: &'p ParamStore<S>, training: bool, rng: ChaCha8Rng) -> Self {
        Self { graph: Graph::new(), store, bound: HashMap::new(), training, rng, batch_stats: Vec::new() }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let v = self.graph.param(name, self.store.param(name)?.clone())?;
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Result<Var> {
        self.graph.constant(value)
    }

    pub fn batch_stats(&self) -> &[(String, BatchStats<S>)] {
        &self.batch_stats
    }

    pub fn into_parts(self) -> (Graph<S>, Vec<(String, BatchStats<S>)>) {
        (self.graph, self.batch_stats)
    }
}

/// Samples Kaiming-uniform weights with zero biases.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Self { rng }
    }

    pub fn kaiming_uniform<S: Scalar>(&mut self, fan_in: usize, fan_out: usize) -> Tensor<S> {
        let bound = (6.0 / fan_in as f64).sqrt();
        let rng = &mut self.rng;
        Tensor::from_fn(&[fan_in, fan_out], |_| S::of(rng.random_range(-bound..bound)))
    }
}

/// Fully connected layer `y = x W + b` with `W: [input, output]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn register<S: Scalar>(
        store: &mut ParamStore<S>,
        init: &mut Initializer,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
    ) -> Self {
        let weight = format!("{name}.weight");
        store.insert_param(&weight, init.kaiming_uniform(input, output));
        let bias = bias.then(|| {
            let b = format!("{name}.bias");
            store.insert_param(&b, Tensor::zeros(&[output]));
            b
        });
        Self { weight, bias, input, output }
    }

    /// Applies the map to the last axis of `x`.
    pub fn forward<S: Scalar>(&self, cx: &mut Forward<'_, S>, x: Var) -> Result<Var> {
        let shape = cx.graph.shape(x).to_vec();
        if shape.last() != Some(&self.input) {
            return Err(shape_err("linear", format!("{} expects width {}, got {shape:?}", self.weight, self.input)));
        }
        let rows = cx.graph.value(x).len() / self.input;
        let w = cx.param(&self.weight)?;
        let flat = cx.graph.reshape(x, &[rows, self.input])?;
        let mut y = cx.graph.matmul(flat, w)?;
        if let Some(b) = &self.bias {
            let b = cx.param(b)?;
            y = cx.graph.add_suffix(y, b)?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().expect("rank >= 1") = self.output;
        cx.graph.reshape(y, &out_shape)
    }

    pub fn num_params(&self) -> usize {
        self.input * self.output + if self.bias.is_some() { self.output } else { 0 }
    }

    pub fn macs(&self) -> usize {
        self.input * self.output
    }
}

/// Batch normalization with learned scale and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
}

impl BatchNorm {
    pub fn register<S: Scalar>(store: &mut ParamStore<S>, name: &str, channels: usize) -> Self {
        store.insert_param(format!("{name}.gamma"), Tensor::full(&[channels], S::one()));
        store.insert_param(format!("{name}.beta"), Tensor::zeros(&[channels]));
        store.insert_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels]));
        store.insert_buffer(format!("{name}.running_var"), Tensor::full(&[channels], S::one()));
        Self { name: name.to_string(), channels }
    }

    pub fn forward<S: Scalar>(&self, cx: &mut Forward<'_, S>, x: Var) -> Result<Var> {
        let normalized = if cx.training {
            let shape = cx.graph.shape(x).to_vec();
            let rows = cx.graph.value(x).len() / self.channels;
            let flat = cx.graph.reshape(x, &[rows, self.channels])?;
            let (y, stats) = cx.graph.batch_norm_train(flat, S::of(BN_EPS))?;
            cx.batch_stats.push((self.name.clone(), stats));
            cx.graph.reshape(y, &shape)?
        } else {
            let mut state = BatchNormState::from_store(cx.store, &self.name, S::zero())?;
            batch_norm(&mut cx.graph, x, &mut state, false)?
        };
        let gamma = cx.param(&format!("{}.gamma", self.name))?;
        let beta = cx.param(&format!("{}.beta", self.name))?;
        let y = cx.graph.mul_suffix(normalized, gamma)?;
        cx.graph.add_suffix(y, beta)
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels
    }
}

/// Layer normalization over the last axis with learned scale and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub name: String,
    pub width: usize,
}

impl LayerNorm {
    pub fn register<S: Scalar>(store: &mut ParamStore<S>, name: &str, width: usize) -> Self {
        store.insert_param(format!("{name}.gamma"), Tensor::full(&[width], S::one()));
        store.insert_param(format!("{name}.beta"), Tensor::zeros(&[width]));
        Self { name: name.to_string(), width }
    }

    pub fn forward<S: Scalar>(&self, cx: &mut Forward<'_, S>, x: Var) -> Result<Var> {
        let y = cx.graph.layer_norm(x, S::of(LN_EPS))?;
        let gamma = cx.param(&format!("{}.gamma", self.name))?;
        let beta = cx.param(&format!("{}.beta", self.name))?;
        let y = cx.graph.mul_suffix(y, gamma)?;
        cx.graph.add_suffix(y, beta)
    }

    pub fn num_params(&self) -> usize {
        2 * self.width
    }
}

/// Inverted dropout: identity at evaluation, scale survivors by `1 / (1 - p)` in training.
pub fn dropout<S: Scalar>(cx: &mut Forward<'_, S>, x: Var, p: f64) -> Result<Var> {
    if !cx.training || p <= 0.0 {
        return Ok(x);
    }
    if p >= 1.0 {
        return Err(Error::Contract(format!("dropout rate {p} must be below 1")));
    }
    let n = cx.graph.value(x).len();
    let keep = S::of(1.0 / (1.0 - p));
    let mask: Vec<S> = (0..n).map(|_| if cx.rng.random::<f64>() < p { S::zero() } else { keep }).collect();
    cx.graph.mul_const(x, mask)
}
