//! Dense feed-forward networks trained with MSE.
//!
//! Parameters live in one flat buffer laid out as every weight matrix
//! (row-major, `fan_out x fan_in`) in layer order, followed by every bias
//! vector in layer order. The checkpoint sidecar uses the same layout, and
//! the optimizers treat the buffer as a plain slice.

use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NfqError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Linear,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Activation::Linear => z,
        }
    }

    /// Derivative expressed through the activation output `a = f(z)`.
    #[inline]
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Linear => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub width: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub const fn new(width: usize, activation: Activation) -> Self {
        LayerSpec { width, activation }
    }
}

/// Weight initialization scheme.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightInit {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Glorot,
    /// Uniform in `±bound` regardless of layer size (the old NFQ default uses 0.5).
    Uniform { bound: f64 },
}

/// Largest magnitude a Glorot-uniform weight may take for the given fan sizes.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    input_dim: usize,
    layers: Vec<LayerSpec>,
    params: Vec<f64>,
    weight_offsets: Vec<usize>,
    bias_offsets: Vec<usize>,
}

fn layout(input_dim: usize, layers: &[LayerSpec]) -> (Vec<usize>, Vec<usize>, usize) {
    let mut weight_offsets = Vec::with_capacity(layers.len());
    let mut offset = 0;
    let mut fan_in = input_dim;
    for layer in layers {
        weight_offsets.push(offset);
        offset += layer.width * fan_in;
        fan_in = layer.width;
    }
    let mut bias_offsets = Vec::with_capacity(layers.len());
    for layer in layers {
        bias_offsets.push(offset);
        offset += layer.width;
    }
    (weight_offsets, bias_offsets, offset)
}

fn validate_layers(input_dim: usize, layers: &[LayerSpec]) -> Result<()> {
    if layers.is_empty() {
        return Err(NfqError::config("network needs at least one layer"));
    }
    if input_dim == 0 {
        return Err(NfqError::config("network input dimension must be positive"));
    }
    if let Some(i) = layers.iter().position(|l| l.width == 0) {
        return Err(NfqError::config(format!("layer {i} has zero width")));
    }
    Ok(())
}

/// `c = alpha * a * b + beta * c` for row/column strided operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
    c_strides: (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let extent = |rows: usize, cols: usize, (rs, cs): (usize, usize)| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.len() >= extent(m, k, a_strides));
    assert!(b.len() >= extent(k, n, b_strides));
    assert!(c.len() >= extent(m, n, c_strides));
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            c_strides.0 as isize,
            c_strides.1 as isize,
        );
    }
}

/// Supervised targets for one batch.
#[derive(Clone, Copy, Debug)]
pub enum Targets<'a> {
    /// One row of `output_dim` values per sample.
    Dense(&'a [f64]),
    /// One value per sample, applied to the given output neuron only.
    Head { heads: &'a [usize], values: &'a [f64] },
}

/// Summary of the network outputs that entered a loss computation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OutputStats {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

impl Network {
    pub fn init(input_dim: usize, layers: &[LayerSpec], init: WeightInit, seed: u64) -> Result<Self> {
        validate_layers(input_dim, layers)?;
        let (weight_offsets, bias_offsets, total) = layout(input_dim, layers);
        let mut params = vec![0.0; total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fan_in = input_dim;
        for (layer, &offset) in layers.iter().zip(&weight_offsets) {
            let bound = match init {
                WeightInit::Glorot => glorot_bound(fan_in, layer.width),
                WeightInit::Uniform { bound } => bound,
            };
            let dist = Uniform::new_inclusive(-bound, bound);
            for w in &mut params[offset..offset + layer.width * fan_in] {
                *w = dist.sample(&mut rng);
            }
            fan_in = layer.width;
        }
        Ok(Network { input_dim, layers: layers.to_vec(), params, weight_offsets, bias_offsets })
    }

    /// Builds a network from an explicit flat parameter buffer.
    pub fn from_params(input_dim: usize, layers: &[LayerSpec], params: Vec<f64>) -> Result<Self> {
        validate_layers(input_dim, layers)?;
        let (weight_offsets, bias_offsets, total) = layout(input_dim, layers);
        if params.len() != total {
            return Err(NfqError::shape(format!(
                "parameter buffer has {} values, layers need {total}",
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(NfqError::input("non-finite network parameter"));
        }
        Ok(Network { input_dim, layers: layers.to_vec(), params, weight_offsets, bias_offsets })
    }

    pub fn zeros(input_dim: usize, layers: &[LayerSpec]) -> Result<Self> {
        let (_, _, total) = layout(input_dim, layers);
        Self::from_params(input_dim, layers, vec![0.0; total])
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.width).unwrap_or(0)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn fan_in(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_dim
        } else {
            self.layers[layer - 1].width
        }
    }

    /// Weight matrix of `layer`, row-major `fan_out x fan_in`.
    pub fn weights(&self, layer: usize) -> &[f64] {
        let off = self.weight_offsets[layer];
        &self.params[off..off + self.layers[layer].width * self.fan_in(layer)]
    }

    pub fn biases(&self, layer: usize) -> &[f64] {
        let off = self.bias_offsets[layer];
        &self.params[off..off + self.layers[layer].width]
    }

    fn check_input(&self, inputs: &[f64]) -> Result<usize> {
        if !inputs.len().is_multiple_of(self.input_dim) {
            return Err(NfqError::shape(format!(
                "input buffer of {} values is not a multiple of input dimension {}",
                inputs.len(),
                self.input_dim
            )));
        }
        Ok(inputs.len() / self.input_dim)
    }

    /// Activations of every layer for a row-major batch.
    fn forward_all(&self, inputs: &[f64], rows: usize) -> Vec<Vec<f64>> {
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let fan_in = self.fan_in(i);
            let width = layer.width;
            let prev: &[f64] = if i == 0 { inputs } else { &acts[i - 1] };
            let bias = self.biases(i);
            let mut out = Vec::with_capacity(rows * width);
            for _ in 0..rows {
                out.extend_from_slice(bias);
            }
            gemm(rows, fan_in, width, 1.0, prev, (fan_in, 1), self.weights(i), (1, fan_in), 1.0, &mut out, (width, 1));
            let act = layer.activation;
            if act != Activation::Linear {
                for v in &mut out {
                    *v = act.apply(*v);
                }
            }
            acts.push(out);
        }
        acts
    }

    /// Evaluates a row-major batch; returns `rows x output_dim` values.
    pub fn forward(&self, inputs: &[f64]) -> Result<Vec<f64>> {
        let rows = self.check_input(inputs)?;
        Ok(self.forward_all(inputs, rows).pop().unwrap_or_default())
    }

    /// Mean-squared-error loss and its gradient with respect to all parameters.
    pub fn backward_mse(&self, inputs: &[f64], targets: Targets<'_>) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; self.params.len()];
        let (loss, _) = self.loss_and_grad(inputs, targets, &mut grad)?;
        Ok((loss, grad))
    }

    /// Writes the loss gradient into `grad` (overwriting it).
    pub fn loss_and_grad(&self, inputs: &[f64], targets: Targets<'_>, grad: &mut [f64]) -> Result<(f64, OutputStats)> {
        let rows = self.check_input(inputs)?;
        if grad.len() != self.params.len() {
            return Err(NfqError::shape("gradient buffer does not match parameter count"));
        }
        if rows == 0 {
            return Err(NfqError::input("empty batch"));
        }
        let out_dim = self.output_dim();
        match targets {
            Targets::Dense(t) => {
                if t.len() != rows * out_dim {
                    return Err(NfqError::shape(format!(
                        "targets hold {} values, expected {} x {out_dim}",
                        t.len(),
                        rows
                    )));
                }
            }
            Targets::Head { heads, values } => {
                if heads.len() != rows || values.len() != rows {
                    return Err(NfqError::shape("head targets must have one entry per sample"));
                }
                if heads.iter().any(|&h| h >= out_dim) {
                    return Err(NfqError::shape("head index beyond output dimension"));
                }
            }
        }

        let acts = self.forward_all(inputs, rows);
        let output = acts.last().expect("at least one layer");
        let last = self.layers.len() - 1;
        let out_act = self.layers[last].activation;

        let mut delta = vec![0.0; rows * out_dim];
        let mut loss = 0.0;
        let (mut lo, mut hi, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
        let mut track = |y: f64| {
            lo = lo.min(y);
            hi = hi.max(y);
            sum += y;
        };
        let count;
        match targets {
            Targets::Dense(t) => {
                count = (rows * out_dim) as f64;
                for ((d, &y), &target) in delta.iter_mut().zip(output).zip(t) {
                    let r = y - target;
                    loss += r * r;
                    *d = 2.0 * r / count * out_act.derivative_from_output(y);
                    track(y);
                }
            }
            Targets::Head { heads, values } => {
                count = rows as f64;
                for (row, (&h, &target)) in heads.iter().zip(values).enumerate() {
                    let idx = row * out_dim + h;
                    let y = output[idx];
                    let r = y - target;
                    loss += r * r;
                    delta[idx] = 2.0 * r / count * out_act.derivative_from_output(y);
                    track(y);
                }
            }
        }
        loss /= count;
        let stats = OutputStats { min: lo, mean: sum / count, max: hi };

        for layer in (0..self.layers.len()).rev() {
            let fan_in = self.fan_in(layer);
            let width = self.layers[layer].width;
            let prev: &[f64] = if layer == 0 { inputs } else { &acts[layer - 1] };
            let w_off = self.weight_offsets[layer];
            let b_off = self.bias_offsets[layer];
            // dW = delta^T * prev
            gemm(
                width,
                rows,
                fan_in,
                1.0,
                &delta,
                (1, width),
                prev,
                (fan_in, 1),
                0.0,
                &mut grad[w_off..w_off + width * fan_in],
                (fan_in, 1),
            );
            let gb = &mut grad[b_off..b_off + width];
            gb.iter_mut().for_each(|g| *g = 0.0);
            for row in delta.chunks_exact(width) {
                for (g, d) in gb.iter_mut().zip(row) {
                    *g += d;
                }
            }
            if layer > 0 {
                let mut next = vec![0.0; rows * fan_in];
                gemm(rows, width, fan_in, 1.0, &delta, (width, 1), self.weights(layer), (fan_in, 1), 0.0, &mut next, (fan_in, 1));
                let act = self.layers[layer - 1].activation;
                for (d, &a) in next.iter_mut().zip(prev) {
                    *d *= act.derivative_from_output(a);
                }
                delta = next;
            }
        }
        Ok((loss, stats))
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Rprop⁻ constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RpropParams {
    pub eta_plus: f64,
    pub eta_minus: f64,
    pub delta0: f64,
    pub delta_min: f64,
    pub delta_max: f64,
}

impl Default for RpropParams {
    fn default() -> Self {
        RpropParams { eta_plus: 1.2, eta_minus: 0.5, delta0: 0.1, delta_min: 1e-6, delta_max: 50.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Rprop,
}

#[derive(Clone, Debug, PartialEq)]
pub enum OptimizerState {
    Adam { learning_rate: f64, step: u64, first: Vec<f64>, second: Vec<f64> },
    Rprop { params: RpropParams, step: u64, step_sizes: Vec<f64>, prev_grad: Vec<f64> },
}

impl OptimizerState {
    pub fn adam(param_count: usize, learning_rate: f64) -> Self {
        OptimizerState::Adam { learning_rate, step: 0, first: vec![0.0; param_count], second: vec![0.0; param_count] }
    }

    pub fn rprop(param_count: usize, params: RpropParams) -> Self {
        OptimizerState::Rprop {
            params,
            step: 0,
            step_sizes: vec![params.delta0; param_count],
            prev_grad: vec![0.0; param_count],
        }
    }

    pub fn for_network(kind: OptimizerKind, net: &Network, learning_rate: f64) -> Self {
        match kind {
            OptimizerKind::Adam => Self::adam(net.param_count(), learning_rate),
            OptimizerKind::Rprop => Self::rprop(net.param_count(), RpropParams::default()),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            OptimizerState::Adam { .. } => OptimizerKind::Adam,
            OptimizerState::Rprop { .. } => OptimizerKind::Rprop,
        }
    }

    pub fn step_count(&self) -> u64 {
        match self {
            OptimizerState::Adam { step, .. } | OptimizerState::Rprop { step, .. } => *step,
        }
    }

    pub fn apply(&mut self, net: &mut Network, grad: &[f64]) -> Result<()> {
        match self.kind() {
            OptimizerKind::Adam => adam_step(self, net, grad),
            OptimizerKind::Rprop => rprop_step(self, net, grad),
        }
    }
}

pub fn adam_step(state: &mut OptimizerState, net: &mut Network, grad: &[f64]) -> Result<()> {
    let OptimizerState::Adam { learning_rate, step, first, second } = state else {
        return Err(NfqError::config("adam_step called with a non-Adam optimizer state"));
    };
    if grad.len() != net.params.len() || first.len() != grad.len() {
        return Err(NfqError::shape("gradient, optimizer and network sizes differ"));
    }
    *step += 1;
    let t = *step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let lr = *learning_rate;
    for (((p, &g), m), v) in net.params.iter_mut().zip(grad).zip(first.iter_mut()).zip(second.iter_mut()) {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

pub fn rprop_step(state: &mut OptimizerState, net: &mut Network, grad: &[f64]) -> Result<()> {
    let OptimizerState::Rprop { params, step, step_sizes, prev_grad } = state else {
        return Err(NfqError::config("rprop_step called with a non-Rprop optimizer state"));
    };
    if grad.len() != net.params.len() || step_sizes.len() != grad.len() {
        return Err(NfqError::shape("gradient, optimizer and network sizes differ"));
    }
    *step += 1;
    for (((p, &g), delta), prev) in net.params.iter_mut().zip(grad).zip(step_sizes.iter_mut()).zip(prev_grad.iter_mut()) {
        let agreement = g * *prev;
        if agreement > 0.0 {
            *delta = (*delta * params.eta_plus).min(params.delta_max);
        } else if agreement < 0.0 {
            *delta = (*delta * params.eta_minus).max(params.delta_min);
        }
        if g > 0.0 {
            *p -= *delta;
        } else if g < 0.0 {
            *p += *delta;
        }
        *prev = g;
    }
    Ok(())
}

/// A supervised training set in row-major layout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub input_dim: usize,
    pub inputs: Vec<f64>,
    /// Dense rows of `output_dim` values, or one value per sample when `heads` is set.
    pub targets: Vec<f64>,
    pub heads: Option<Vec<usize>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        if self.input_dim == 0 {
            0
        } else {
            self.inputs.len() / self.input_dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-epoch record produced by [`fit`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    /// Sample-weighted mean of the mini-batch losses.
    pub loss: f64,
    /// Network outputs seen by the loss during the epoch, before each update.
    pub outputs: OutputStats,
}

/// Sizes of the mini-batches one epoch is split into.
pub fn batch_sizes(samples: usize, batch_size: usize) -> Vec<usize> {
    let batch = batch_size.max(1);
    (0..samples).step_by(batch).map(|start| batch.min(samples - start)).collect()
}

/// Trains `net` for `epochs` passes over `data` in seeded shuffled mini-batches.
///
/// The final partial batch of each epoch is trained on.
pub fn fit(
    net: &mut Network,
    data: &Dataset,
    epochs: usize,
    batch_size: usize,
    optimizer: &mut OptimizerState,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EpochStats>> {
    let n = data.len();
    if n == 0 {
        return Err(NfqError::input("cannot fit on an empty dataset"));
    }
    if data.input_dim != net.input_dim {
        return Err(NfqError::shape(format!(
            "dataset input dimension {} differs from network input {}",
            data.input_dim, net.input_dim
        )));
    }
    let target_width = if data.heads.is_some() { 1 } else { net.output_dim() };
    if data.targets.len() != n * target_width {
        return Err(NfqError::shape("dataset targets do not match sample count"));
    }
    if optimizer.kind() == OptimizerKind::Rprop && batch_size < n && epochs > 0 {
        log::warn!("rprop with mini-batches of {batch_size} < {n} samples; sign-based updates on noisy gradients are unreliable");
    }

    let dim = data.input_dim;
    let mut order: Vec<usize> = (0..n).collect();
    let mut grad = vec![0.0; net.param_count()];
    let mut trace = Vec::with_capacity(epochs);
    let mut xb = Vec::new();
    let mut tb = Vec::new();
    let mut hb = Vec::new();
    for _ in 0..epochs {
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        let (mut lo, mut hi, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
        let mut counted = 0.0;
        for chunk in order.chunks(batch_size.max(1)) {
            xb.clear();
            tb.clear();
            hb.clear();
            for &i in chunk {
                xb.extend_from_slice(&data.inputs[i * dim..(i + 1) * dim]);
                tb.extend_from_slice(&data.targets[i * target_width..(i + 1) * target_width]);
                if let Some(heads) = &data.heads {
                    hb.push(heads[i]);
                }
            }
            let targets = if data.heads.is_some() {
                Targets::Head { heads: &hb, values: &tb }
            } else {
                Targets::Dense(&tb)
            };
            let (loss, stats) = net.loss_and_grad(&xb, targets, &mut grad)?;
            optimizer.apply(net, &grad)?;
            let rows = chunk.len() as f64;
            loss_sum += loss * rows;
            let values = rows * target_width as f64;
            lo = lo.min(stats.min);
            hi = hi.max(stats.max);
            sum += stats.mean * values;
            counted += values;
        }
        trace.push(EpochStats {
            loss: loss_sum / n as f64,
            outputs: OutputStats { min: lo, mean: sum / counted, max: hi },
        });
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(acts: [Activation; 3], seed: u64) -> Network {
        let layers = [LayerSpec::new(4, acts[0]), LayerSpec::new(3, acts[1]), LayerSpec::new(2, acts[2])];
        Network::init(3, &layers, WeightInit::Glorot, seed).unwrap()
    }

    #[test]
    fn empty_layer_list_is_a_config_error() {
        let err = Network::init(3, &[], WeightInit::Glorot, 0).unwrap_err();
        assert!(matches!(err, NfqError::Config(_)));
    }

    #[test]
    fn glorot_biases_are_zero_and_seeded() {
        let a = small([Activation::Relu, Activation::Tanh, Activation::Sigmoid], 9);
        let b = small([Activation::Relu, Activation::Tanh, Activation::Sigmoid], 9);
        assert_eq!(a.params(), b.params());
        for layer in 0..3 {
            assert!(a.biases(layer).iter().all(|&b| b == 0.0));
        }
        let c = small([Activation::Relu, Activation::Tanh, Activation::Sigmoid], 10);
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn glorot_256_bound_is_tight() {
        let expected = (6.0f64 / 512.0).sqrt();
        assert!((glorot_bound(256, 256) - 0.108253).abs() < 1e-6);
        let net = Network::init(256, &[LayerSpec::new(256, Activation::Relu)], WeightInit::Glorot, 3).unwrap();
        let w = net.weights(0);
        assert_eq!(w.len(), 65536);
        let max = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max <= expected);
        assert!(max >= 0.95 * expected);
    }

    #[test]
    fn zero_network_sigmoid_emits_half() {
        let net = Network::zeros(3, &[LayerSpec::new(5, Activation::Relu), LayerSpec::new(2, Activation::Sigmoid)]).unwrap();
        let out = net.forward(&[1.0, -2.0, 3.0, 0.5, 0.5, 0.5]).unwrap();
        assert_eq!(out, vec![0.5; 4]);
    }

    #[test]
    fn identity_linear_layer_passes_input_through() {
        let mut params = vec![0.0; 3 * 3 + 3];
        for i in 0..3 {
            params[i * 3 + i] = 1.0;
        }
        let net = Network::from_params(3, &[LayerSpec::new(3, Activation::Linear)], params).unwrap();
        let x = [0.3, -1.5, 2.25, 7.0, 8.0, -9.0];
        assert_eq!(net.forward(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn forward_rejects_wrong_dimension() {
        let net = small([Activation::Relu, Activation::Relu, Activation::Linear], 0);
        assert!(matches!(net.forward(&[1.0, 2.0]), Err(NfqError::Shape(_))));
    }

    #[test]
    fn perfect_targets_give_zero_loss_and_gradient() {
        let net = small([Activation::Tanh, Activation::Relu, Activation::Sigmoid], 4);
        let x = [0.1, 0.2, 0.3, -0.4, 0.5, -0.6];
        let y = net.forward(&x).unwrap();
        let (loss, grad) = net.backward_mse(&x, Targets::Dense(&y)).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn doubled_residuals_quadruple_loss() {
        let net = small([Activation::Tanh, Activation::Tanh, Activation::Linear], 5);
        let x = [0.1, 0.2, 0.3, -0.4, 0.5, -0.6];
        let y = net.forward(&x).unwrap();
        let t1: Vec<f64> = y.iter().enumerate().map(|(i, v)| v + 0.1 * (i as f64 + 1.0)).collect();
        let t2: Vec<f64> = y.iter().enumerate().map(|(i, v)| v + 0.2 * (i as f64 + 1.0)).collect();
        let (l1, _) = net.backward_mse(&x, Targets::Dense(&t1)).unwrap();
        let (l2, _) = net.backward_mse(&x, Targets::Dense(&t2)).unwrap();
        assert!((l2 / l1 - 4.0).abs() < 1e-9);
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut net = small([Activation::Relu, Activation::Relu, Activation::Linear], 1);
        let before = net.params().to_vec();
        let mut opt = OptimizerState::adam(net.param_count(), 1e-3);
        adam_step(&mut opt, &mut net, &vec![0.0; before.len()]).unwrap();
        assert_eq!(net.params(), &before[..]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut net = small([Activation::Relu, Activation::Relu, Activation::Linear], 1);
        let before = net.params().to_vec();
        let lr = 1e-3;
        let mut opt = OptimizerState::adam(net.param_count(), lr);
        let grad: Vec<f64> = (0..before.len()).map(|i| if i % 2 == 0 { 0.7 } else { -3.0 }).collect();
        adam_step(&mut opt, &mut net, &grad).unwrap();
        for ((a, b), g) in net.params().iter().zip(&before).zip(&grad) {
            let moved = b - a;
            assert!((moved - lr * g.signum()).abs() < 1e-6 * lr.max(1.0));
        }
    }

    #[test]
    fn wrong_optimizer_kind_is_rejected() {
        let mut net = small([Activation::Relu, Activation::Relu, Activation::Linear], 1);
        let mut opt = OptimizerState::rprop(net.param_count(), RpropParams::default());
        let g = vec![0.0; net.param_count()];
        assert!(adam_step(&mut opt, &mut net, &g).is_err());
    }

    #[test]
    fn rprop_step_size_traces() {
        let layers = [LayerSpec::new(1, Activation::Linear)];
        let mut net = Network::from_params(1, &layers, vec![0.0, 0.0]).unwrap();
        let mut opt = OptimizerState::rprop(2, RpropParams::default());
        // same sign twice on param 0, zero gradient on param 1
        rprop_step(&mut opt, &mut net, &[1.0, 0.0]).unwrap();
        assert!((net.params()[0] + 0.1).abs() < 1e-15);
        rprop_step(&mut opt, &mut net, &[2.0, 0.0]).unwrap();
        let OptimizerState::Rprop { step_sizes, .. } = &opt else { unreachable!() };
        assert!((step_sizes[0] - 0.12).abs() < 1e-15);
        assert_eq!(step_sizes[1], 0.1);
        assert_eq!(net.params()[1], 0.0);
        // flip: halves
        rprop_step(&mut opt, &mut net, &[-1.0, 0.0]).unwrap();
        let OptimizerState::Rprop { step_sizes, .. } = &opt else { unreachable!() };
        assert!((step_sizes[0] - 0.06).abs() < 1e-15);
    }

    #[test]
    fn rprop_step_size_clamps_at_minimum() {
        let layers = [LayerSpec::new(1, Activation::Linear)];
        let mut net = Network::from_params(1, &layers, vec![0.0, 0.0]).unwrap();
        let mut opt = OptimizerState::rprop(2, RpropParams::default());
        let mut sign = 1.0;
        for _ in 0..40 {
            rprop_step(&mut opt, &mut net, &[sign, 0.0]).unwrap();
            sign = -sign;
        }
        let OptimizerState::Rprop { step_sizes, .. } = &opt else { unreachable!() };
        assert_eq!(step_sizes[0], 1e-6);
    }

    #[test]
    fn batch_partitioning_keeps_the_tail() {
        assert_eq!(batch_sizes(5000, 2048), vec![2048, 2048, 904]);
        assert_eq!(batch_sizes(10, 2048), vec![10]);
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let mut net = small([Activation::Relu, Activation::Relu, Activation::Linear], 1);
        let before = net.clone();
        let data = Dataset { input_dim: 3, inputs: vec![0.0; 6], targets: vec![0.0; 4], heads: None };
        let mut opt = OptimizerState::adam(net.param_count(), 1e-3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let trace = fit(&mut net, &data, 0, 32, &mut opt, &mut rng).unwrap();
        assert!(trace.is_empty());
        assert_eq!(net, before);
    }

    #[test]
    fn fit_on_empty_dataset_fails() {
        let mut net = small([Activation::Relu, Activation::Relu, Activation::Linear], 1);
        let data = Dataset { input_dim: 3, ..Default::default() };
        let mut opt = OptimizerState::adam(net.param_count(), 1e-3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(fit(&mut net, &data, 1, 32, &mut opt, &mut rng), Err(NfqError::Input(_))));
    }
}
