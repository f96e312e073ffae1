//! Deterministic dense-layer network shards with reverse-mode gradients,
//! activation checkpointing and emulated half precision.
//!
//! A shard owns a contiguous block of layers. Forward stashes activations at
//! checkpoint boundaries only; backward recomputes the rest segment by
//! segment, so results are bit-identical for every checkpoint interval. All
//! reductions use fixed loop orders, which makes the whole engine independent
//! of message interleavings.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::halfprec::quantize_half;
use crate::matrix::Matrix;
use crate::scalar::Scalar;
use crate::seeds::derived_seed;

/// Nonlinearity applied after each affine layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Linear,
    Tanh,
    Relu,
}

/// Loss applied to the last stage's output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    SquaredError,
    CrossEntropy,
}

/// Working precision of forward/backward compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrecisionMode {
    /// Everything in the working scalar type.
    Full,
    /// Values snapped to the binary16 grid after every layer op; compute
    /// uses the reduced-precision parameter mirrors.
    MixedHalf,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("backward without a matching forward for microbatch {microbatch_id}")]
    UnknownMicrobatch { microbatch_id: u64 },
}

/// One dense layer: full-precision parameters plus their binary16 mirrors.
#[derive(Debug, Clone)]
pub struct LayerParams<T> {
    /// Weights, out x in.
    pub weights: Matrix<T>,
    pub bias: Vec<T>,
    /// Reduced-precision mirrors, refreshed after every optimizer step.
    pub weights_q: Matrix<T>,
    pub bias_q: Vec<T>,
    pub activation: Activation,
}

impl<T: Scalar> LayerParams<T> {
    pub fn new(weights: Matrix<T>, bias: Vec<T>, activation: Activation) -> Self {
        assert_eq!(
            weights.rows(),
            bias.len(),
            "bias length must match output width"
        );
        let mut layer = Self {
            weights_q: weights.clone(),
            bias_q: bias.clone(),
            weights,
            bias,
            activation,
        };
        layer.refresh_quantized();
        layer
    }

    /// Seeded uniform init in (-1/sqrt(in), 1/sqrt(in)), zero bias.
    pub fn random(input_dim: usize, output_dim: usize, activation: Activation, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (input_dim as f64).sqrt();
        let weights = Matrix::from_fn(output_dim, input_dim, |_, _| {
            T::from_f64_lossy(rng.random_range(-scale..scale))
        });
        Self::new(weights, vec![T::zero(); output_dim], activation)
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// Re-derives the binary16 mirrors from the full-precision parameters.
    pub fn refresh_quantized(&mut self) {
        for (q, v) in self
            .weights_q
            .data_mut()
            .iter_mut()
            .zip(self.weights.data())
        {
            *q = quantize_half(*v);
        }
        for (q, v) in self.bias_q.iter_mut().zip(&self.bias) {
            *q = quantize_half(*v);
        }
    }
}

fn apply_activation<T: Scalar>(kind: Activation, z: T) -> T {
    match kind {
        Activation::Linear => z,
        Activation::Tanh => z.tanh(),
        Activation::Relu => {
            if z > T::zero() {
                z
            } else {
                T::zero()
            }
        }
    }
}

/// Derivative expressed through the layer output y.
fn activation_grad_from_output<T: Scalar>(kind: Activation, y: T) -> T {
    match kind {
        Activation::Linear => T::one(),
        Activation::Tanh => T::one() - y * y,
        Activation::Relu => {
            if y > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
    }
}

/// y = act(x * W^T + b); x is samples x in, result samples x out.
/// Inner sums run over ascending input index; bias is added last.
pub fn forward_layer<T: Scalar>(
    layer: &LayerParams<T>,
    x: &Matrix<T>,
    mode: PrecisionMode,
) -> Matrix<T> {
    let mixed = mode == PrecisionMode::MixedHalf;
    let (w, b) = if mixed {
        (&layer.weights_q, &layer.bias_q)
    } else {
        (&layer.weights, &layer.bias)
    };
    let mut z = Matrix::zeros(x.rows(), w.rows());
    for s in 0..x.rows() {
        let xr = x.row(s);
        for o in 0..w.rows() {
            let wr = w.row(o);
            let mut acc = T::zero();
            for i in 0..xr.len() {
                acc += xr[i] * wr[i];
            }
            let v = acc + b[o];
            *z.at_mut(s, o) = if mixed { quantize_half(v) } else { v };
        }
    }
    z.map_in_place(|v| {
        let a = apply_activation(layer.activation, v);
        if mixed {
            quantize_half(a)
        } else {
            a
        }
    });
    z
}

/// Gradients of one layer given its input x, output y and upstream grad g_y.
/// Returns (weight grad out x in, bias grad, input grad samples x in).
pub fn backward_layer<T: Scalar>(
    layer: &LayerParams<T>,
    x: &Matrix<T>,
    y: &Matrix<T>,
    g_y: &Matrix<T>,
    mode: PrecisionMode,
) -> (Matrix<T>, Vec<T>, Matrix<T>) {
    let mixed = mode == PrecisionMode::MixedHalf;
    let w = if mixed {
        &layer.weights_q
    } else {
        &layer.weights
    };
    let samples = x.rows();
    let (in_dim, out_dim) = (x.cols(), y.cols());

    // delta = g_y (*) act'(y)
    let mut delta = Matrix::zeros(samples, out_dim);
    for s in 0..samples {
        for o in 0..out_dim {
            let d = g_y.at(s, o) * activation_grad_from_output(layer.activation, y.at(s, o));
            *delta.at_mut(s, o) = if mixed { quantize_half(d) } else { d };
        }
    }

    // gW[o][i] = sum_s delta[s][o] * x[s][i]
    let mut gw = Matrix::zeros(out_dim, in_dim);
    for o in 0..out_dim {
        for i in 0..in_dim {
            let mut acc = T::zero();
            for s in 0..samples {
                acc += delta.at(s, o) * x.at(s, i);
            }
            *gw.at_mut(o, i) = if mixed { quantize_half(acc) } else { acc };
        }
    }

    // gb[o] = sum_s delta[s][o]
    let mut gb = vec![T::zero(); out_dim];
    for (o, slot) in gb.iter_mut().enumerate() {
        let mut acc = T::zero();
        for s in 0..samples {
            acc += delta.at(s, o);
        }
        *slot = if mixed { quantize_half(acc) } else { acc };
    }

    // gx[s][i] = sum_o delta[s][o] * w[o][i]
    let mut gx = Matrix::zeros(samples, in_dim);
    for s in 0..samples {
        for i in 0..in_dim {
            let mut acc = T::zero();
            for o in 0..out_dim {
                acc += delta.at(s, o) * w.at(o, i);
            }
            *gx.at_mut(s, i) = if mixed { quantize_half(acc) } else { acc };
        }
    }
    (gw, gb, gx)
}

/// Scaled loss and output gradient for one microbatch.
///
/// The mean per-sample loss is multiplied by `loss_scale / total_microbatches`,
/// so summing microbatch losses over the batch yields the batch mean times the
/// loss scale, and summed gradients equal the full-batch mean gradient times
/// the loss scale.
pub fn loss_and_grad<T: Scalar>(
    pred: &Matrix<T>,
    targets: &Matrix<T>,
    kind: LossKind,
    total_microbatches: usize,
    loss_scale: f64,
    mode: PrecisionMode,
) -> Result<(T, Matrix<T>), NnError> {
    if pred.rows() != targets.rows() {
        return Err(NnError::ShapeMismatch {
            context: "loss targets rows",
            expected: pred.rows(),
            got: targets.rows(),
        });
    }
    if pred.cols() != targets.cols() {
        return Err(NnError::ShapeMismatch {
            context: "loss targets cols",
            expected: pred.cols(),
            got: targets.cols(),
        });
    }
    assert!(total_microbatches >= 1, "total_microbatches must be >= 1");
    let samples = pred.rows();
    let factor = T::from_f64_lossy(loss_scale / total_microbatches as f64 / samples as f64);

    let mut loss_sum = T::zero();
    let mut grad = Matrix::zeros(samples, pred.cols());
    match kind {
        LossKind::SquaredError => {
            for s in 0..samples {
                for d in 0..pred.cols() {
                    let diff = pred.at(s, d) - targets.at(s, d);
                    loss_sum += diff * diff;
                    *grad.at_mut(s, d) = (diff + diff) * factor;
                }
            }
        }
        LossKind::CrossEntropy => {
            for s in 0..samples {
                let row = pred.row(s);
                let mut max = row[0];
                for &v in row {
                    if v > max {
                        max = v;
                    }
                }
                let mut denom = T::zero();
                for &v in row {
                    denom += (v - max).exp();
                }
                let log_denom = denom.ln();
                for d in 0..pred.cols() {
                    let logp = pred.at(s, d) - max - log_denom;
                    let p = logp.exp();
                    loss_sum -= targets.at(s, d) * logp;
                    *grad.at_mut(s, d) = (p - targets.at(s, d)) * factor;
                }
            }
        }
    }
    if mode == PrecisionMode::MixedHalf {
        grad.map_in_place(quantize_half);
    }
    Ok((loss_sum * factor, grad))
}

/// One batch of training data; rows are samples.
#[derive(Debug, Clone)]
pub struct DataBatch<T> {
    pub inputs: Matrix<T>,
    pub targets: Matrix<T>,
}

impl<T: Scalar> DataBatch<T> {
    pub fn new(inputs: Matrix<T>, targets: Matrix<T>) -> Self {
        assert_eq!(inputs.rows(), targets.rows(), "inputs/targets row mismatch");
        Self { inputs, targets }
    }

    pub fn samples(&self) -> usize {
        self.inputs.rows()
    }

    pub fn slice_rows(&self, start: usize, count: usize) -> DataBatch<T> {
        DataBatch {
            inputs: self.inputs.slice_rows(start, count),
            targets: self.targets.slice_rows(start, count),
        }
    }
}

/// Builds the full layer stack for a network; layer `l` draws from its own
/// seed stream, so any sharding of the same network sees identical values.
pub fn init_layers<T: Scalar>(
    layer_dims: &[(usize, usize)],
    activation: Activation,
    seed: u64,
) -> Vec<LayerParams<T>> {
    layer_dims
        .iter()
        .enumerate()
        .map(|(l, &(i, o))| LayerParams::random(i, o, activation, derived_seed(seed, l as u64)))
        .collect()
}

/// A contiguous block of layers owned by one pipeline stage.
#[derive(Debug, Clone)]
pub struct NetworkShard<T> {
    layers: Vec<LayerParams<T>>,
    first_global_layer: usize,
    checkpoint_interval: usize,
    mode: PrecisionMode,
    /// (microbatch, local layer index) -> stashed input of that layer.
    /// Entries exist only at indices that are multiples of the interval.
    stash: BTreeMap<(u64, usize), Matrix<T>>,
    /// Per-microbatch flattened parameter gradients, merged at drain time.
    pending_grads: BTreeMap<u64, Vec<T>>,
    grad_accumulator: Vec<T>,
    stash_units_peak: usize,
}

impl<T: Scalar> NetworkShard<T> {
    pub fn new(
        layers: Vec<LayerParams<T>>,
        first_global_layer: usize,
        checkpoint_interval: usize,
        mode: PrecisionMode,
    ) -> Self {
        assert!(!layers.is_empty(), "shard must own at least one layer");
        assert!(checkpoint_interval >= 1);
        assert_eq!(
            layers.len() % checkpoint_interval,
            0,
            "checkpoint interval must divide shard depth"
        );
        let params = layers.iter().map(LayerParams::param_count).sum();
        Self {
            layers,
            first_global_layer,
            checkpoint_interval,
            mode,
            stash: BTreeMap::new(),
            pending_grads: BTreeMap::new(),
            grad_accumulator: vec![T::zero(); params],
            stash_units_peak: 0,
        }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn first_global_layer(&self) -> usize {
        self.first_global_layer
    }

    pub fn layers(&self) -> &[LayerParams<T>] {
        &self.layers
    }

    pub fn mode(&self) -> PrecisionMode {
        self.mode
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.grad_accumulator.len()
    }

    /// Stashed activation keys currently held (microbatch, local layer).
    pub fn stash_keys(&self) -> Vec<(u64, usize)> {
        self.stash.keys().copied().collect()
    }

    /// Highest simultaneous activation-unit count observed so far: stashed
    /// entries plus live forward/recompute buffers, in units of one
    /// microbatch activation.
    pub fn stash_units_peak(&self) -> usize {
        self.stash_units_peak
    }

    pub fn reset_stash_units_peak(&mut self) {
        self.stash_units_peak = 0;
    }

    fn note_units(&mut self, live: usize) {
        let now = self.stash.len() + live;
        if now > self.stash_units_peak {
            self.stash_units_peak = now;
        }
    }

    /// Runs the shard forward for one microbatch, stashing checkpoint inputs.
    pub fn forward(&mut self, microbatch_id: u64, input: &Matrix<T>) -> Result<Matrix<T>, NnError> {
        if input.cols() != self.input_dim() {
            return Err(NnError::ShapeMismatch {
                context: "shard forward input width",
                expected: self.input_dim(),
                got: input.cols(),
            });
        }
        let mut a = input.clone();
        for l in 0..self.layers.len() {
            if l % self.checkpoint_interval == 0 {
                self.stash.insert((microbatch_id, l), a.clone());
                self.note_units(1);
            }
            a = forward_layer(&self.layers[l], &a, self.mode);
            self.note_units(1);
        }
        Ok(a)
    }

    /// Backpropagates one microbatch, recomputing non-stashed activations
    /// from the nearest checkpoint. Frees the microbatch's stash entries and
    /// records its parameter gradients for the drain step.
    pub fn backward(
        &mut self,
        microbatch_id: u64,
        output_grad: &Matrix<T>,
    ) -> Result<Matrix<T>, NnError> {
        if !self.stash.contains_key(&(microbatch_id, 0)) {
            return Err(NnError::UnknownMicrobatch { microbatch_id });
        }
        if output_grad.cols() != self.output_dim() {
            return Err(NnError::ShapeMismatch {
                context: "shard backward grad width",
                expected: self.output_dim(),
                got: output_grad.cols(),
            });
        }
        let ac = self.checkpoint_interval;
        let segments = self.layers.len() / ac;
        let mut grads = vec![T::zero(); self.grad_accumulator.len()];
        let mut g = output_grad.clone();

        for seg in (0..segments).rev() {
            let start = seg * ac;
            let x0 = self
                .stash
                .remove(&(microbatch_id, start))
                .ok_or(NnError::UnknownMicrobatch { microbatch_id })?;
            // Recompute the segment's activations; acts[i] is the input of
            // layer start+i, acts[ac] the segment output.
            let mut acts = Vec::with_capacity(ac + 1);
            acts.push(x0);
            for i in 0..ac {
                let next = forward_layer(&self.layers[start + i], &acts[i], self.mode);
                acts.push(next);
                self.note_units(acts.len());
            }
            for i in (0..ac).rev() {
                let layer = &self.layers[start + i];
                let (gw, gb, gx) = backward_layer(layer, &acts[i], &acts[i + 1], &g, self.mode);
                let offset = self.param_offset(start + i);
                let slot = &mut grads[offset..offset + layer.param_count()];
                slot[..gw.len()].copy_from_slice(gw.data());
                slot[gw.len()..].copy_from_slice(&gb);
                g = gx;
            }
        }
        self.pending_grads.insert(microbatch_id, grads);
        Ok(g)
    }

    /// Merges pending per-microbatch gradients into the accumulator in
    /// ascending microbatch order. With `quantize`, the running sum is
    /// snapped to the binary16 grid after every addition, emulating a
    /// half-precision gradient buffer.
    pub fn drain_accumulate(&mut self, quantize: bool) {
        let pending = std::mem::take(&mut self.pending_grads);
        for (_, grads) in pending {
            for (acc, g) in self.grad_accumulator.iter_mut().zip(&grads) {
                let sum = *acc + *g;
                *acc = if quantize { quantize_half(sum) } else { sum };
            }
        }
    }

    pub fn grad_accumulator(&self) -> &[T] {
        &self.grad_accumulator
    }

    pub fn grad_accumulator_mut(&mut self) -> &mut Vec<T> {
        &mut self.grad_accumulator
    }

    pub fn zero_grad(&mut self) {
        self.grad_accumulator
            .iter_mut()
            .for_each(|v| *v = T::zero());
        self.pending_grads.clear();
    }

    pub fn stash_is_empty(&self) -> bool {
        self.stash.is_empty()
    }

    /// Flat offset of a layer's parameters (weights row-major, then bias).
    pub fn param_offset(&self, local_layer: usize) -> usize {
        self.layers[..local_layer]
            .iter()
            .map(LayerParams::param_count)
            .sum()
    }

    /// Full-precision parameters flattened in layer order.
    pub fn flatten_params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend_from_slice(layer.weights.data());
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    /// Writes flattened parameters back and refreshes the binary16 mirrors.
    pub fn set_params_from_flat(&mut self, flat: &[T]) {
        assert_eq!(flat.len(), self.param_count());
        let mut off = 0;
        for layer in &mut self.layers {
            let wlen = layer.weights.len();
            layer
                .weights
                .data_mut()
                .copy_from_slice(&flat[off..off + wlen]);
            off += wlen;
            let blen = layer.bias.len();
            layer.bias.copy_from_slice(&flat[off..off + blen]);
            off += blen;
            layer.refresh_quantized();
        }
    }
}
