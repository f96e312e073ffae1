//! Serial reference paths used to check the distributed engine.
//!
//! `full_batch_gradient` computes the batch-mean gradient in one shot on the
//! whole batch matrix: a different summation route than the microbatched
//! engine, compared under a small relative tolerance.
//!
//! `SerialTrainer` replays the engine's exact arithmetic with no fabric, no
//! sharding and no scheduler: microbatches in ascending id order per shard,
//! shard subtotals folded in ascending rank order, then one optimizer step.
//! With mixed-precision emulation on it reproduces the engine bit for bit.

use crate::config::ValidatedRun;
use crate::halfprec::quantize_half;
use crate::matrix::Matrix;
use crate::nn::{
    backward_layer, forward_layer, init_layers, loss_and_grad, DataBatch, LayerParams, LossKind,
    PrecisionMode,
};
use crate::optim::{adam_step, OptimError, OptimizerState};
use crate::scalar::Scalar;
use crate::seeds::{derived_seed, streams};

/// Forward through a full layer stack keeping every boundary activation;
/// result[l] is the input of layer l, result[layers.len()] the prediction.
pub fn forward_collect<T: Scalar>(
    layers: &[LayerParams<T>],
    input: &Matrix<T>,
    mode: PrecisionMode,
) -> Vec<Matrix<T>> {
    let mut acts = Vec::with_capacity(layers.len() + 1);
    acts.push(input.clone());
    for (l, layer) in layers.iter().enumerate() {
        let next = forward_layer(layer, &acts[l], mode);
        acts.push(next);
    }
    acts
}

/// Backward through a full layer stack. Returns flattened parameter
/// gradients (layer order, weights then bias) and the input gradient.
pub fn backward_collect<T: Scalar>(
    layers: &[LayerParams<T>],
    acts: &[Matrix<T>],
    output_grad: &Matrix<T>,
    mode: PrecisionMode,
) -> (Vec<T>, Matrix<T>) {
    let total: usize = layers.iter().map(LayerParams::param_count).sum();
    let mut grads = vec![T::zero(); total];
    let mut g = output_grad.clone();
    let mut offset = total;
    for (l, layer) in layers.iter().enumerate().rev() {
        let (gw, gb, gx) = backward_layer(layer, &acts[l], &acts[l + 1], &g, mode);
        offset -= layer.param_count();
        let slot = &mut grads[offset..offset + layer.param_count()];
        slot[..gw.len()].copy_from_slice(gw.data());
        slot[gw.len()..].copy_from_slice(&gb);
        g = gx;
    }
    (grads, g)
}

/// Full-batch oracle: mean loss over the whole batch in one forward/backward
/// (no microbatching, no scaling). Full working precision.
pub fn full_batch_gradient<T: Scalar>(
    layers: &[LayerParams<T>],
    batch: &DataBatch<T>,
    loss: LossKind,
) -> (T, Vec<T>) {
    let acts = forward_collect(layers, &batch.inputs, PrecisionMode::Full);
    let (loss_value, g_out) = loss_and_grad(
        acts.last().expect("non-empty network"),
        &batch.targets,
        loss,
        1,
        1.0,
        PrecisionMode::Full,
    )
    .expect("shapes validated by caller");
    let (grads, _) = backward_collect(layers, &acts, &g_out, PrecisionMode::Full);
    (loss_value, grads)
}

/// Outcome of one serial reference step.
#[derive(Debug, Clone, Copy)]
pub struct SerialStep {
    pub loss: f64,
    pub skipped_overflow: bool,
}

/// Single-context trainer with the engine's accumulation semantics.
pub struct SerialTrainer<T> {
    layers: Vec<LayerParams<T>>,
    opt: OptimizerState<T>,
    run: ValidatedRun,
    mode: PrecisionMode,
    loss_scale: f64,
}

impl<T: Scalar> SerialTrainer<T> {
    /// Initializes from the same seed streams as the engine, so parameters
    /// start identical for any grid shape.
    pub fn new(run: &ValidatedRun, seed: u64) -> Self {
        let layers = init_layers::<T>(
            &run.net.layer_dims,
            run.net.activation,
            derived_seed(seed, streams::PARAMS),
        );
        let master = flatten(&layers);
        Self {
            layers,
            opt: OptimizerState::new(master),
            run: run.clone(),
            mode: if run.mixed_precision {
                PrecisionMode::MixedHalf
            } else {
                PrecisionMode::Full
            },
            loss_scale: run.optimizer.loss_scale,
        }
    }

    pub fn master(&self) -> &[T] {
        &self.opt.master
    }

    pub fn layers(&self) -> &[LayerParams<T>] {
        &self.layers
    }

    pub fn loss_scale(&self) -> f64 {
        self.loss_scale
    }

    /// One training step over the whole batch.
    pub fn step(&mut self, batch: &DataBatch<T>) -> Result<SerialStep, OptimError> {
        let b = self.run.batch;
        let quantize = self.run.mixed_precision;
        let mbs = self.run.microbatch_size;
        let n_params = self.opt.len();

        let mut shard_sums: Vec<Vec<T>> = Vec::with_capacity(self.run.g_data);
        let mut loss_total = T::zero();
        for shard in 0..self.run.g_data {
            let mut acc = vec![T::zero(); n_params];
            for m in 0..b.microbatches_per_shard {
                let rows = shard * b.shard_size + m * mbs;
                let inputs = batch.inputs.slice_rows(rows, mbs);
                let targets = batch.targets.slice_rows(rows, mbs);
                let acts = forward_collect(&self.layers, &inputs, self.mode);
                let (loss, g_out) = loss_and_grad(
                    acts.last().expect("non-empty network"),
                    &targets,
                    self.run.net.loss,
                    b.total_microbatches,
                    self.loss_scale,
                    self.mode,
                )
                .expect("config-validated shapes");
                loss_total += loss;
                let (grads, _) = backward_collect(&self.layers, &acts, &g_out, self.mode);
                for (a, g) in acc.iter_mut().zip(&grads) {
                    let sum = *a + *g;
                    *a = if quantize { quantize_half(sum) } else { sum };
                }
            }
            shard_sums.push(acc);
        }

        // Fold shard subtotals in ascending rank order, like the all-reduce.
        let mut reduced = shard_sums.remove(0);
        for shard in shard_sums {
            for (r, s) in reduced.iter_mut().zip(&shard) {
                let sum = *r + *s;
                *r = if quantize { quantize_half(sum) } else { sum };
            }
        }

        let loss = loss_total.as_f64() / self.loss_scale;
        if reduced.iter().any(|g| !g.is_finite()) {
            if self.run.optimizer.dynamic_loss_scale {
                self.loss_scale /= 2.0;
            }
            return Ok(SerialStep {
                loss,
                skipped_overflow: true,
            });
        }

        let scale = T::from_f64_lossy(self.loss_scale);
        let descaled: Vec<T> = reduced.iter().map(|&g| g / scale).collect();
        adam_step(&mut self.opt, &descaled, &self.run.optimizer)?;

        // Write the updated master back into the layers and their mirrors.
        let mut off = 0;
        for layer in &mut self.layers {
            let wlen = layer.weights.len();
            layer
                .weights
                .data_mut()
                .copy_from_slice(&self.opt.master[off..off + wlen]);
            off += wlen;
            let blen = layer.bias.len();
            layer
                .bias
                .copy_from_slice(&self.opt.master[off..off + blen]);
            off += blen;
            layer.refresh_quantized();
        }
        Ok(SerialStep {
            loss,
            skipped_overflow: false,
        })
    }
}

fn flatten<T: Scalar>(layers: &[LayerParams<T>]) -> Vec<T> {
    let mut out = Vec::new();
    for layer in layers {
        out.extend_from_slice(layer.weights.data());
        out.extend_from_slice(&layer.bias);
    }
    out
}
