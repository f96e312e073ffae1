//! The hybrid training engine: the outer training loop, the message-driven
//! inter-layer scheduler, the data-parallel all-reduce phase and the
//! overlapped all-reduce/optimizer execution.
//!
//! Workers interact only through the fabric. Gradient contributions are
//! merged in ascending microbatch order at drain time and collectives
//! accumulate in ascending rank order, so the numbers coming out of a step
//! are independent of the fabric seed.

pub mod serial;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::Serialize;

use crate::config::{OptimizerConfig, ValidatedRun};
use crate::fabric::{Fabric, FabricError, Message, MessageKind, WorkerId};
use crate::matrix::Matrix;
use crate::nn::{init_layers, loss_and_grad, DataBatch, NetworkShard, NnError, PrecisionMode};
use crate::optim::{OffloadStore, OptimError};
use crate::scalar::Scalar;
use crate::seeds::{derived_seed, streams};

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error(transparent)]
    Fabric(#[from] FabricError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(
        "scheduler deadlock: {in_flight} microbatches in flight but no message can ever arrive"
    )]
    Deadlock { in_flight: usize },
}

/// What a worker did, for the per-step schedule trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleAction {
    /// A new microbatch entered the pipeline at stage 0.
    Inject,
    Forward,
    Backward,
    /// A microbatch finished its backward at stage 0.
    Complete,
    /// Per-microbatch gradients merged into the accumulator.
    Drain,
    ReduceChunk,
    OptimizerBuckets,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ScheduleEvent {
    pub seq: u64,
    pub worker: WorkerId,
    pub action: ScheduleAction,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub microbatch: Option<u64>,
    /// Microbatches in flight in this worker's pipeline after the event.
    pub in_flight: usize,
}

/// Outcome of one batch.
#[derive(Debug, Clone, Copy)]
pub struct BatchResult {
    /// Sum of pre-divided microbatch losses with the loss scale divided out,
    /// i.e. the batch-mean loss.
    pub loss: f64,
    pub grads_reduced: bool,
    /// True when a non-finite gradient skipped the optimizer step.
    pub skipped_overflow: bool,
}

/// Per-step record of the training log.
#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub skipped_overflow: bool,
    pub loss_scale: f64,
    pub p2p_bytes_sent_total: u64,
    pub allreduce_bytes_total: u64,
    pub in_flight_peak: usize,
}

struct WorkerState<T> {
    id: WorkerId,
    shard: NetworkShard<T>,
    opt: OffloadStore<T>,
    /// Remaining microbatches to inject; only stage 0 holds entries.
    microbatch_queue: VecDeque<(u64, Matrix<T>)>,
    /// Per-microbatch targets; only the last stage holds entries.
    targets: BTreeMap<u64, Matrix<T>>,
    /// Per-microbatch scaled losses; only the last stage holds entries.
    losses: BTreeMap<u64, T>,
}

/// The 2D-grid training engine over the simulated fabric.
pub struct HybridEngine<T> {
    run: ValidatedRun,
    workers: Vec<WorkerState<T>>,
    fabric: Fabric<T>,
    schedule: Vec<ScheduleEvent>,
    seq: u64,
    in_flight: Vec<BTreeSet<u64>>,
    in_flight_peak: usize,
    completed: Vec<usize>,
    overlap: bool,
    loss_scale: f64,
}

impl<T: Scalar> HybridEngine<T> {
    /// Builds shards and optimizer stores from the run seed. The fabric
    /// interleaving draws from its own stream; use
    /// [`HybridEngine::with_fabric_seed`] to vary it independently.
    pub fn new(run: &ValidatedRun, seed: u64) -> Self {
        Self::with_fabric_seed(run, seed, derived_seed(seed, streams::FABRIC))
    }

    pub fn with_fabric_seed(run: &ValidatedRun, seed: u64, fabric_seed: u64) -> Self {
        let mode = if run.mixed_precision {
            PrecisionMode::MixedHalf
        } else {
            PrecisionMode::Full
        };
        let layers = init_layers::<T>(
            &run.net.layer_dims,
            run.net.activation,
            derived_seed(seed, streams::PARAMS),
        );
        let mut workers = Vec::with_capacity(run.workers);
        for row in 0..run.g_inter {
            let span = run.shard_layers(row);
            for col in 0..run.g_data {
                let shard = NetworkShard::new(
                    layers[span.clone()].to_vec(),
                    span.start,
                    run.checkpoint_interval,
                    mode,
                );
                let master = shard.flatten_params();
                workers.push(WorkerState {
                    id: WorkerId::new(row, col),
                    shard,
                    opt: OffloadStore::new(master, run.bucket_size),
                    microbatch_queue: VecDeque::new(),
                    targets: BTreeMap::new(),
                    losses: BTreeMap::new(),
                });
            }
        }
        Self {
            fabric: Fabric::new(run.g_inter, run.g_data, run.element_bytes(), fabric_seed),
            workers,
            schedule: Vec::new(),
            seq: 0,
            in_flight: vec![BTreeSet::new(); run.g_data],
            in_flight_peak: 0,
            completed: vec![0; run.g_data],
            overlap: true,
            loss_scale: run.optimizer.loss_scale,
            run: run.clone(),
        }
    }

    pub fn run(&self) -> &ValidatedRun {
        &self.run
    }

    pub fn precision(&self) -> PrecisionMode {
        if self.run.mixed_precision {
            PrecisionMode::MixedHalf
        } else {
            PrecisionMode::Full
        }
    }

    /// Chooses between chunk-overlapped and sequential reduce+optimize.
    /// Both produce bit-identical parameters.
    pub fn set_overlap(&mut self, on: bool) {
        self.overlap = on;
    }

    pub fn loss_scale(&self) -> f64 {
        self.loss_scale
    }

    pub fn fabric(&self) -> &Fabric<T> {
        &self.fabric
    }

    /// Schedule trace of the most recent step.
    pub fn schedule(&self) -> &[ScheduleEvent] {
        &self.schedule
    }

    /// Highest in-flight count seen in any pipeline since construction.
    pub fn in_flight_peak(&self) -> usize {
        self.in_flight_peak
    }

    fn widx(&self, row: usize, col: usize) -> usize {
        row * self.run.g_data + col
    }

    /// Post-reduce gradient accumulator of a worker (valid after a step).
    pub fn reduced_gradient(&self, row: usize, col: usize) -> &[T] {
        self.workers[self.widx(row, col)].shard.grad_accumulator()
    }

    /// Full-precision master parameters of a worker.
    pub fn master_params(&self, row: usize, col: usize) -> &[T] {
        self.workers[self.widx(row, col)].opt.master()
    }

    pub fn shard(&self, row: usize, col: usize) -> &NetworkShard<T> {
        &self.workers[self.widx(row, col)].shard
    }

    pub fn offload_store(&self, row: usize, col: usize) -> &OffloadStore<T> {
        &self.workers[self.widx(row, col)].opt
    }

    /// Resets per-shard stash-unit peaks (used by memory-bound tests).
    pub fn reset_stash_peaks(&mut self) {
        for w in &mut self.workers {
            w.shard.reset_stash_units_peak();
        }
    }

    pub fn stash_units_peak(&self, row: usize, col: usize) -> usize {
        self.workers[self.widx(row, col)].shard.stash_units_peak()
    }

    fn note(&mut self, worker: WorkerId, action: ScheduleAction, microbatch: Option<u64>) {
        let seq = self.seq;
        self.seq += 1;
        let in_flight = self.in_flight[worker.col].len();
        self.schedule.push(ScheduleEvent {
            seq,
            worker,
            action,
            microbatch,
            in_flight,
        });
    }

    fn distribute(&mut self, batch: &DataBatch<T>) {
        let b = &self.run.batch;
        assert_eq!(
            batch.samples(),
            b.batch_size,
            "batch size must match the run config"
        );
        let mps = b.microbatches_per_shard;
        let mbs = self.run.microbatch_size;
        let last_row = self.run.g_inter - 1;
        for col in 0..self.run.g_data {
            let base = col * b.shard_size;
            for m in 0..mps {
                let mb_id = (col * mps + m) as u64;
                let rows = base + m * mbs;
                let inputs = batch.inputs.slice_rows(rows, mbs);
                let targets = batch.targets.slice_rows(rows, mbs);
                let first = self.widx(0, col);
                self.workers[first]
                    .microbatch_queue
                    .push_back((mb_id, inputs));
                let last = self.widx(last_row, col);
                self.workers[last].targets.insert(mb_id, targets);
            }
        }
    }

    fn mark_in_flight(&mut self, col: usize, mb: u64) {
        self.in_flight[col].insert(mb);
        let n = self.in_flight[col].len();
        assert!(
            n <= self.run.pipeline_limit,
            "pipeline {col} exceeded pipeline_limit: {n} in flight"
        );
        self.in_flight_peak = self.in_flight_peak.max(n);
    }

    /// Pops the next microbatch at stage 0, runs its forward, and ships the
    /// activation down the pipeline.
    fn inject_next(&mut self, col: usize) -> Result<bool, EngineError> {
        let widx = self.widx(0, col);
        let Some((mb, input)) = self.workers[widx].microbatch_queue.pop_front() else {
            return Ok(false);
        };
        self.mark_in_flight(col, mb);
        let id = self.workers[widx].id;
        self.note(id, ScheduleAction::Inject, Some(mb));
        let out = self.workers[widx].shard.forward(mb, &input)?;
        self.note(id, ScheduleAction::Forward, Some(mb));
        self.fabric.send(Message::new(
            id,
            WorkerId::new(1, col),
            mb,
            MessageKind::ActivationForward,
            out,
        ))?;
        Ok(true)
    }

    /// Last stage: turn an output activation into a loss-seeded backward.
    fn turn_around(
        &mut self,
        widx: usize,
        mb: u64,
        pred: Matrix<T>,
    ) -> Result<Matrix<T>, EngineError> {
        let total = self.run.batch.total_microbatches;
        let mode = self.precision();
        let worker = &mut self.workers[widx];
        let targets = worker
            .targets
            .remove(&mb)
            .unwrap_or_else(|| panic!("targets for microbatch {mb} were not routed"));
        let (loss, grad) = loss_and_grad(
            &pred,
            &targets,
            self.run.net.loss,
            total,
            self.loss_scale,
            mode,
        )?;
        worker.losses.insert(mb, loss);
        let id = worker.id;
        let g_in = worker.shard.backward(mb, &grad)?;
        self.note(id, ScheduleAction::Backward, Some(mb));
        Ok(g_in)
    }

    fn dispatch(&mut self, msg: Message<T>) -> Result<(), EngineError> {
        let dest = msg.dest;
        let widx = self.widx(dest.row, dest.col);
        let last_row = self.run.g_inter - 1;
        match msg.kind {
            MessageKind::ActivationForward => {
                let mb = msg.microbatch_id;
                let out = self.workers[widx].shard.forward(mb, &msg.payload)?;
                self.note(dest, ScheduleAction::Forward, Some(mb));
                if dest.row == last_row {
                    let g_in = self.turn_around(widx, mb, out)?;
                    self.fabric.send(Message::new(
                        dest,
                        WorkerId::new(dest.row - 1, dest.col),
                        mb,
                        MessageKind::GradientBackward,
                        g_in,
                    ))?;
                } else {
                    self.fabric.send(Message::new(
                        dest,
                        WorkerId::new(dest.row + 1, dest.col),
                        mb,
                        MessageKind::ActivationForward,
                        out,
                    ))?;
                }
            }
            MessageKind::GradientBackward => {
                let mb = msg.microbatch_id;
                let g_in = self.workers[widx].shard.backward(mb, &msg.payload)?;
                self.note(dest, ScheduleAction::Backward, Some(mb));
                if dest.row == 0 {
                    self.in_flight[dest.col].remove(&mb);
                    self.completed[dest.col] += 1;
                    self.note(dest, ScheduleAction::Complete, Some(mb));
                    self.inject_next(dest.col)?;
                } else {
                    self.fabric.send(Message::new(
                        dest,
                        WorkerId::new(dest.row - 1, dest.col),
                        mb,
                        MessageKind::GradientBackward,
                        g_in,
                    ))?;
                }
            }
        }
        Ok(())
    }

    /// Degenerate single-stage pipeline: no messages, straight-line compute.
    fn run_single_stage(&mut self) -> Result<(), EngineError> {
        let total = self.run.batch.total_microbatches;
        let mode = self.precision();
        for col in 0..self.run.g_data {
            let widx = self.widx(0, col);
            while let Some((mb, input)) = self.workers[widx].microbatch_queue.pop_front() {
                self.mark_in_flight(col, mb);
                let id = self.workers[widx].id;
                self.note(id, ScheduleAction::Inject, Some(mb));
                let pred = self.workers[widx].shard.forward(mb, &input)?;
                self.note(id, ScheduleAction::Forward, Some(mb));
                let worker = &mut self.workers[widx];
                let targets = worker
                    .targets
                    .remove(&mb)
                    .expect("targets routed at batch start");
                let (loss, grad) = loss_and_grad(
                    &pred,
                    &targets,
                    self.run.net.loss,
                    total,
                    self.loss_scale,
                    mode,
                )?;
                worker.losses.insert(mb, loss);
                worker.shard.backward(mb, &grad)?;
                self.note(id, ScheduleAction::Backward, Some(mb));
                self.in_flight[col].remove(&mb);
                self.completed[col] += 1;
                self.note(id, ScheduleAction::Complete, Some(mb));
            }
        }
        Ok(())
    }

    /// Warmup injection plus the receive-dispatch loop, across all pipelines.
    fn run_inter_layer(&mut self) -> Result<(), EngineError> {
        if self.run.g_inter == 1 {
            return self.run_single_stage();
        }
        for col in 0..self.run.g_data {
            for _ in 0..self.run.pipeline_limit {
                if !self.inject_next(col)? {
                    break;
                }
            }
        }
        let want = self.run.batch.microbatches_per_shard * self.run.g_data;
        while self.completed.iter().sum::<usize>() < want {
            if self.fabric.pending_total() == 0 {
                return Err(EngineError::Deadlock {
                    in_flight: self.in_flight.iter().map(BTreeSet::len).sum(),
                });
            }
            let msg = self.fabric.receive_any()?;
            self.dispatch(msg)?;
        }
        debug_assert_eq!(
            self.fabric.pending_total(),
            0,
            "messages left after completion"
        );
        Ok(())
    }

    fn drain_gradients(&mut self) {
        let quantize = self.run.mixed_precision;
        for i in 0..self.workers.len() {
            let id = self.workers[i].id;
            self.workers[i].shard.drain_accumulate(quantize);
            debug_assert!(
                self.workers[i].shard.stash_is_empty(),
                "stash leaked for {id}"
            );
            self.note(id, ScheduleAction::Drain, None);
        }
    }

    fn collect_loss(&mut self) -> f64 {
        let mut total = T::zero();
        let last_row = self.run.g_inter - 1;
        for col in 0..self.run.g_data {
            let widx = self.widx(last_row, col);
            let losses = std::mem::take(&mut self.workers[widx].losses);
            for (_, l) in losses {
                total += l;
            }
        }
        total.as_f64() / self.loss_scale
    }

    fn any_accumulator_non_finite(&self) -> bool {
        self.workers
            .iter()
            .any(|w| w.shard.grad_accumulator().iter().any(|g| !g.is_finite()))
    }

    /// All-reduce each stage's gradients across its data-parallel group and
    /// run the bucketed optimizer, either chunk-overlapped (chunk size
    /// `coarsening_k * bucket_size`) or sequentially.
    fn reduce_and_optimize(&mut self) -> Result<(), EngineError> {
        let quantize = self.run.mixed_precision;
        let g_data = self.run.g_data;
        let cfg = self.run.optimizer.clone();
        let scale = self.loss_scale;
        for row in 0..self.run.g_inter {
            let group: Vec<WorkerId> = (0..g_data).map(|c| WorkerId::new(row, c)).collect();
            let idxs: Vec<usize> = (0..g_data).map(|c| self.widx(row, c)).collect();
            let mut accs: Vec<Vec<T>> = idxs
                .iter()
                .map(|&i| std::mem::take(self.workers[i].shard.grad_accumulator_mut()))
                .collect();
            let mut opts: Vec<OffloadStore<T>> = idxs
                .iter()
                .map(|&i| std::mem::take(&mut self.workers[i].opt))
                .collect();

            self.reduce_and_optimize_group(
                row, &group, &mut accs, &mut opts, quantize, &cfg, scale,
            )?;

            for (k, &i) in idxs.iter().enumerate() {
                *self.workers[i].shard.grad_accumulator_mut() = std::mem::take(&mut accs[k]);
                self.workers[i].opt = std::mem::take(&mut opts[k]);
                let master = self.workers[i].opt.master().to_vec();
                self.workers[i].shard.set_params_from_flat(&master);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn reduce_and_optimize_group(
        &mut self,
        row: usize,
        group: &[WorkerId],
        accs: &mut [Vec<T>],
        opts: &mut [OffloadStore<T>],
        quantize: bool,
        cfg: &OptimizerConfig,
        scale: f64,
    ) -> Result<(), EngineError> {
        let param_count = accs[0].len();
        let bucket = self.run.bucket_size;
        if self.overlap {
            let chunk_elems = (self.run.coarsening_k * bucket).min(param_count.max(1));
            for (opt, acc) in opts.iter_mut().zip(accs.iter()) {
                opt.begin_step(acc, scale)?;
            }
            let mut events: Vec<(usize, std::ops::Range<usize>)> = Vec::new();
            self.fabric
                .all_reduce_chunked(group, accs, chunk_elems, quantize, |idx, range| {
                    events.push((idx, range));
                })?;
            // The fabric reduces chunks in ascending order; the optimizer
            // consumes each chunk's buckets as soon as it completes.
            for (chunk_idx, range) in events {
                self.note(
                    WorkerId::new(row, 0),
                    ScheduleAction::ReduceChunk,
                    Some(chunk_idx as u64),
                );
                let bucket_lo = range.start / bucket;
                let bucket_hi = range.end.div_ceil(bucket);
                for (opt, acc) in opts.iter_mut().zip(accs.iter()) {
                    opt.step_bucket_range(bucket_lo..bucket_hi, acc, scale, cfg);
                }
                self.note(
                    WorkerId::new(row, 0),
                    ScheduleAction::OptimizerBuckets,
                    Some(chunk_idx as u64),
                );
            }
            for opt in opts.iter_mut() {
                opt.finish_step();
            }
        } else {
            self.fabric.all_reduce(group, accs, quantize)?;
            self.note(WorkerId::new(row, 0), ScheduleAction::ReduceChunk, Some(0));
            for (opt, acc) in opts.iter_mut().zip(accs.iter()) {
                opt.bucketed_step(acc, scale, cfg)?;
            }
            self.note(
                WorkerId::new(row, 0),
                ScheduleAction::OptimizerBuckets,
                Some(0),
            );
        }
        Ok(())
    }

    /// Runs one full training step on `batch`.
    pub fn train_step(&mut self, batch: &DataBatch<T>) -> Result<BatchResult, EngineError> {
        self.schedule.clear();
        self.seq = 0;
        for w in &mut self.workers {
            w.shard.zero_grad();
            w.opt.clear_events();
        }
        for set in &mut self.in_flight {
            set.clear();
        }
        self.completed.iter_mut().for_each(|c| *c = 0);

        self.distribute(batch);
        self.run_inter_layer()?;
        self.drain_gradients();
        let loss = self.collect_loss();

        // A non-finite accumulator anywhere skips the whole optimizer step,
        // mirroring the monolithic overflow policy for every overlap mode.
        if self.any_accumulator_non_finite() {
            if self.run.optimizer.dynamic_loss_scale {
                self.loss_scale /= 2.0;
            }
            return Ok(BatchResult {
                loss,
                grads_reduced: false,
                skipped_overflow: true,
            });
        }

        self.reduce_and_optimize()?;
        Ok(BatchResult {
            loss,
            grads_reduced: true,
            skipped_overflow: false,
        })
    }

    /// Runs `steps` batches from `next_batch`, reporting one record per step.
    pub fn train(
        &mut self,
        steps: u64,
        mut next_batch: impl FnMut(u64) -> DataBatch<T>,
    ) -> Result<Vec<StepRecord>, EngineError> {
        let mut records = Vec::with_capacity(steps as usize);
        for step in 0..steps {
            let batch = next_batch(step);
            let result = self.train_step(&batch)?;
            records.push(StepRecord {
                step,
                loss: result.loss,
                skipped_overflow: result.skipped_overflow,
                loss_scale: self.loss_scale,
                p2p_bytes_sent_total: self.fabric.total_bytes_sent(),
                allreduce_bytes_total: self
                    .fabric
                    .all_stats()
                    .iter()
                    .map(|s| s.allreduce_bytes)
                    .sum(),
                in_flight_peak: self.in_flight_peak,
            });
        }
        Ok(records)
    }

    /// True when every backward in the last step preceded the first reduce
    /// or optimizer event: the flush-before-update discipline.
    pub fn flushed_before_optimizer(&self) -> bool {
        let first_reduce = self
            .schedule
            .iter()
            .find(|e| {
                matches!(
                    e.action,
                    ScheduleAction::ReduceChunk | ScheduleAction::OptimizerBuckets
                )
            })
            .map(|e| e.seq);
        let last_backward = self
            .schedule
            .iter()
            .filter(|e| matches!(e.action, ScheduleAction::Backward))
            .map(|e| e.seq)
            .max();
        match (last_backward, first_reduce) {
            (Some(b), Some(r)) => b < r,
            _ => true,
        }
    }
}
