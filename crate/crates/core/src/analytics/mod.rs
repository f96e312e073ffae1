//! Memory ledger and performance model: activation-unit accounting, model
//! state byte accounting, analytic communication/computation counters, simple
//! transformer throughput metrics, and the discrete-event batch simulator.

pub mod sim;

pub use sim::{simulate_batch, PerfReport, StageTiming};

use serde::{Deserialize, Serialize};

use crate::config::{ConfigViolation, ValidatedRun};

/// Time/flop model of the simulated hardware. All rates are per second.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    /// Flops charged per weight element in a forward pass (multiply + add).
    pub flops_per_weight_forward: u64,
    /// Backward compute cost as a multiple of forward cost.
    pub backward_multiplier: u64,
    pub link_latency_s: f64,
    pub link_bandwidth_bytes_per_s: f64,
    /// Fixed cost of issuing one collective call.
    pub collective_overhead_s: f64,
    pub host_device_bandwidth_bytes_per_s: f64,
    pub device_flops_per_s: f64,
    /// Optimizer arithmetic per parameter (Adam reads/writes + math).
    pub optimizer_flops_per_param: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            flops_per_weight_forward: 2,
            backward_multiplier: 2,
            link_latency_s: 5e-6,
            link_bandwidth_bytes_per_s: 5e9,
            collective_overhead_s: 2e-5,
            host_device_bandwidth_bytes_per_s: 20e9,
            device_flops_per_s: 125e12,
            optimizer_flops_per_param: 16,
        }
    }
}

impl CostModel {
    pub fn is_valid(&self) -> bool {
        self.flops_per_weight_forward > 0
            && self.backward_multiplier >= 1
            && self.link_latency_s > 0.0
            && self.link_bandwidth_bytes_per_s > 0.0
            && self.collective_overhead_s > 0.0
            && self.host_device_bandwidth_bytes_per_s > 0.0
            && self.device_flops_per_s > 0.0
            && self.optimizer_flops_per_param > 0
    }
}

/// Peak activation units held per worker: `N/ac + 1 + ac` once the pipeline
/// is full (one unit = one microbatch activation at one layer boundary).
pub fn activation_units(
    num_layers: usize,
    g_inter: usize,
    ac: usize,
) -> Result<u64, ConfigViolation> {
    if g_inter == 0 || num_layers == 0 {
        return Err(ConfigViolation::ZeroField {
            field: "network.layers",
        });
    }
    if num_layers % g_inter != 0 {
        return Err(ConfigViolation::NonDivisibleLayers {
            num_layers,
            g_inter,
        });
    }
    let per_worker = num_layers / g_inter;
    if ac == 0 || per_worker % ac != 0 {
        return Err(ConfigViolation::BadCheckpointInterval {
            checkpoint_interval: ac,
            layers_per_worker: per_worker,
        });
    }
    // g_inter in-flight microbatches each stash per_worker/ac checkpoints,
    // plus one roving activation and up to ac recompute buffers.
    Ok((g_inter as u64) * (per_worker / ac) as u64 + 1 + ac as u64)
}

/// Device bytes for parameters, gradients and optimizer state per worker:
/// 20 phi unoptimized, 4 phi + 16 bucket_size with host offload.
pub fn model_state_bytes(phi: u64, optimized: bool, bucket_size: u64) -> u64 {
    if optimized {
        4 * phi + 16 * bucket_size
    } else {
        20 * phi
    }
}

/// Where a component lives in the offload scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Residency {
    Device,
    Host,
    Deleted,
}

#[derive(Debug, Clone, Serialize)]
pub struct LedgerRow {
    pub component: &'static str,
    pub residency: Residency,
    pub bytes: u64,
}

/// Per-worker byte accounting in the deployed-precision model
/// (2-byte half values, 4-byte full values), independent of the working
/// precision the emulation computes in.
#[derive(Debug, Clone, Serialize)]
pub struct MemoryLedger {
    pub phi: u64,
    pub bucket_size: u64,
    pub optimized: bool,
    pub rows: Vec<LedgerRow>,
    pub activation_units: u64,
    pub activation_unit_bytes: u64,
    pub device_model_state_bytes: u64,
    pub device_activation_bytes: u64,
    pub device_total_bytes: u64,
    pub host_bytes: u64,
}

/// Builds the ledger for one worker of a validated run.
pub fn memory_ledger(run: &ValidatedRun, optimized: bool) -> MemoryLedger {
    let phi = run.max_worker_param_count();
    let bsize = run.bucket_size as u64;
    let units = activation_units(run.net.num_layers, run.g_inter, run.checkpoint_interval)
        .expect("validated run has a consistent checkpoint interval");
    let unit_bytes = run.net.uniform_activation_bytes * run.microbatch_size as u64;

    let mut rows = vec![
        LedgerRow {
            component: "theta16",
            residency: Residency::Device,
            bytes: 2 * phi,
        },
        LedgerRow {
            component: "grad16",
            residency: Residency::Device,
            bytes: 2 * phi,
        },
    ];
    if optimized {
        rows.push(LedgerRow {
            component: "theta",
            residency: Residency::Host,
            bytes: 4 * phi,
        });
        rows.push(LedgerRow {
            component: "grad",
            residency: Residency::Deleted,
            bytes: 0,
        });
        rows.push(LedgerRow {
            component: "opt_state",
            residency: Residency::Host,
            bytes: 8 * phi,
        });
        rows.push(LedgerRow {
            component: "bucket_scratch",
            residency: Residency::Device,
            bytes: 16 * bsize,
        });
    } else {
        rows.push(LedgerRow {
            component: "theta",
            residency: Residency::Device,
            bytes: 4 * phi,
        });
        rows.push(LedgerRow {
            component: "grad",
            residency: Residency::Device,
            bytes: 4 * phi,
        });
        rows.push(LedgerRow {
            component: "opt_state",
            residency: Residency::Device,
            bytes: 8 * phi,
        });
    }
    let device_model_state_bytes: u64 = rows
        .iter()
        .filter(|r| r.residency == Residency::Device)
        .map(|r| r.bytes)
        .sum();
    debug_assert_eq!(
        device_model_state_bytes,
        model_state_bytes(phi, optimized, bsize)
    );
    let device_activation_bytes = units * unit_bytes;
    rows.push(LedgerRow {
        component: "activations",
        residency: Residency::Device,
        bytes: device_activation_bytes,
    });
    let host_bytes = rows
        .iter()
        .filter(|r| r.residency == Residency::Host)
        .map(|r| r.bytes)
        .sum();
    MemoryLedger {
        phi,
        bucket_size: bsize,
        optimized,
        rows,
        activation_units: units,
        activation_unit_bytes: unit_bytes,
        device_model_state_bytes,
        device_activation_bytes,
        device_total_bytes: device_model_state_bytes + device_activation_bytes,
        host_bytes,
    }
}

/// Closed-form per-worker traffic and compute for one batch.
#[derive(Debug, Clone, Serialize)]
pub struct CommCompCounters {
    /// Samples each pipeline processes.
    pub samples_per_pipeline: u64,
    /// Point-to-point bytes (sent + received) per stage.
    pub per_stage_p2p_bytes: Vec<u64>,
    /// Traffic of a fully interior stage; the per-worker figure used by the
    /// proportionality analysis.
    pub p2p_bytes_per_worker: u64,
    /// Compute per worker (identical for every stage of a uniform network).
    pub flops_per_worker: u128,
    /// flops / interior bytes.
    pub comp_to_comm_ratio: f64,
}

/// Forward flops of one stage for a single sample.
pub(crate) fn stage_forward_flops_per_sample(run: &ValidatedRun, row: usize) -> u128 {
    run.shard_layers(row)
        .map(|l| {
            let (i, o) = run.net.layer_dims[l];
            run.cost.flops_per_weight_forward as u128 * i as u128 * o as u128
        })
        .sum()
}

/// Total compute charged per stage for one microbatch in one direction.
pub(crate) fn stage_task_flops(run: &ValidatedRun, row: usize, backward: bool) -> u128 {
    let fwd = stage_forward_flops_per_sample(run, row) * run.microbatch_size as u128;
    if backward {
        // Recompute regenerates the segment activations when checkpointing
        // is coarser than one layer.
        let recompute = if run.checkpoint_interval > 1 { fwd } else { 0 };
        run.cost.backward_multiplier as u128 * fwd + recompute
    } else {
        fwd
    }
}

/// Analytic counters under the uniform-activation assumption.
pub fn comm_comp_counters(run: &ValidatedRun) -> CommCompCounters {
    let samples = (run.batch.batch_size / run.g_data) as u64;
    let act = run.net.uniform_activation_bytes;
    let mps = run.batch.microbatches_per_shard as u128;
    let per_stage_p2p_bytes: Vec<u64> = (0..run.g_inter)
        .map(|row| {
            let boundaries = (row > 0) as u64 + (row + 1 < run.g_inter) as u64;
            2 * samples * act * boundaries
        })
        .collect();
    let p2p_bytes_per_worker = per_stage_p2p_bytes.iter().copied().max().unwrap_or(0);
    let flops_per_worker = (stage_task_flops(run, 0, false) + stage_task_flops(run, 0, true)) * mps;
    let ratio = if p2p_bytes_per_worker == 0 {
        f64::INFINITY
    } else {
        flops_per_worker as f64 / p2p_bytes_per_worker as f64
    };
    CommCompCounters {
        samples_per_pipeline: samples,
        per_stage_p2p_bytes,
        p2p_bytes_per_worker,
        flops_per_worker,
        comp_to_comm_ratio: ratio,
    }
}

/// Time to push 300 billion tokens at a measured batch time:
/// `3e11 * t / (b * s)` seconds.
pub fn estimated_training_time(batch_time_s: f64, batch_size: f64, sequence_length: f64) -> f64 {
    assert!(batch_time_s > 0.0 && batch_size > 0.0 && sequence_length > 0.0);
    3e11 * batch_time_s / (batch_size * sequence_length)
}

/// Transformer flop-rate lower bound:
/// `96 b s l h^2 / t * (1 + s/(6h) + V/(16 l h))`.
pub fn transformer_flops_per_s(
    batch_size: f64,
    sequence_length: f64,
    layers: f64,
    hidden: f64,
    vocab: f64,
    batch_time_s: f64,
) -> f64 {
    assert!(batch_time_s > 0.0);
    96.0 * batch_size * sequence_length * layers * hidden * hidden / batch_time_s
        * (1.0 + sequence_length / (6.0 * hidden) + vocab / (16.0 * layers * hidden))
}

/// Flop rate plus the achieved fraction of aggregate peak throughput.
#[allow(clippy::too_many_arguments)]
pub fn flops_and_peak_fraction(
    batch_size: f64,
    sequence_length: f64,
    layers: f64,
    hidden: f64,
    vocab: f64,
    batch_time_s: f64,
    per_device_peak_flops: f64,
    devices: f64,
) -> (f64, f64) {
    let rate = transformer_flops_per_s(
        batch_size,
        sequence_length,
        layers,
        hidden,
        vocab,
        batch_time_s,
    );
    (rate, rate / (per_device_peak_flops * devices))
}
