//! Run configuration: parsing, validation and normalization.
//!
//! A run is described by a single TOML file with `[parallel]`, `[network]`,
//! `[batch]`, `[optimizer]` and optional `[cost]` sections. Unknown keys are
//! rejected. `validate` turns the raw sections into a [`ValidatedRun`] that
//! every other module consumes read-only.

use std::fmt;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analytics::CostModel;
use crate::nn::{Activation, LossKind};

/// Raw `[parallel]` section: the 2D grid and the phase hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParallelConfig {
    /// Pipeline depth (workers per pipeline).
    pub g_inter: usize,
    /// Number of data-parallel pipelines.
    pub g_data: usize,
    /// Samples per microbatch.
    pub microbatch_size: usize,
    /// Maximum microbatches in flight per pipeline; defaults to `g_inter`.
    #[serde(default)]
    pub pipeline_limit: Option<usize>,
    /// Parameters per optimizer offload bucket.
    pub bucket_size: usize,
    /// All-reduce coarsening factor: buckets reduced per chunked call.
    #[serde(default = "default_coarsening")]
    pub coarsening_k: usize,
    /// Activation checkpoint interval; defaults to the factor of the
    /// per-worker depth closest to sqrt(total layers).
    #[serde(default)]
    pub checkpoint_interval: Option<usize>,
    /// Optional explicit worker count, cross-checked against the grid.
    #[serde(default)]
    pub workers: Option<usize>,
}

fn default_coarsening() -> usize {
    1
}

/// Raw `[network]` section. Either `layer_dims` or `layers` + `width`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    #[serde(default)]
    pub layers: Option<usize>,
    #[serde(default)]
    pub width: Option<usize>,
    #[serde(default)]
    pub layer_dims: Option<Vec<[usize; 2]>>,
    /// Bytes of one sample's activation at a layer boundary; defaults to
    /// the first layer's output width times the modeled element width.
    #[serde(default)]
    pub uniform_activation_bytes: Option<u64>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
}

fn default_activation() -> Activation {
    Activation::Tanh
}

fn default_loss() -> LossKind {
    LossKind::SquaredError
}

/// Raw `[batch]` section.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchSection {
    pub batch_size: usize,
}

/// `[optimizer]` section; also consumed directly by the optimizer module.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Mixed-precision loss scaling factor.
    #[serde(default = "default_loss_scale")]
    pub loss_scale: f64,
    /// Halve the loss scale after an overflow-skipped step. Off by default.
    #[serde(default)]
    pub dynamic_loss_scale: bool,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}
fn default_loss_scale() -> f64 {
    1.0
}

/// Whole configuration file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Emulate half-precision forward/backward with loss scaling.
    #[serde(default)]
    pub mixed_precision: bool,
    pub parallel: ParallelConfig,
    pub network: NetworkConfig,
    pub batch: BatchSection,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub cost: CostModel,
}

/// Validated network description with derived totals.
#[derive(Debug, Clone, Serialize)]
pub struct NetworkSpec {
    pub num_layers: usize,
    /// (input width, output width) per layer; consecutive widths chain.
    pub layer_dims: Vec<(usize, usize)>,
    pub uniform_activation_bytes: u64,
    pub parameter_count_total: u64,
    pub activation: Activation,
    pub loss: LossKind,
}

impl NetworkSpec {
    /// Uniform-width network used by most experiments.
    pub fn uniform(
        num_layers: usize,
        width: usize,
        activation: Activation,
        loss: LossKind,
    ) -> Self {
        let layer_dims = vec![(width, width); num_layers];
        let parameter_count_total = param_count(&layer_dims);
        Self {
            num_layers,
            layer_dims,
            uniform_activation_bytes: 0,
            parameter_count_total,
            activation,
            loss,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims.first().map(|d| d.0).unwrap_or(0)
    }

    pub fn output_dim(&self) -> usize {
        self.layer_dims.last().map(|d| d.1).unwrap_or(0)
    }

    /// Element count of weights plus bias for one layer.
    pub fn layer_param_count(&self, layer: usize) -> u64 {
        let (i, o) = self.layer_dims[layer];
        (i as u64) * (o as u64) + o as u64
    }

    /// True when every layer boundary carries the same activation width.
    pub fn has_uniform_activations(&self) -> bool {
        let w = self.input_dim();
        self.layer_dims.iter().all(|&(i, o)| i == w && o == w)
    }
}

fn param_count(dims: &[(usize, usize)]) -> u64 {
    dims.iter()
        .map(|&(i, o)| (i as u64) * (o as u64) + o as u64)
        .sum()
}

/// Validated batch partitioning with derived sizes.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct BatchConfig {
    pub batch_size: usize,
    /// Samples per pipeline: `batch_size / g_data`.
    pub shard_size: usize,
    /// Microbatches each pipeline processes: `shard_size / microbatch_size`.
    pub microbatches_per_shard: usize,
    /// Microbatches in the whole batch: `batch_size / microbatch_size`.
    pub total_microbatches: usize,
}

/// One violation found during validation.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigViolation {
    #[error("grid mismatch: g_inter {g_inter} * g_data {g_data} != workers {workers}")]
    GridMismatch {
        g_inter: usize,
        g_data: usize,
        workers: usize,
    },
    #[error("batch size {batch_size} is not divisible by g_data {g_data}")]
    NonDivisibleBatch { batch_size: usize, g_data: usize },
    #[error("layer count {num_layers} is not divisible by g_inter {g_inter}")]
    NonDivisibleLayers { num_layers: usize, g_inter: usize },
    #[error(
        "checkpoint interval {checkpoint_interval} does not divide the per-worker depth {layers_per_worker}"
    )]
    BadCheckpointInterval {
        checkpoint_interval: usize,
        layers_per_worker: usize,
    },
    #[error("microbatch size {microbatch_size} does not divide shard size {shard_size}")]
    NonDivisibleMicrobatch {
        microbatch_size: usize,
        shard_size: usize,
    },
    #[error("layer {index} input width {got} does not match previous output width {expected}")]
    ChainMismatch {
        index: usize,
        got: usize,
        expected: usize,
    },
    #[error("network shape underspecified: provide layer_dims or layers + width")]
    UnderspecifiedNetwork,
    #[error("{field} must be positive")]
    ZeroField { field: &'static str },
    #[error("{field} invalid: {detail}")]
    BadValue { field: &'static str, detail: String },
}

/// Normalized run descriptor shared read-only by the engine, the optimizer,
/// the fabric and the performance model.
#[derive(Debug, Clone, Serialize)]
pub struct ValidatedRun {
    pub g_inter: usize,
    pub g_data: usize,
    pub workers: usize,
    pub microbatch_size: usize,
    pub pipeline_limit: usize,
    pub bucket_size: usize,
    pub coarsening_k: usize,
    pub checkpoint_interval: usize,
    pub mixed_precision: bool,
    pub net: NetworkSpec,
    pub batch: BatchConfig,
    pub optimizer: OptimizerConfig,
    pub cost: CostModel,
}

impl ValidatedRun {
    pub fn layers_per_worker(&self) -> usize {
        self.net.num_layers / self.g_inter
    }

    /// Modeled byte width of one activation/gradient element on the wire.
    pub fn element_bytes(&self) -> u64 {
        if self.mixed_precision {
            2
        } else {
            4
        }
    }

    /// Global layer indices owned by pipeline stage `row`.
    pub fn shard_layers(&self, row: usize) -> Range<usize> {
        let per = self.layers_per_worker();
        row * per..(row + 1) * per
    }

    /// Parameter elements owned by stage `row`.
    pub fn worker_param_count(&self, row: usize) -> u64 {
        self.shard_layers(row)
            .map(|l| self.net.layer_param_count(l))
            .sum()
    }

    /// Largest per-worker parameter count across stages.
    pub fn max_worker_param_count(&self) -> u64 {
        (0..self.g_inter)
            .map(|r| self.worker_param_count(r))
            .max()
            .unwrap_or(0)
    }
}

/// Ascending divisors of `n`.
pub fn divisors(n: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for d in 1..=n {
        if n % d == 0 {
            out.push(d);
        }
    }
    out
}

/// Picks the checkpoint interval: the factor of `num_layers / g_inter`
/// closest to sqrt(num_layers), ties broken toward the smaller factor.
///
/// Comparisons are exact: for factors d < e, d is strictly closer to
/// sqrt(N) iff (d + e)^2 > 4N, and (d + e)^2 == 4N is a tie.
pub fn select_checkpoint_interval(
    num_layers: usize,
    g_inter: usize,
) -> Result<usize, ConfigViolation> {
    if num_layers == 0 {
        return Err(ConfigViolation::ZeroField {
            field: "network.layers",
        });
    }
    if g_inter == 0 {
        return Err(ConfigViolation::ZeroField {
            field: "parallel.g_inter",
        });
    }
    if num_layers % g_inter != 0 {
        return Err(ConfigViolation::NonDivisibleLayers {
            num_layers,
            g_inter,
        });
    }
    let per_worker = num_layers / g_inter;
    let n = num_layers as u128;
    let mut best = 1usize;
    for d in divisors(per_worker) {
        let (lo, hi) = (best.min(d), best.max(d));
        let sum_sq = ((lo + hi) as u128) * ((lo + hi) as u128);
        // lo is closer (or tied) with sqrt(N) iff (lo + hi)^2 >= 4N.
        let winner = if sum_sq >= 4 * n { lo } else { hi };
        best = winner;
    }
    Ok(best)
}

/// Validates and normalizes a raw configuration.
///
/// Returns the run descriptor, or every violation found.
pub fn validate(cfg: &RunConfig) -> Result<ValidatedRun, Vec<ConfigViolation>> {
    let mut violations = Vec::new();
    let p = &cfg.parallel;

    for (value, field) in [
        (p.g_inter, "parallel.g_inter"),
        (p.g_data, "parallel.g_data"),
        (p.microbatch_size, "parallel.microbatch_size"),
        (p.bucket_size, "parallel.bucket_size"),
        (p.coarsening_k, "parallel.coarsening_k"),
        (cfg.batch.batch_size, "batch.batch_size"),
    ] {
        if value == 0 {
            violations.push(ConfigViolation::ZeroField { field });
        }
    }
    if p.pipeline_limit == Some(0) {
        violations.push(ConfigViolation::ZeroField {
            field: "parallel.pipeline_limit",
        });
    }
    if p.checkpoint_interval == Some(0) {
        violations.push(ConfigViolation::ZeroField {
            field: "parallel.checkpoint_interval",
        });
    }

    // Grid.
    let derived_workers = p.g_inter * p.g_data;
    let workers = p.workers.unwrap_or(derived_workers);
    if workers != derived_workers {
        violations.push(ConfigViolation::GridMismatch {
            g_inter: p.g_inter,
            g_data: p.g_data,
            workers,
        });
    }

    // Network shape.
    let layer_dims: Vec<(usize, usize)> = match (
        &cfg.network.layer_dims,
        cfg.network.layers,
        cfg.network.width,
    ) {
        (Some(dims), _, _) => dims.iter().map(|d| (d[0], d[1])).collect(),
        (None, Some(l), Some(w)) => vec![(w, w); l],
        _ => {
            violations.push(ConfigViolation::UnderspecifiedNetwork);
            Vec::new()
        }
    };
    if let Some(l) = cfg.network.layers {
        if cfg.network.layer_dims.is_some() && l != layer_dims.len() {
            violations.push(ConfigViolation::BadValue {
                field: "network.layers",
                detail: format!(
                    "{} does not match layer_dims length {}",
                    l,
                    layer_dims.len()
                ),
            });
        }
    }
    let num_layers = layer_dims.len();
    if num_layers == 0 {
        violations.push(ConfigViolation::ZeroField {
            field: "network.layers",
        });
    }
    for (idx, pair) in layer_dims.windows(2).enumerate() {
        if pair[0].1 != pair[1].0 {
            violations.push(ConfigViolation::ChainMismatch {
                index: idx + 1,
                got: pair[1].0,
                expected: pair[0].1,
            });
        }
    }
    for (idx, &(i, o)) in layer_dims.iter().enumerate() {
        if i == 0 || o == 0 {
            violations.push(ConfigViolation::BadValue {
                field: "network.layer_dims",
                detail: format!("layer {idx} has zero width"),
            });
        }
    }

    // Layer partitioning.
    if p.g_inter > 0 && num_layers > 0 && num_layers % p.g_inter != 0 {
        violations.push(ConfigViolation::NonDivisibleLayers {
            num_layers,
            g_inter: p.g_inter,
        });
    }

    // Batch partitioning.
    let batch_size = cfg.batch.batch_size;
    let mut shard_size = 0;
    if p.g_data > 0 && batch_size > 0 {
        if batch_size % p.g_data != 0 {
            violations.push(ConfigViolation::NonDivisibleBatch {
                batch_size,
                g_data: p.g_data,
            });
        } else {
            shard_size = batch_size / p.g_data;
            if p.microbatch_size > 0 && shard_size % p.microbatch_size != 0 {
                violations.push(ConfigViolation::NonDivisibleMicrobatch {
                    microbatch_size: p.microbatch_size,
                    shard_size,
                });
            }
        }
    }

    // Checkpoint interval.
    let mut checkpoint_interval = 1;
    if p.g_inter > 0 && num_layers > 0 && num_layers % p.g_inter == 0 {
        let layers_per_worker = num_layers / p.g_inter;
        checkpoint_interval = match p.checkpoint_interval {
            Some(ac) => {
                if ac == 0 || layers_per_worker % ac != 0 {
                    violations.push(ConfigViolation::BadCheckpointInterval {
                        checkpoint_interval: ac,
                        layers_per_worker,
                    });
                    1
                } else {
                    ac
                }
            }
            None => select_checkpoint_interval(num_layers, p.g_inter).unwrap_or(1),
        };
    }

    // Optimizer ranges.
    let o = &cfg.optimizer;
    let finite = [
        (o.learning_rate, "optimizer.learning_rate"),
        (o.beta1, "optimizer.beta1"),
        (o.beta2, "optimizer.beta2"),
        (o.epsilon, "optimizer.epsilon"),
        (o.weight_decay, "optimizer.weight_decay"),
        (o.loss_scale, "optimizer.loss_scale"),
    ];
    for (v, field) in finite {
        if !v.is_finite() {
            violations.push(ConfigViolation::BadValue {
                field,
                detail: format!("{v} is not finite"),
            });
        }
    }
    for (v, field) in [(o.beta1, "optimizer.beta1"), (o.beta2, "optimizer.beta2")] {
        if !(0.0 < v && v < 1.0) {
            violations.push(ConfigViolation::BadValue {
                field,
                detail: format!("{v} not in (0, 1)"),
            });
        }
    }
    if o.epsilon <= 0.0 {
        violations.push(ConfigViolation::BadValue {
            field: "optimizer.epsilon",
            detail: "must be > 0".into(),
        });
    }
    if o.weight_decay < 0.0 {
        violations.push(ConfigViolation::BadValue {
            field: "optimizer.weight_decay",
            detail: "must be >= 0".into(),
        });
    }
    if o.loss_scale <= 0.0 {
        violations.push(ConfigViolation::BadValue {
            field: "optimizer.loss_scale",
            detail: "must be > 0".into(),
        });
    }
    if !cfg.cost.is_valid() {
        violations.push(ConfigViolation::BadValue {
            field: "cost",
            detail: "all cost-model parameters must be positive".into(),
        });
    }

    if !violations.is_empty() {
        return Err(violations);
    }

    let element_bytes = if cfg.mixed_precision { 2 } else { 4 };
    let uniform_activation_bytes = cfg
        .network
        .uniform_activation_bytes
        .unwrap_or(layer_dims[0].1 as u64 * element_bytes);

    let net = NetworkSpec {
        num_layers,
        parameter_count_total: param_count(&layer_dims),
        layer_dims,
        uniform_activation_bytes,
        activation: cfg.network.activation,
        loss: cfg.network.loss,
    };
    let batch = BatchConfig {
        batch_size,
        shard_size,
        microbatches_per_shard: shard_size / p.microbatch_size,
        total_microbatches: batch_size / p.microbatch_size,
    };
    Ok(ValidatedRun {
        g_inter: p.g_inter,
        g_data: p.g_data,
        workers,
        microbatch_size: p.microbatch_size,
        pipeline_limit: p.pipeline_limit.unwrap_or(p.g_inter),
        bucket_size: p.bucket_size,
        coarsening_k: p.coarsening_k,
        checkpoint_interval,
        mixed_precision: cfg.mixed_precision,
        net,
        batch,
        optimizer: cfg.optimizer.clone(),
        cost: cfg.cost.clone(),
    })
}

/// Errors from reading or parsing a configuration file.
#[derive(Debug, thiserror::Error)]
pub enum ConfigFileError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
    #[error("bad override '{0}': expected dotted.key=value")]
    BadOverride(String),
}

/// Parses a configuration from TOML text with optional `key.path=value`
/// overrides applied before deserialization.
pub fn parse_config(
    text: &str,
    source_name: &str,
    overrides: &[String],
) -> Result<RunConfig, ConfigFileError> {
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| ConfigFileError::Parse {
            path: source_name.to_string(),
            message: e.to_string(),
        })?;
    let mut value = toml::Value::Table(table);
    for ov in overrides {
        apply_override(&mut value, ov)?;
    }
    value
        .try_into()
        .map_err(|e: toml::de::Error| ConfigFileError::Parse {
            path: source_name.to_string(),
            message: e.to_string(),
        })
}

/// Loads and parses a configuration file.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig, ConfigFileError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigFileError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config(&text, &path.display().to_string(), overrides)
}

fn apply_override(root: &mut toml::Value, spec: &str) -> Result<(), ConfigFileError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| ConfigFileError::BadOverride(spec.to_string()))?;
    let path = path.trim();
    if path.is_empty() {
        return Err(ConfigFileError::BadOverride(spec.to_string()));
    }
    // Parse the right-hand side as a TOML literal; fall back to a string.
    let parsed: toml::Value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|t| t.get("v").cloned())
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));

    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| ConfigFileError::BadOverride(spec.to_string()))?;
        node = table
            .entry(part.to_string())
            .or_insert(toml::Value::Table(Default::default()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| ConfigFileError::BadOverride(spec.to_string()))?;
    table.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

impl fmt::Display for ValidatedRun {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}x{} grid, {} layers, batch {} (shard {}, microbatch {}), pipeline_limit {}, ac {}, bucket {}, k {}",
            self.g_inter,
            self.g_data,
            self.net.num_layers,
            self.batch.batch_size,
            self.batch.shard_size,
            self.microbatch_size,
            self.pipeline_limit,
            self.checkpoint_interval,
            self.bucket_size,
            self.coarsening_k,
        )
    }
}
