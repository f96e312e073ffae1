//! Discrete-event simulator checks: the hand-simulated two-stage pipeline
//! schedule, counter consistency with the closed forms, the pipeline-depth
//! trends and the all-reduce coarsening sweep.

use pipegrid::analytics::{comm_comp_counters, simulate_batch, CostModel};
use pipegrid::config::{
    validate, BatchSection, NetworkConfig, OptimizerConfig, ParallelConfig, RunConfig, ValidatedRun,
};
use pipegrid::nn::{Activation, LossKind};

fn run_with(
    g_inter: usize,
    g_data: usize,
    microbatch: usize,
    layers: usize,
    width: usize,
    batch: usize,
    ac: Option<usize>,
    bucket: usize,
    k: usize,
    mixed: bool,
    cost: CostModel,
) -> ValidatedRun {
    let cfg = RunConfig {
        mixed_precision: mixed,
        parallel: ParallelConfig {
            g_inter,
            g_data,
            microbatch_size: microbatch,
            pipeline_limit: None,
            bucket_size: bucket,
            coarsening_k: k,
            checkpoint_interval: ac,
            workers: None,
        },
        network: NetworkConfig {
            layers: Some(layers),
            width: Some(width),
            layer_dims: None,
            uniform_activation_bytes: None,
            activation: Activation::Tanh,
            loss: LossKind::SquaredError,
        },
        batch: BatchSection { batch_size: batch },
        optimizer: OptimizerConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            loss_scale: 1.0,
            dynamic_loss_scale: false,
        },
        cost,
    };
    validate(&cfg).expect("valid perf config")
}

/// Unit-cost model: forward takes exactly 1 s per stage, backward 2 s, and
/// message transit collapses below f64 resolution.
fn unit_cost(width: usize, microbatch: usize) -> CostModel {
    CostModel {
        device_flops_per_s: (2 * width * width * microbatch) as f64,
        link_latency_s: 1e-300,
        link_bandwidth_bytes_per_s: 1e300,
        ..CostModel::default()
    }
}

#[test]
fn two_stage_two_microbatch_schedule_matches_the_hand_simulation() {
    // Stage cost: forward 1 s, backward 2 s, transit ~ 0. Hand schedule:
    //   stage 0: F1 [0,1) F2 [1,2) B1 [4,6) B2 [7,9)
    //   stage 1: F1 [1,2) B1 [2,4) F2 [4,5) B2 [5,7)
    let run = run_with(2, 1, 1, 2, 8, 2, Some(1), 64, 1, false, unit_cost(8, 1));
    let report = simulate_batch(&run);
    assert_eq!(report.inter_layer_time_s, 9.0);
    assert_eq!(report.per_stage[0].first_task_start_s, 0.0);
    assert_eq!(report.per_stage[1].first_task_start_s, 1.0);
    assert_eq!(report.warmup_idle_s, 1.0);
    // Each stage computes 2 forwards and 2 backwards: 6 s busy in phase 1.
    let opt = report.optimizer_time_s;
    assert_eq!(report.per_stage[0].busy_s - opt, 6.0);
    assert_eq!(report.per_stage[1].busy_s - opt, 6.0);
    for s in &report.per_stage {
        assert!((s.busy_s + s.idle_s - report.batch_time_s).abs() < 1e-12);
    }
}

#[test]
fn single_worker_batch_time_is_forward_backward_plus_optimizer() {
    let run = run_with(1, 1, 1, 2, 8, 1, Some(1), 64, 1, false, unit_cost(8, 1));
    let report = simulate_batch(&run);
    // 2 layers on one stage: forward 2 s, backward 4 s, no communication.
    assert_eq!(report.inter_layer_time_s, 6.0);
    assert_eq!(report.allreduce_time_s, 0.0);
    assert_eq!(report.collective_calls, 0);
    assert_eq!(report.batch_time_s, 6.0 + report.optimizer_time_s);
    assert!(report.optimizer_time_s > 0.0);
}

#[test]
fn simulated_counters_equal_the_closed_forms_exactly() {
    for (g_inter, g_data) in [(2usize, 4usize), (4, 2), (8, 1)] {
        let run = run_with(
            g_inter,
            g_data,
            2,
            8,
            16,
            64,
            Some(1),
            32,
            2,
            false,
            CostModel::default(),
        );
        let report = simulate_batch(&run);
        let analytic = comm_comp_counters(&run);
        assert_eq!(report.p2p_bytes_per_stage, analytic.per_stage_p2p_bytes);
        for (row, &f) in report.flops_per_stage.iter().enumerate() {
            assert_eq!(f, analytic.flops_per_worker, "row {row}");
        }
    }
}

#[test]
fn communication_scales_linearly_with_pipeline_depth_and_compute_does_not() {
    // Fixed 16 workers, pipelines deep enough to have interior stages;
    // checkpointing pinned so the recompute convention cannot vary.
    let runs: Vec<ValidatedRun> = [4usize, 8, 16]
        .iter()
        .map(|&g| {
            run_with(
                g,
                16 / g,
                1,
                16,
                16,
                64,
                Some(1),
                32,
                1,
                false,
                CostModel::default(),
            )
        })
        .collect();
    let counters: Vec<_> = runs.iter().map(comm_comp_counters).collect();
    let flops0 = counters[0].flops_per_worker;
    let bytes_per_g = counters[0].p2p_bytes_per_worker / 4;
    for (run, c) in runs.iter().zip(&counters) {
        assert_eq!(
            c.flops_per_worker, flops0,
            "flops must be independent of g_inter"
        );
        assert_eq!(
            c.p2p_bytes_per_worker,
            bytes_per_g * run.g_inter as u64,
            "interior traffic must be proportional to g_inter"
        );
    }
}

#[test]
fn inter_layer_phase_time_shrinks_with_shallower_pipelines() {
    let times: Vec<f64> = [2usize, 4, 8]
        .iter()
        .map(|&g| {
            let run = run_with(
                g,
                8 / g,
                1,
                8,
                16,
                64,
                Some(1),
                32,
                1,
                false,
                CostModel::default(),
            );
            simulate_batch(&run).inter_layer_time_s
        })
        .collect();
    assert!(
        times[0] < times[1] && times[1] < times[2],
        "expected monotone growth, got {times:?}"
    );
}

#[test]
fn warmup_idle_time_grows_with_pipeline_depth() {
    let idles: Vec<f64> = [2usize, 4, 8]
        .iter()
        .map(|&g| {
            let run = run_with(
                g,
                8 / g,
                1,
                8,
                16,
                64,
                Some(1),
                32,
                1,
                false,
                CostModel::default(),
            );
            simulate_batch(&run).warmup_idle_s
        })
        .collect();
    assert!(idles[0] < idles[1] && idles[1] < idles[2], "{idles:?}");
}

#[test]
fn combined_reduce_optimizer_time_is_u_shaped_in_the_coarsening_factor() {
    // 4x8 grid, 16 uniform layers of width 256: phi per worker = 263168,
    // bucket 16448 -> 16 buckets per worker.
    let sweep = [1usize, 2, 4, 8, 16];
    let times: Vec<f64> = sweep
        .iter()
        .map(|&k| {
            let run = run_with(
                4,
                8,
                2,
                16,
                256,
                64,
                Some(1),
                16448,
                k,
                true,
                CostModel::default(),
            );
            simulate_batch(&run).reduce_opt_combined_s
        })
        .collect();
    let (argmin, &min) = times
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .unwrap();
    assert!(
        sweep[argmin] == 2 || sweep[argmin] == 4,
        "minimum at k={} (times {times:?})",
        sweep[argmin]
    );
    assert!(
        times[0] > min && times[4] > min,
        "endpoints must sit above the minimum: {times:?}"
    );
}

#[test]
fn chunk_overhead_is_visible_in_the_report() {
    let run1 = run_with(
        2,
        4,
        2,
        8,
        64,
        32,
        Some(1),
        1024,
        1,
        true,
        CostModel::default(),
    );
    let run4 = run_with(
        2,
        4,
        2,
        8,
        64,
        32,
        Some(1),
        1024,
        4,
        true,
        CostModel::default(),
    );
    let r1 = simulate_batch(&run1);
    let r4 = simulate_batch(&run4);
    assert!(r1.collective_calls > r4.collective_calls);
    assert_eq!(
        r1.collective_overhead_s_total,
        r1.collective_calls as f64 * run1.cost.collective_overhead_s
    );
}
