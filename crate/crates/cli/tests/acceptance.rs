//! Acceptance suite: every release criterion as one test, each printing a
//! pass line (run with `--nocapture` to see them).
//!
//! 1. gradient equivalence against the serial full-batch oracle
//! 2. loss-curve identity, full precision and mixed precision
//! 3. checkpointing neutrality plus the sqrt-rule minimization
//! 4. bucketed offload equivalence and the 16-bytes-per-parameter bound
//! 5. memory ledger constants and saving ratios
//! 6. communication/computation scaling counters at 48 workers
//! 7. reduce/optimizer overlap equivalence and the coarsening U-shape
//! 8. scheduler safety and liveness across 1000 fabric seeds
//! 9. throughput metric formulas against an arbitrary-precision oracle
//! 10. byte-identical reruns of every CLI command

use std::path::PathBuf;
use std::process::Command;
use std::time::Instant;

use num_bigint::BigInt;
use num_rational::{BigRational, Ratio};
use num_traits::cast::ToPrimitive;

use pipegrid::analytics::{
    activation_units, comm_comp_counters, estimated_training_time, memory_ledger,
    model_state_bytes, simulate_batch, transformer_flops_per_s,
};
use pipegrid::config::{
    divisors, select_checkpoint_interval, validate, BatchSection, NetworkConfig, OptimizerConfig,
    ParallelConfig, RunConfig, ValidatedRun,
};
use pipegrid::data::SyntheticStream;
use pipegrid::engine::serial::{full_batch_gradient, SerialTrainer};
use pipegrid::engine::{HybridEngine, ScheduleAction};
use pipegrid::halfprec::quantize_half;
use pipegrid::nn::{Activation, LossKind};
use pipegrid::optim::OffloadStore;

fn base_config() -> RunConfig {
    RunConfig {
        mixed_precision: false,
        parallel: ParallelConfig {
            g_inter: 2,
            g_data: 2,
            microbatch_size: 2,
            pipeline_limit: None,
            bucket_size: 64,
            coarsening_k: 2,
            checkpoint_interval: None,
            workers: None,
        },
        network: NetworkConfig {
            layers: Some(8),
            width: Some(32),
            layer_dims: None,
            uniform_activation_bytes: None,
            activation: Activation::Tanh,
            loss: LossKind::SquaredError,
        },
        batch: BatchSection { batch_size: 16 },
        optimizer: OptimizerConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
            loss_scale: 1.0,
            dynamic_loss_scale: false,
        },
        cost: Default::default(),
    }
}

fn make_run(mutate: impl FnOnce(&mut RunConfig)) -> ValidatedRun {
    let mut cfg = base_config();
    mutate(&mut cfg);
    validate(&cfg).expect("acceptance config is valid")
}

fn shard_span(run: &ValidatedRun, row: usize) -> (usize, usize) {
    let span = run.shard_layers(row);
    let lo: usize = (0..span.start)
        .map(|l| run.net.layer_param_count(l) as usize)
        .sum();
    let len: usize = span.map(|l| run.net.layer_param_count(l) as usize).sum();
    (lo, len)
}

fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let denom = x.abs().max(y.abs()).max(1e-12);
            (x - y).abs() / denom
        })
        .fold(0.0, f64::max)
}

#[test]
fn criterion_01_gradient_equivalence_across_all_partitions() {
    let started = Instant::now();
    let seed = 401;
    let mut checked = 0usize;
    for g_inter in [1usize, 2, 4] {
        for g_data in [1usize, 2, 4] {
            for microbatch in [1usize, 2, 4] {
                let run = make_run(|c| {
                    c.parallel.g_inter = g_inter;
                    c.parallel.g_data = g_data;
                    c.parallel.microbatch_size = microbatch;
                });
                let stream: SyntheticStream<f64> = SyntheticStream::new(&run.net, 16, seed);
                let batch = stream.batch(0);
                let mut engine: HybridEngine<f64> = HybridEngine::new(&run, seed);
                engine.train_step(&batch).expect("step succeeds");

                let oracle_layers = SerialTrainer::<f64>::new(&run, seed).layers().to_vec();
                let (_, oracle) = full_batch_gradient(&oracle_layers, &batch, run.net.loss);
                for row in 0..g_inter {
                    let (lo, len) = shard_span(&run, row);
                    for col in 0..g_data {
                        let rel =
                            max_rel_err(engine.reduced_gradient(row, col), &oracle[lo..lo + len]);
                        assert!(
                            rel <= 1e-10,
                            "{g_inter}x{g_data} mb={microbatch} row={row}: rel err {rel:.3e}"
                        );
                    }
                }
                checked += 1;
            }
        }
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 30, "criterion 1 took {elapsed:?}");
    eprintln!(
        "[PASS] criterion 1: gradient equivalence <= 1e-10 across {checked} partitions in {elapsed:?}"
    );
}

#[test]
fn criterion_02_loss_curve_identity_over_200_steps() {
    // Full precision: relative per-step loss difference <= 1e-8.
    let run = make_run(|_| {});
    let seed = 402;
    let mut engine: HybridEngine<f64> = HybridEngine::new(&run, seed);
    let mut serial: SerialTrainer<f64> = SerialTrainer::new(&run, seed);
    let stream: SyntheticStream<f64> = SyntheticStream::new(&run.net, 16, seed);
    let mut max_rel: f64 = 0.0;
    for step in 0..200u64 {
        let batch = stream.batch(step);
        let par = engine.train_step(&batch).unwrap();
        let ser = serial.step(&batch).unwrap();
        max_rel = max_rel.max((par.loss - ser.loss).abs() / ser.loss.abs().max(1e-12));
    }
    assert!(
        max_rel <= 1e-8,
        "full-precision loss curves diverged: {max_rel:.3e}"
    );

    // Mixed precision: bit-identical losses and parameters.
    let run = make_run(|c| {
        c.mixed_precision = true;
        c.optimizer.loss_scale = 128.0;
    });
    let mut engine: HybridEngine<f64> = HybridEngine::new(&run, seed);
    let mut serial: SerialTrainer<f64> = SerialTrainer::new(&run, seed);
    let stream: SyntheticStream<f64> = SyntheticStream::new(&run.net, 16, seed);
    for step in 0..200u64 {
        let batch = stream.batch(step);
        let par = engine.train_step(&batch).unwrap();
        let ser = serial.step(&batch).unwrap();
        assert_eq!(
            par.loss, ser.loss,
            "mixed loss must be bit-identical at step {step}"
        );
    }
    for row in 0..run.g_inter {
        let (lo, len) = shard_span(&run, row);
        assert_eq!(
            engine.master_params(row, 0),
            &serial.master()[lo..lo + len],
            "mixed parameters must be bit-identical (row {row})"
        );
    }
    eprintln!(
        "[PASS] criterion 2: 200-step loss curves match (full precision max rel {max_rel:.2e}; mixed bit-identical)"
    );
}

#[test]
fn criterion_03_checkpointing_neutrality_and_sqrt_rule() {
    let seed = 403;
    for g_inter in [1usize, 2, 4] {
        let depth = 8 / g_inter;
        let reference: Vec<Vec<f64>> = {
            let run = make_run(|c| {
                c.parallel.g_inter = g_inter;
                c.parallel.g_data = 1;
                c.parallel.microbatch_size = 1;
                c.parallel.checkpoint_interval = Some(1);
            });
            let stream: SyntheticStream<f64> = SyntheticStream::new(&run.net, 16, seed);
            let mut engine: HybridEngine<f64> = HybridEngine::new(&run, seed);
            engine.train_step(&stream.batch(0)).unwrap();
            (0..g_inter)
                .map(|r| engine.reduced_gradient(r, 0).to_vec())
                .collect()
        };
        for ac in divisors(depth) {
            let run = make_run(|c| {
                c.parallel.g_inter = g_inter;
                c.parallel.g_data = 1;
                c.parallel.microbatch_size = 1;
                c.parallel.checkpoint_interval = Some(ac);
            });
            let stream: SyntheticStream<f64> = SyntheticStream::new(&run.net, 16, seed);
            let mut engine: HybridEngine<f64> = HybridEngine::new(&run, seed);
            engine.train_step(&stream.batch(0)).unwrap();
            let bound = activation_units(8, g_inter, ac).unwrap() as usize;
            for row in 0..g_inter {
                assert_eq!(
                    engine.reduced_gradient(row, 0),
                    reference[row].as_slice(),
                    "g_inter={g_inter} ac={ac} row={row}: gradients must be bit-identical to ac=1"
                );
                let peak = engine.stash_units_peak(row, 0);
                assert!(
                    peak <= bound,
                    "g_inter={g_inter} ac={ac} row={row}: {peak} > {bound}"
                );
            }
        }
    }

    // Exhaustive N <= 256: the sqrt-nearest factor minimizes N/ac + 1 + ac
    // over the divisors of N (tie broken toward the smaller factor).
    for n in 1..=256usize {
        let rule = select_checkpoint_interval(n, 1).unwrap();
        let best = divisors(n)
            .into_iter()
            .map(|d| activation_units(n, 1, d).unwrap())
            .min()
            .unwrap();
        assert_eq!(activation_units(n, 1, rule).unwrap(), best, "N={n}");
    }
    eprintln!(
        "[PASS] criterion 3: checkpointing neutral, stash bounded, sqrt rule optimal for N <= 256"
    );
}

#[test]
fn criterion_04_bucketed_offload_is_bit_identical_and_bounded() {
    let phi = 1056usize; // one 32x32 layer plus bias
    let master: Vec<f64> = (0..phi).map(|i| ((i as f64) * 0.173).sin() * 0.2).collect();
    let grads: Vec<Vec<f64>> = (0..3)
        .map(|s| {
            (0..phi)
                .map(|i| quantize_half(((i + s * 7) as f64 * 0.091).cos() * 0.1))
                .collect()
        })
        .collect();
    let opt_cfg = base_config().optimizer;

    let mut reference = OffloadStore::new(master.clone(), phi);
    for g in &grads {
        reference.monolithic_step(g, 4.0, &opt_cfg).unwrap();
    }

    for bucket_size in [1usize, 3, phi / 2, phi] {
        let mut store = OffloadStore::new(master.clone(), bucket_size);
        for g in &grads {
            store.bucketed_step(g, 4.0, &opt_cfg).unwrap();
        }
        assert_eq!(
            store.master(),
            reference.master(),
            "bucket_size={bucket_size}"
        );
        assert_eq!(store.state().first_moment, reference.state().first_moment);
        assert_eq!(store.state().second_moment, reference.state().second_moment);
        let bound = 16 * bucket_size as u64;
        assert!(
            store.events().iter().all(|e| e.device_bytes() <= bound),
            "bucket_size={bucket_size}: residency trace exceeded 16 * bucket_size"
        );
        assert!(store.device_bytes_peak() <= bound);
    }
    eprintln!(
        "[PASS] criterion 4: bucketed offload bit-identical to monolithic Adam, bytes <= 16*bsize"
    );
}

#[test]
fn criterion_05_memory_ledger_constants_and_ratios() {
    let phi = 2_000_000_000u64;
    assert_eq!(
        model_state_bytes(phi, false, 0),
        40_000_000_000,
        "20 phi at 2e9 parameters is 40 GB"
    );
    let bsize = 16_000_000u64;
    assert_eq!(model_state_bytes(phi, true, bsize), 4 * phi + 16 * bsize);

    // Saving ratio approaches 5x once buckets are below phi/1000.
    for b in [phi / 1000, phi / 10_000, phi / 1_000_000] {
        let ratio =
            model_state_bytes(phi, false, 0) as f64 / model_state_bytes(phi, true, b) as f64;
        assert!((4.9..=5.0).contains(&ratio), "bsize={b}: ratio {ratio}");
    }

    // Whole-worker ratio in the reference large-model scenario: 48 layers
    // on a 24x2 grid, ~5e8 parameters per worker, 16M buckets, transformer
    // sized activations. The activation component is an Eq-style estimate,
    // so only a documented ratio band is asserted.
    let run = make_run(|c| {
        c.mixed_precision = true;
        c.parallel.g_inter = 24;
        c.parallel.g_data = 2;
        c.parallel.microbatch_size = 1;
        c.parallel.bucket_size = 16_000_000;
        c.network.layers = Some(48);
        c.network.width = Some(15811);
        c.network.uniform_activation_bytes = Some(512 * 4512 * 2);
        c.batch.batch_size = 2048;
        c.optimizer.loss_scale = 1024.0;
    });
    let unopt = memory_ledger(&run, false);
    let opt = memory_ledger(&run, true);
    assert!(unopt.phi > 490_000_000 && unopt.phi < 510_000_000);
    assert_eq!(unopt.device_model_state_bytes, 20 * unopt.phi);
    assert_eq!(opt.device_model_state_bytes, 4 * opt.phi + 16 * 16_000_000);
    assert_eq!(unopt.device_activation_bytes, opt.device_activation_bytes);
    let total_ratio = unopt.device_total_bytes as f64 / opt.device_total_bytes as f64;
    assert!(
        (3.5..=4.5).contains(&total_ratio),
        "whole-device saving ratio {total_ratio} outside the documented band"
    );
    eprintln!(
        "[PASS] criterion 5: 40 GB model state at phi=2e9, exact optimized accounting, total ratio {total_ratio:.2}"
    );
}

#[test]
fn criterion_06_scaling_counters_at_48_workers() {
    let sweep = [6usize, 12, 24, 48];
    let runs: Vec<ValidatedRun> = sweep
        .iter()
        .map(|&g| {
            make_run(|c| {
                c.mixed_precision = true;
                c.parallel.g_inter = g;
                c.parallel.g_data = 48 / g;
                c.parallel.microbatch_size = 1;
                c.parallel.bucket_size = 65536;
                c.parallel.checkpoint_interval = Some(1);
                c.network.layers = Some(48);
                c.network.width = Some(512);
                c.batch.batch_size = 2048;
                c.optimizer.loss_scale = 1024.0;
            })
        })
        .collect();
    let counters: Vec<_> = runs.iter().map(comm_comp_counters).collect();

    let flops0 = counters[0].flops_per_worker;
    let bytes0 = counters[0].p2p_bytes_per_worker;
    let g0 = sweep[0] as u64;
    for (i, &g) in sweep.iter().enumerate() {
        // Per-worker p2p bytes must be exactly linear in g_inter.
        assert_eq!(
            counters[i].p2p_bytes_per_worker * g0,
            bytes0 * g as u64,
            "p2p bytes not proportional at g_inter={g}"
        );
        // Per-worker flops must be independent of the split.
        assert_eq!(
            counters[i].flops_per_worker, flops0,
            "flops changed at g_inter={g}"
        );
        // ratio * g_inter constant follows from the two facts above;
        // verified on the computed ratios to cover the division path.
        let lhs = counters[i].comp_to_comm_ratio * g as f64;
        let rhs = counters[0].comp_to_comm_ratio * g0 as f64;
        assert!(
            ((lhs - rhs) / rhs).abs() < 1e-12,
            "ratio * g_inter drifted: {lhs} vs {rhs}"
        );
    }

    let times: Vec<f64> = runs
        .iter()
        .map(|r| simulate_batch(r).inter_layer_time_s)
        .collect();
    for w in times.windows(2) {
        assert!(
            w[0] < w[1],
            "inter-layer time must shrink with shallower pipelines: {times:?}"
        );
    }
    eprintln!("[PASS] criterion 6: p2p ~ g_inter exactly, flops constant, ratio*g_inter constant, time monotone");
}

#[test]
fn criterion_07_overlap_equivalence_and_u_shape() {
    // Bit-identical parameters across coarsening factors and vs sequential.
    let seed = 407;
    let snapshot = |k: usize, overlap: bool| -> Vec<Vec<f64>> {
        let run = make_run(|c| {
            c.parallel.coarsening_k = k;
            c.parallel.bucket_size = 7; // ragged buckets on purpose
        });
        let mut engine: HybridEngine<f64> = HybridEngine::new(&run, seed);
        engine.set_overlap(overlap);
        let stream: SyntheticStream<f64> = SyntheticStream::new(&run.net, 16, seed);
        for step in 0..3u64 {
            engine.train_step(&stream.batch(step)).unwrap();
        }
        let run_ref = &engine;
        (0..2)
            .map(|r| run_ref.master_params(r, 0).to_vec())
            .collect()
    };
    let sequential = snapshot(1, false);
    for k in [1usize, 2, 4, 8, 16] {
        assert_eq!(
            snapshot(k, true),
            sequential,
            "k={k} must be bit-identical to sequential"
        );
    }

    // U-shape of the combined reduce+optimizer time under the default
    // cost model: 4x8 grid, 16 buckets per worker.
    let sweep = [1usize, 2, 4, 8, 16];
    let times: Vec<f64> = sweep
        .iter()
        .map(|&k| {
            let run = make_run(|c| {
                c.mixed_precision = true;
                c.parallel.g_inter = 4;
                c.parallel.g_data = 8;
                c.parallel.bucket_size = 16448;
                c.parallel.coarsening_k = k;
                c.network.layers = Some(16);
                c.network.width = Some(256);
                c.batch.batch_size = 64;
                c.optimizer.loss_scale = 1024.0;
            });
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
        "combined-phase minimum at k={} ({times:?})",
        sweep[argmin]
    );
    assert!(
        times[0] > min && times[4] > min,
        "endpoints must exceed the minimum: {times:?}"
    );
    eprintln!(
        "[PASS] criterion 7: parameters bit-identical across k, U-shaped combined time (min at k={})",
        sweep[argmin]
    );
}

#[test]
fn criterion_08_scheduler_safety_and_liveness_across_1000_seeds() {
    let started = Instant::now();
    let run = make_run(|c| {
        c.parallel.g_inter = 4;
        c.parallel.g_data = 1;
        c.parallel.microbatch_size = 1;
        c.network.layers = Some(8);
        c.network.width = Some(8);
        c.batch.batch_size = 16;
    });
    let base_seed = 408;
    let stream: SyntheticStream<f64> = SyntheticStream::new(&run.net, 16, base_seed);
    let batch = stream.batch(0);
    let mps = run.batch.microbatches_per_shard as u64;
    let mut reference: Option<(f64, Vec<f64>)> = None;
    for fabric_seed in 0..1000u64 {
        let mut engine: HybridEngine<f64> =
            HybridEngine::with_fabric_seed(&run, base_seed, fabric_seed);
        let result = engine.train_step(&batch).expect("no deadlock");
        assert!(
            engine.in_flight_peak() <= run.pipeline_limit,
            "seed {fabric_seed}"
        );
        assert!(engine.fabric().is_conserved(), "seed {fabric_seed}");

        // Every microbatch ran exactly one forward and one backward per stage.
        for row in 0..run.g_inter {
            for mb in 0..mps {
                let count = |action: ScheduleAction| {
                    engine
                        .schedule()
                        .iter()
                        .filter(|e| {
                            e.worker.row == row && e.microbatch == Some(mb) && e.action == action
                        })
                        .count()
                };
                assert_eq!(
                    count(ScheduleAction::Forward),
                    1,
                    "seed {fabric_seed} row {row} mb {mb}"
                );
                assert_eq!(
                    count(ScheduleAction::Backward),
                    1,
                    "seed {fabric_seed} row {row} mb {mb}"
                );
            }
        }

        let params = engine.master_params(3, 0).to_vec();
        match &reference {
            None => reference = Some((result.loss, params)),
            Some((loss, p)) => {
                assert_eq!(result.loss, *loss, "seed {fabric_seed} changed the loss");
                assert_eq!(&params, p, "seed {fabric_seed} changed the parameters");
            }
        }
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 60, "criterion 8 took {elapsed:?}");
    eprintln!("[PASS] criterion 8: 1000 fabric seeds, no deadlock, bounded in-flight, identical numerics ({elapsed:?})");
}

#[test]
fn criterion_09_metric_formulas_match_arbitrary_precision() {
    let big = |v: u64| BigRational::from_integer(BigInt::from(v));

    // Deterministic pseudo-random inputs.
    let mut x = 0x9e3779b97f4a7c15u64;
    let mut next = || {
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        x
    };

    let mut worst_time_rel: f64 = 0.0;
    let mut worst_flops_rel: f64 = 0.0;
    let mut check = |b: u64, s: u64, l: u64, h: u64, v: u64, t: f64| {
        let t_rat = Ratio::from_float(t).expect("finite t");

        // Eq: estimated_training_time = 3e11 * t / (b * s)
        let oracle2 = big(300_000_000_000) * &t_rat / big(b * s);
        let got2 = estimated_training_time(t, b as f64, s as f64);
        let rel2 = (got2 - oracle2.to_f64().unwrap()).abs() / oracle2.to_f64().unwrap().abs();
        worst_time_rel = worst_time_rel.max(rel2);

        // Eq: flops = 96 b s l h^2 / t * (1 + s/(6h) + V/(16 l h))
        let bracket = big(1) + big(s) / big(6 * h) + big(v) / big(16 * l * h);
        let oracle3 = big(96) * big(b) * big(s) * big(l) * big(h) * big(h) / &t_rat * bracket;
        let got3 = transformer_flops_per_s(b as f64, s as f64, l as f64, h as f64, v as f64, t);
        let rel3 = (got3 - oracle3.to_f64().unwrap()).abs() / oracle3.to_f64().unwrap().abs();
        worst_flops_rel = worst_flops_rel.max(rel3);
    };

    // The 12-billion-parameter shape: 48 layers, hidden 4512.
    check(16384, 512, 48, 4512, 51200, 37.2);
    for _ in 0..100 {
        let b = 1 + next() % 65536;
        let s = 64 + next() % 4096;
        let l = 1 + next() % 128;
        let h = 64 + next() % 16384;
        let v = 1000 + next() % 200_000;
        let t = 1e-3 + (next() % 1_000_000) as f64 * 1e-2;
        check(b, s, l, h, v, t);
    }
    assert!(
        worst_time_rel <= 1e-12,
        "training-time estimate off by {worst_time_rel:.3e}"
    );
    assert!(
        worst_flops_rel <= 1e-12,
        "flop-rate estimate off by {worst_flops_rel:.3e}"
    );
    eprintln!(
        "[PASS] criterion 9: metrics match arbitrary precision to 12 significant digits (worst {worst_time_rel:.1e} / {worst_flops_rel:.1e})"
    );
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pipegrid"))
}

fn tmp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("pipegrid-acc-{}-{tag}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).expect("create temp dir");
    dir
}

fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

#[test]
fn criterion_10_reruns_are_byte_identical() {
    let root = tmp_dir("determinism");
    let cases: Vec<(&str, Vec<String>, &str)> = vec![
        (
            "train",
            vec![
                "train".into(),
                "--config".into(),
                config_path("default.toml").display().to_string(),
                "--steps".into(),
                "12".into(),
                "--seed".into(),
                "5".into(),
                "--oracle".into(),
            ],
            "train_log.jsonl",
        ),
        (
            "simulate",
            vec![
                "simulate".into(),
                "--config".into(),
                config_path("k_sweep.toml").display().to_string(),
                "--seed".into(),
                "5".into(),
            ],
            "simulate_report.json",
        ),
        (
            "sweep",
            vec![
                "sweep".into(),
                "--config".into(),
                config_path("k_sweep.toml").display().to_string(),
                "--axis".into(),
                "k".into(),
                "--values".into(),
                "1,2,4,8,16".into(),
            ],
            "sweep.csv",
        ),
        (
            "memory",
            vec![
                "memory".into(),
                "--config".into(),
                config_path("default.toml").display().to_string(),
            ],
            "memory_report.txt",
        ),
    ];
    for (tag, args, artifact) in cases {
        let mut outputs = Vec::new();
        for attempt in 0..2 {
            let out_dir = root.join(format!("{tag}-{attempt}"));
            let status = bin()
                .args(&args)
                .arg("--out")
                .arg(&out_dir)
                .status()
                .expect("binary runs");
            assert!(status.success(), "{tag} run {attempt} failed");
            outputs.push(std::fs::read(out_dir.join(artifact)).expect("artifact exists"));
        }
        assert_eq!(
            outputs[0], outputs[1],
            "{tag}: artifacts differ between reruns"
        );
        assert!(!outputs[0].is_empty());
    }
    let _ = std::fs::remove_dir_all(&root);
    eprintln!("[PASS] criterion 10: train/simulate/sweep/memory reruns byte-identical");
}
