//! Discrete-event simulation of one training batch.
//!
//! Phase 1 replays the message-driven pipeline schedule in simulated time:
//! one compute task at a time per worker, messages carrying latency plus
//! bytes/bandwidth, warmup injection at stage 0, immediate turn-around at the
//! last stage, and injection on every completed backward. Phase 2 models the
//! chunked all-reduce and the bucketed optimizer as two streams where chunk c
//! must finish reducing before its buckets update, while chunk c+1 reduces.
//!
//! All pipelines behave identically under the uniform-activation assumption,
//! so one pipeline is simulated and its counters hold for every column.

use std::collections::BinaryHeap;

use serde::Serialize;

use super::{comm_comp_counters, stage_task_flops};
use crate::config::ValidatedRun;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TaskKind {
    Forward,
    Backward,
}

#[derive(Debug, Clone, Copy)]
struct Task {
    kind: TaskKind,
    mb: u64,
}

#[derive(Debug)]
enum EventKind {
    Arrive { stage: usize, task: Task },
    Free { stage: usize },
}

#[derive(Debug)]
struct Event {
    time: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.seq == other.seq
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Reversed: BinaryHeap pops the earliest (time, seq) first.
        other
            .time
            .total_cmp(&self.time)
            .then(other.seq.cmp(&self.seq))
    }
}

struct Stage {
    inbox: Vec<(f64, u64, Task)>,
    busy: bool,
    current: Option<Task>,
    injected: u64,
    completed: u64,
    busy_s: f64,
    first_start: Option<f64>,
    flops: u128,
    sent_bytes: u64,
    recv_bytes: u64,
    /// FIFO clamps for the two outgoing links.
    last_fwd_arrival: f64,
    last_bwd_arrival: f64,
}

impl Stage {
    fn new() -> Self {
        Self {
            inbox: Vec::new(),
            busy: false,
            current: None,
            injected: 0,
            completed: 0,
            busy_s: 0.0,
            first_start: None,
            flops: 0,
            sent_bytes: 0,
            recv_bytes: 0,
            last_fwd_arrival: 0.0,
            last_bwd_arrival: 0.0,
        }
    }

    /// Earliest-arrival pending task, ties broken by arrival sequence.
    fn pop_earliest(&mut self) -> Option<Task> {
        if self.inbox.is_empty() {
            return None;
        }
        let mut best = 0;
        for i in 1..self.inbox.len() {
            let (t, s, _) = self.inbox[i];
            let (bt, bs, _) = self.inbox[best];
            if t.total_cmp(&bt).then(s.cmp(&bs)).is_lt() {
                best = i;
            }
        }
        Some(self.inbox.swap_remove(best).2)
    }
}

/// Per-stage simulated activity. `busy_s` covers pipeline compute plus the
/// worker's optimizer stream; `idle_s` is the remainder of the batch.
#[derive(Debug, Clone, Serialize)]
pub struct StageTiming {
    pub busy_s: f64,
    pub idle_s: f64,
    pub first_task_start_s: f64,
}

/// Simulated timeline and counters for one batch.
#[derive(Debug, Clone, Serialize)]
pub struct PerfReport {
    pub batch_time_s: f64,
    pub inter_layer_time_s: f64,
    /// Active time of the all-reduce stream in phase 2.
    pub allreduce_time_s: f64,
    /// Active time of the optimizer stream in phase 2.
    pub optimizer_time_s: f64,
    /// Makespan of the overlapped reduce+optimizer phase.
    pub reduce_opt_combined_s: f64,
    /// Latest first-task start across stages: the pipeline-fill bubble.
    pub warmup_idle_s: f64,
    pub collective_calls: u64,
    pub collective_overhead_s_total: f64,
    pub per_stage: Vec<StageTiming>,
    /// Sent + received point-to-point bytes per stage.
    pub p2p_bytes_per_stage: Vec<u64>,
    pub flops_per_stage: Vec<u128>,
    pub allreduce_bytes_per_worker: u64,
}

struct Sim<'a> {
    run: &'a ValidatedRun,
    heap: BinaryHeap<Event>,
    seq: u64,
    stages: Vec<Stage>,
    fwd_dur: Vec<f64>,
    bwd_dur: Vec<f64>,
    msg_bytes: u64,
    transit: f64,
    mps: u64,
    limit: u64,
    makespan: f64,
}

impl<'a> Sim<'a> {
    fn new(run: &'a ValidatedRun) -> Self {
        let rate = run.cost.device_flops_per_s;
        let fwd_dur: Vec<f64> = (0..run.g_inter)
            .map(|r| stage_task_flops(run, r, false) as f64 / rate)
            .collect();
        let bwd_dur: Vec<f64> = (0..run.g_inter)
            .map(|r| stage_task_flops(run, r, true) as f64 / rate)
            .collect();
        let msg_bytes = run.microbatch_size as u64 * run.net.uniform_activation_bytes;
        let transit =
            run.cost.link_latency_s + msg_bytes as f64 / run.cost.link_bandwidth_bytes_per_s;
        Sim {
            heap: BinaryHeap::new(),
            seq: 0,
            stages: (0..run.g_inter).map(|_| Stage::new()).collect(),
            fwd_dur,
            bwd_dur,
            msg_bytes,
            transit,
            mps: run.batch.microbatches_per_shard as u64,
            limit: (run.pipeline_limit as u64).min(run.batch.microbatches_per_shard as u64),
            makespan: 0.0,
            run,
        }
    }

    fn push(&mut self, time: f64, kind: EventKind) {
        let seq = self.seq;
        self.seq += 1;
        self.heap.push(Event { time, seq, kind });
    }

    fn duration(&self, stage: usize, kind: TaskKind) -> f64 {
        match kind {
            TaskKind::Forward => self.fwd_dur[stage],
            TaskKind::Backward => self.bwd_dur[stage],
        }
    }

    fn start(&mut self, stage: usize, task: Task, now: f64) {
        let d = self.duration(stage, task.kind);
        let s = &mut self.stages[stage];
        debug_assert!(!s.busy, "stage {stage} started while busy");
        s.busy = true;
        s.current = Some(task);
        s.busy_s += d;
        s.flops += stage_task_flops(self.run, stage, task.kind == TaskKind::Backward);
        s.first_start.get_or_insert(now);
        self.push(now + d, EventKind::Free { stage });
    }

    fn try_start_from_inbox(&mut self, stage: usize, now: f64) {
        if self.stages[stage].busy {
            return;
        }
        if let Some(task) = self.stages[stage].pop_earliest() {
            self.start(stage, task, now);
        }
    }

    fn send(&mut self, from: usize, task: Task, now: f64) {
        let to = match task.kind {
            TaskKind::Forward => from + 1,
            TaskKind::Backward => from - 1,
        };
        let s = &mut self.stages[from];
        s.sent_bytes += self.msg_bytes;
        let candidate = now + self.transit;
        let arrival = match task.kind {
            TaskKind::Forward => {
                s.last_fwd_arrival = candidate.max(s.last_fwd_arrival);
                s.last_fwd_arrival
            }
            TaskKind::Backward => {
                s.last_bwd_arrival = candidate.max(s.last_bwd_arrival);
                s.last_bwd_arrival
            }
        };
        self.push(arrival, EventKind::Arrive { stage: to, task });
    }

    fn inject(&mut self, now: f64) {
        let next = self.stages[0].injected;
        debug_assert!(next < self.mps);
        self.stages[0].injected += 1;
        self.start(
            0,
            Task {
                kind: TaskKind::Forward,
                mb: next,
            },
            now,
        );
    }

    fn on_complete(&mut self, stage: usize, task: Task, now: f64) {
        let last = self.run.g_inter - 1;
        match task.kind {
            TaskKind::Forward => {
                if stage == last {
                    // Last stage turns the activation around immediately.
                    self.start(
                        stage,
                        Task {
                            kind: TaskKind::Backward,
                            mb: task.mb,
                        },
                        now,
                    );
                } else {
                    self.send(stage, task, now);
                    if stage == 0
                        && self.stages[0].injected < self.limit
                        && self.stages[0].injected < self.mps
                    {
                        self.inject(now); // warmup chain
                    } else {
                        self.try_start_from_inbox(stage, now);
                    }
                }
            }
            TaskKind::Backward => {
                if stage == 0 {
                    self.stages[0].completed += 1;
                    if self.stages[0].injected < self.mps {
                        self.inject(now);
                    } else {
                        self.try_start_from_inbox(stage, now);
                    }
                } else {
                    self.send(
                        stage,
                        Task {
                            kind: TaskKind::Backward,
                            mb: task.mb,
                        },
                        now,
                    );
                    self.try_start_from_inbox(stage, now);
                }
            }
        }
    }

    fn run_phase1(&mut self) {
        if self.mps > 0 {
            self.inject(0.0);
        }
        while let Some(ev) = self.heap.pop() {
            let now = ev.time;
            self.makespan = self.makespan.max(now);
            match ev.kind {
                EventKind::Arrive { stage, task } => {
                    self.stages[stage].recv_bytes += self.msg_bytes;
                    let seq = self.seq;
                    self.seq += 1;
                    self.stages[stage].inbox.push((now, seq, task));
                    self.try_start_from_inbox(stage, now);
                }
                EventKind::Free { stage } => {
                    self.stages[stage].busy = false;
                    let task = self.stages[stage]
                        .current
                        .take()
                        .expect("completed task recorded");
                    self.on_complete(stage, task, now);
                }
            }
        }
        debug_assert_eq!(self.stages[0].completed, self.mps, "pipeline drained");
    }
}

/// Phase-2 recurrence: all-reduce chunk c completes, its k buckets update
/// while chunk c+1 reduces.
struct ReducePhase {
    allreduce_time_s: f64,
    optimizer_time_s: f64,
    combined_s: f64,
    collective_calls: u64,
    allreduce_bytes: u64,
}

fn reduce_phase(run: &ValidatedRun) -> ReducePhase {
    let cost = &run.cost;
    let phi = run.max_worker_param_count();
    let bucket = run.bucket_size as u64;
    let nb = phi.div_ceil(bucket);
    let k = run.coarsening_k as u64;
    let chunks = nb.div_ceil(k);
    let p = run.g_data as u64;
    let element_bytes = run.element_bytes();

    let opt_time_for = |lo_bucket: u64, hi_bucket: u64| -> f64 {
        let mut t = 0.0;
        for b in lo_bucket..hi_bucket {
            let len = bucket.min(phi - b * bucket);
            t += 24.0 * len as f64 / cost.host_device_bandwidth_bytes_per_s
                + len as f64 * cost.optimizer_flops_per_param as f64 / cost.device_flops_per_s;
        }
        t
    };

    let mut end_comm = 0.0f64;
    let mut end_opt = 0.0f64;
    let mut allreduce_time = 0.0;
    let mut optimizer_time = 0.0;
    let mut allreduce_bytes = 0u64;
    for c in 0..chunks {
        let lo = c * k;
        let hi = (lo + k).min(nb);
        let elems = (hi * bucket).min(phi) - lo * bucket;
        let t_ar = if p > 1 {
            let bytes = elems * element_bytes;
            allreduce_bytes += 2 * (p - 1) * bytes / p;
            cost.collective_overhead_s
                + 2.0 * (p as f64 - 1.0) / p as f64 * bytes as f64 / cost.link_bandwidth_bytes_per_s
        } else {
            0.0
        };
        let t_opt = opt_time_for(lo, hi);
        end_comm += t_ar;
        end_opt = end_comm.max(end_opt) + t_opt;
        allreduce_time += t_ar;
        optimizer_time += t_opt;
    }
    ReducePhase {
        allreduce_time_s: allreduce_time,
        optimizer_time_s: optimizer_time,
        combined_s: end_opt,
        collective_calls: if p > 1 { chunks } else { 0 },
        allreduce_bytes,
    }
}

/// Simulates one batch end to end and checks the event-driven counters
/// against the closed-form analysis.
pub fn simulate_batch(run: &ValidatedRun) -> PerfReport {
    let mut sim = Sim::new(run);
    sim.run_phase1();
    let phase1 = sim.makespan;
    let reduce = reduce_phase(run);
    let batch_time = phase1 + reduce.combined_s;

    let per_stage: Vec<StageTiming> = sim
        .stages
        .iter()
        .map(|s| {
            let busy = s.busy_s + reduce.optimizer_time_s;
            StageTiming {
                busy_s: busy,
                idle_s: batch_time - busy,
                first_task_start_s: s.first_start.unwrap_or(0.0),
            }
        })
        .collect();
    let warmup_idle_s = per_stage
        .iter()
        .map(|s| s.first_task_start_s)
        .fold(0.0, f64::max);
    let p2p: Vec<u64> = sim
        .stages
        .iter()
        .map(|s| s.sent_bytes + s.recv_bytes)
        .collect();
    let flops: Vec<u128> = sim.stages.iter().map(|s| s.flops).collect();

    // Event-driven accumulation must agree with the closed forms exactly.
    let analytic = comm_comp_counters(run);
    debug_assert_eq!(p2p, analytic.per_stage_p2p_bytes);
    debug_assert!(flops.iter().enumerate().all(|(r, &f)| {
        f == (stage_task_flops(run, r, false) + stage_task_flops(run, r, true))
            * run.batch.microbatches_per_shard as u128
    }));

    PerfReport {
        batch_time_s: batch_time,
        inter_layer_time_s: phase1,
        allreduce_time_s: reduce.allreduce_time_s,
        optimizer_time_s: reduce.optimizer_time_s,
        reduce_opt_combined_s: reduce.combined_s,
        warmup_idle_s,
        collective_calls: reduce.collective_calls,
        collective_overhead_s_total: reduce.collective_calls as f64
            * run.cost.collective_overhead_s,
        per_stage,
        p2p_bytes_per_stage: p2p,
        flops_per_stage: flops,
        allreduce_bytes_per_worker: reduce.allreduce_bytes,
    }
}
