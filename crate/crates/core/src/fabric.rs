//! Simulated interconnect: asynchronous point-to-point messages with
//! per-link FIFO order, seeded cross-link interleaving, deterministic
//! collectives and byte/traffic accounting.
//!
//! The fabric is a single logically-serialized queue. Sends never block;
//! delivery order across links is randomized by the fabric seed to model an
//! asynchronous transport, while each (source, dest) link stays FIFO.
//! Collectives accumulate in ascending rank order so downstream numerics
//! never depend on the seed.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;
use std::ops::Range;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::halfprec::quantize_half;
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Position in the 2D worker grid: `row` is the pipeline stage in
/// [0, g_inter), `col` the data-parallel replica in [0, g_data).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct WorkerId {
    pub row: usize,
    pub col: usize,
}

impl WorkerId {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

impl std::fmt::Display for WorkerId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "g[{},{}]", self.row, self.col)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MessageKind {
    ActivationForward,
    GradientBackward,
}

/// An activation or gradient payload in flight between pipeline neighbors.
#[derive(Debug, Clone)]
pub struct Message<T> {
    pub source: WorkerId,
    pub dest: WorkerId,
    pub microbatch_id: u64,
    pub kind: MessageKind,
    pub payload: Matrix<T>,
    /// Element count times the modeled element width; filled in by `send`.
    pub byte_size: u64,
}

impl<T: Scalar> Message<T> {
    pub fn new(
        source: WorkerId,
        dest: WorkerId,
        microbatch_id: u64,
        kind: MessageKind,
        payload: Matrix<T>,
    ) -> Self {
        Self {
            source,
            dest,
            microbatch_id,
            kind,
            payload,
            byte_size: 0,
        }
    }
}

/// Per-worker traffic counters; monotone non-decreasing.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct CommStats {
    pub p2p_bytes_sent: u64,
    pub p2p_bytes_received: u64,
    pub allreduce_bytes: u64,
    /// Messages sent plus messages received by this worker.
    pub message_count: u64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FabricError {
    #[error(
        "invalid route {from} -> {to}: only same-column pipeline neighbors may exchange messages"
    )]
    InvalidRoute { from: WorkerId, to: WorkerId },
    #[error("starvation: no deliverable message ({pending_total} pending fabric-wide)")]
    Starvation { pending_total: usize },
    #[error("all-reduce length mismatch: rank {rank} has {got}, expected {expected}")]
    LengthMismatch {
        rank: usize,
        expected: usize,
        got: usize,
    },
}

/// One line of the exported event log.
#[derive(Debug, Clone, Serialize)]
pub struct TraceEvent {
    pub seq: u64,
    pub kind: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub src: Option<WorkerId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dst: Option<WorkerId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub microbatch: Option<u64>,
    pub bytes: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group_row: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chunk: Option<usize>,
}

/// The simulated worker fabric.
pub struct Fabric<T> {
    g_inter: usize,
    g_data: usize,
    element_bytes: u64,
    links: BTreeMap<(WorkerId, WorkerId), VecDeque<Message<T>>>,
    pending_total: usize,
    rng: ChaCha8Rng,
    stats: Vec<CommStats>,
    trace: Vec<TraceEvent>,
    seq: u64,
}

impl<T: Scalar> Fabric<T> {
    pub fn new(g_inter: usize, g_data: usize, element_bytes: u64, seed: u64) -> Self {
        Self {
            g_inter,
            g_data,
            element_bytes,
            links: BTreeMap::new(),
            pending_total: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            stats: vec![CommStats::default(); g_inter * g_data],
            trace: Vec::new(),
            seq: 0,
        }
    }

    pub fn worker_index(&self, w: WorkerId) -> usize {
        w.row * self.g_data + w.col
    }

    fn in_bounds(&self, w: WorkerId) -> bool {
        w.row < self.g_inter && w.col < self.g_data
    }

    fn next_seq(&mut self) -> u64 {
        let s = self.seq;
        self.seq += 1;
        s
    }

    /// Enqueues a message to a pipeline neighbor. Never blocks.
    pub fn send(&mut self, mut msg: Message<T>) -> Result<(), FabricError> {
        let neighbor_rows =
            msg.source.row + 1 == msg.dest.row || msg.dest.row + 1 == msg.source.row;
        if !self.in_bounds(msg.source)
            || !self.in_bounds(msg.dest)
            || msg.source.col != msg.dest.col
            || !neighbor_rows
        {
            return Err(FabricError::InvalidRoute {
                from: msg.source,
                to: msg.dest,
            });
        }
        msg.byte_size = msg.payload.len() as u64 * self.element_bytes;
        let idx = self.worker_index(msg.source);
        self.stats[idx].p2p_bytes_sent += msg.byte_size;
        self.stats[idx].message_count += 1;
        let seq = self.next_seq();
        self.trace.push(TraceEvent {
            seq,
            kind: "send",
            src: Some(msg.source),
            dst: Some(msg.dest),
            microbatch: Some(msg.microbatch_id),
            bytes: msg.byte_size,
            group_row: None,
            chunk: None,
        });
        self.links
            .entry((msg.source, msg.dest))
            .or_default()
            .push_back(msg);
        self.pending_total += 1;
        Ok(())
    }

    pub fn pending_total(&self) -> usize {
        self.pending_total
    }

    pub fn has_pending(&self, worker: WorkerId) -> bool {
        self.links
            .iter()
            .any(|((_, dst), q)| *dst == worker && !q.is_empty())
    }

    /// Workers with at least one deliverable message, in deterministic order.
    pub fn pending_workers(&self) -> Vec<WorkerId> {
        let mut out: Vec<WorkerId> = Vec::new();
        for ((_, dst), q) in &self.links {
            if !q.is_empty() && !out.contains(dst) {
                out.push(*dst);
            }
        }
        out.sort();
        out
    }

    /// Delivers the next message for `worker`. When several links hold
    /// deliverable messages the link is chosen by the fabric seed; messages
    /// on one link always arrive in send order.
    pub fn receive(&mut self, worker: WorkerId) -> Result<Message<T>, FabricError> {
        let candidates: Vec<(WorkerId, WorkerId)> = self
            .links
            .iter()
            .filter(|((_, dst), q)| *dst == worker && !q.is_empty())
            .map(|(k, _)| *k)
            .collect();
        if candidates.is_empty() {
            return Err(FabricError::Starvation {
                pending_total: self.pending_total,
            });
        }
        Ok(self.deliver_from(&candidates))
    }

    /// Delivers the next message for whichever worker the seed picks,
    /// choosing uniformly among all non-empty links. Used by the engine's
    /// driver loop to model global asynchrony.
    pub fn receive_any(&mut self) -> Result<Message<T>, FabricError> {
        let candidates: Vec<(WorkerId, WorkerId)> = self
            .links
            .iter()
            .filter(|(_, q)| !q.is_empty())
            .map(|(k, _)| *k)
            .collect();
        if candidates.is_empty() {
            return Err(FabricError::Starvation { pending_total: 0 });
        }
        Ok(self.deliver_from(&candidates))
    }

    fn deliver_from(&mut self, candidates: &[(WorkerId, WorkerId)]) -> Message<T> {
        let pick = if candidates.len() == 1 {
            0
        } else {
            self.rng.random_range(0..candidates.len())
        };
        let msg = self
            .links
            .get_mut(&candidates[pick])
            .expect("candidate link exists")
            .pop_front()
            .expect("candidate link non-empty");
        self.pending_total -= 1;
        let idx = self.worker_index(msg.dest);
        self.stats[idx].p2p_bytes_received += msg.byte_size;
        self.stats[idx].message_count += 1;
        let seq = self.next_seq();
        self.trace.push(TraceEvent {
            seq,
            kind: "deliver",
            src: Some(msg.source),
            dst: Some(msg.dest),
            microbatch: Some(msg.microbatch_id),
            bytes: msg.byte_size,
            group_row: None,
            chunk: None,
        });
        msg
    }

    fn check_group(&self, group: &[WorkerId], vectors: &[Vec<T>]) -> Result<usize, FabricError> {
        assert_eq!(group.len(), vectors.len(), "one vector per group member");
        assert!(!group.is_empty(), "empty all-reduce group");
        let expected = vectors[0].len();
        for (rank, v) in vectors.iter().enumerate() {
            if v.len() != expected {
                return Err(FabricError::LengthMismatch {
                    rank,
                    expected,
                    got: v.len(),
                });
            }
        }
        Ok(expected)
    }

    fn reduce_slice(
        &mut self,
        group: &[WorkerId],
        vectors: &mut [Vec<T>],
        range: Range<usize>,
        quantize: bool,
    ) {
        let p = group.len();
        for i in range.clone() {
            let mut acc = vectors[0][i];
            for v in vectors.iter().take(p).skip(1) {
                acc += v[i];
                if quantize {
                    acc = quantize_half(acc);
                }
            }
            for v in vectors.iter_mut() {
                v[i] = acc;
            }
        }
        // Ring model: each member moves 2 (p-1)/p of the payload.
        let payload = range.len() as u64 * self.element_bytes;
        let per_member = if p > 1 {
            2 * (p as u64 - 1) * payload / p as u64
        } else {
            0
        };
        for w in group {
            let idx = self.worker_index(*w);
            self.stats[idx].allreduce_bytes += per_member;
        }
    }

    /// Elementwise sum over the group, accumulated in ascending rank order
    /// (deterministic). With `quantize`, the running sum is snapped to the
    /// binary16 grid after every addition. Every member ends up with the
    /// reduced vector.
    pub fn all_reduce(
        &mut self,
        group: &[WorkerId],
        vectors: &mut [Vec<T>],
        quantize: bool,
    ) -> Result<(), FabricError> {
        let len = self.check_group(group, vectors)?;
        self.reduce_slice(group, vectors, 0..len, quantize);
        let seq = self.next_seq();
        self.trace.push(TraceEvent {
            seq,
            kind: "collective",
            src: None,
            dst: None,
            microbatch: None,
            bytes: len as u64 * self.element_bytes,
            group_row: Some(group[0].row),
            chunk: None,
        });
        Ok(())
    }

    /// Chunked all-reduce: chunks complete in ascending index order and
    /// `on_chunk` observes each completion, enabling overlap with the
    /// optimizer. The concatenated result is bit-identical to `all_reduce`.
    pub fn all_reduce_chunked(
        &mut self,
        group: &[WorkerId],
        vectors: &mut [Vec<T>],
        chunk_elems: usize,
        quantize: bool,
        mut on_chunk: impl FnMut(usize, Range<usize>),
    ) -> Result<(), FabricError> {
        assert!(chunk_elems >= 1, "chunk_elems must be positive");
        let len = self.check_group(group, vectors)?;
        let chunks = len.div_ceil(chunk_elems).max(1);
        for chunk in 0..chunks {
            let lo = chunk * chunk_elems;
            let hi = ((chunk + 1) * chunk_elems).min(len);
            self.reduce_slice(group, vectors, lo..hi, quantize);
            let seq = self.next_seq();
            self.trace.push(TraceEvent {
                seq,
                kind: "collective-chunk",
                src: None,
                dst: None,
                microbatch: None,
                bytes: (hi - lo) as u64 * self.element_bytes,
                group_row: Some(group[0].row),
                chunk: Some(chunk),
            });
            on_chunk(chunk, lo..hi);
        }
        Ok(())
    }

    pub fn stats(&self, worker: WorkerId) -> &CommStats {
        &self.stats[self.worker_index(worker)]
    }

    pub fn all_stats(&self) -> &[CommStats] {
        &self.stats
    }

    pub fn total_bytes_sent(&self) -> u64 {
        self.stats.iter().map(|s| s.p2p_bytes_sent).sum()
    }

    pub fn total_bytes_received(&self) -> u64 {
        self.stats.iter().map(|s| s.p2p_bytes_received).sum()
    }

    /// True at quiescence: nothing pending and send/receive totals agree.
    pub fn is_conserved(&self) -> bool {
        self.pending_total == 0 && self.total_bytes_sent() == self.total_bytes_received()
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    /// Writes the event log as line-delimited JSON records.
    pub fn write_trace(&self, mut out: impl Write) -> std::io::Result<()> {
        for ev in &self.trace {
            serde_json::to_writer(&mut out, ev)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}
