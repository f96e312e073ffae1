//! Adam with decoupled weight decay, mixed-precision gradient handling, and
//! the bucketed host-offload execution scheme.
//!
//! The offload store keeps master parameters and both moment vectors
//! host-resident and walks them bucket by bucket: fetch, descale the matching
//! gradient slice, update, write back. Per-element update order is identical
//! to the monolithic step, so both paths produce bit-identical parameters.

use std::ops::Range;

use crate::config::OptimizerConfig;
use crate::halfprec::dequantize_half;
use crate::scalar::Scalar;

/// Modeled device bytes per parameter while a bucket is resident:
/// 4 for the master copy, 8 for the two moments, 4 for the descale scratch.
pub const DEVICE_BYTES_PER_PARAM: u64 = 16;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OptimError {
    #[error("non-finite gradient at element {index} (bucket {bucket}); step skipped")]
    NonFiniteGradient { index: usize, bucket: usize },
    #[error("gradient length {got} does not match parameter count {expected}")]
    LengthMismatch { expected: usize, got: usize },
}

/// Adam state plus the full-precision master parameters.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub first_moment: Vec<T>,
    pub second_moment: Vec<T>,
    pub step_count: u64,
    pub master: Vec<T>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(master: Vec<T>) -> Self {
        let n = master.len();
        Self {
            first_moment: vec![T::zero(); n],
            second_moment: vec![T::zero(); n],
            step_count: 0,
            master,
        }
    }

    pub fn len(&self) -> usize {
        self.master.len()
    }

    pub fn is_empty(&self) -> bool {
        self.master.is_empty()
    }
}

/// Converts reduced-precision gradients to full precision and removes the
/// loss scaling: `dequantize(g) / loss_scale`.
pub fn promote_and_descale<T: Scalar>(grad_q: &[T], loss_scale: f64) -> Vec<T> {
    let scale = T::from_f64_lossy(loss_scale);
    grad_q.iter().map(|&g| dequantize_half(g) / scale).collect()
}

fn scan_finite<T: Scalar>(grad: &[T], bucket_size: usize) -> Result<(), OptimError> {
    for (index, g) in grad.iter().enumerate() {
        if !g.is_finite() {
            return Err(OptimError::NonFiniteGradient {
                index,
                bucket: index / bucket_size.max(1),
            });
        }
    }
    Ok(())
}

/// Element-wise bias-corrected Adam with decoupled weight decay over one
/// slice. `step` is the 1-based step the update belongs to.
fn adam_update_slice<T: Scalar>(
    master: &mut [T],
    m: &mut [T],
    v: &mut [T],
    grad: &[T],
    cfg: &OptimizerConfig,
    step: u64,
) {
    let lr = T::from_f64_lossy(cfg.learning_rate);
    let b1 = T::from_f64_lossy(cfg.beta1);
    let b2 = T::from_f64_lossy(cfg.beta2);
    let eps = T::from_f64_lossy(cfg.epsilon);
    let wd = T::from_f64_lossy(cfg.weight_decay);
    let one = T::one();
    let t = step.min(i32::MAX as u64) as i32;
    let bc1 = T::from_f64_lossy(1.0 - cfg.beta1.powi(t));
    let bc2 = T::from_f64_lossy(1.0 - cfg.beta2.powi(t));

    for i in 0..master.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        master[i] = master[i] - lr * (m_hat / (v_hat.sqrt() + eps)) - lr * wd * master[i];
    }
}

/// Monolithic Adam step on full-precision gradients. On a non-finite
/// gradient the step is skipped with no state mutation.
pub fn adam_step<T: Scalar>(
    state: &mut OptimizerState<T>,
    grad: &[T],
    cfg: &OptimizerConfig,
) -> Result<(), OptimError> {
    if grad.len() != state.len() {
        return Err(OptimError::LengthMismatch {
            expected: state.len(),
            got: grad.len(),
        });
    }
    scan_finite(grad, grad.len().max(1))?;
    let step = state.step_count + 1;
    adam_update_slice(
        &mut state.master,
        &mut state.first_moment,
        &mut state.second_moment,
        grad,
        cfg,
        step,
    );
    state.step_count = step;
    Ok(())
}

/// One entry of the bucket residency trace; `device_bytes` is the modeled
/// device-resident optimizer footprint right after the event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OffloadEvent {
    /// Master + moment slices copied host -> device.
    Fetch { bucket: usize, device_bytes: u64 },
    /// Descale scratch live and the update running.
    StepRun { bucket: usize, device_bytes: u64 },
    /// Slices written device -> host, buffers released.
    Writeback { bucket: usize, device_bytes: u64 },
}

impl OffloadEvent {
    pub fn device_bytes(&self) -> u64 {
        match *self {
            OffloadEvent::Fetch { device_bytes, .. }
            | OffloadEvent::StepRun { device_bytes, .. }
            | OffloadEvent::Writeback { device_bytes, .. } => device_bytes,
        }
    }
}

/// Host-resident optimizer state walked in fixed-size buckets.
#[derive(Debug, Clone, Default)]
pub struct OffloadStore<T> {
    state: Option<OptimizerState<T>>,
    bucket_size: usize,
    in_step: bool,
    events: Vec<OffloadEvent>,
    device_bytes_peak: u64,
}

impl<T: Scalar> OffloadStore<T> {
    pub fn new(master: Vec<T>, bucket_size: usize) -> Self {
        assert!(bucket_size >= 1, "bucket size must be positive");
        Self {
            state: Some(OptimizerState::new(master)),
            bucket_size,
            in_step: false,
            events: Vec::new(),
            device_bytes_peak: 0,
        }
    }

    pub fn bucket_size(&self) -> usize {
        self.bucket_size
    }

    pub fn param_count(&self) -> usize {
        self.state.as_ref().map_or(0, OptimizerState::len)
    }

    /// Buckets per step; the last one may be short.
    pub fn num_buckets(&self) -> usize {
        self.param_count().div_ceil(self.bucket_size)
    }

    pub fn master(&self) -> &[T] {
        &self.state.as_ref().expect("store initialized").master
    }

    pub fn state(&self) -> &OptimizerState<T> {
        self.state.as_ref().expect("store initialized")
    }

    pub fn events(&self) -> &[OffloadEvent] {
        &self.events
    }

    pub fn clear_events(&mut self) {
        self.events.clear();
        self.device_bytes_peak = 0;
    }

    /// Highest modeled device-resident byte count seen in the trace.
    pub fn device_bytes_peak(&self) -> u64 {
        self.device_bytes_peak
    }

    fn bucket_range(&self, bucket: usize) -> Range<usize> {
        let lo = bucket * self.bucket_size;
        let hi = ((bucket + 1) * self.bucket_size).min(self.param_count());
        lo..hi
    }

    /// Validates the step; fails before any mutation on overflow so skipped
    /// steps leave the state untouched, matching the monolithic path.
    pub fn begin_step(&mut self, grad_q: &[T], loss_scale: f64) -> Result<(), OptimError> {
        assert!(!self.in_step, "begin_step called twice");
        assert!(loss_scale > 0.0, "loss scale must be positive");
        let n = self.param_count();
        if grad_q.len() != n {
            return Err(OptimError::LengthMismatch {
                expected: n,
                got: grad_q.len(),
            });
        }
        scan_finite(grad_q, self.bucket_size)?;
        self.in_step = true;
        Ok(())
    }

    /// Processes buckets `range` in ascending order: fetch, promote and
    /// descale the gradient slice, update, write back.
    pub fn step_bucket_range(
        &mut self,
        range: Range<usize>,
        grad_q: &[T],
        loss_scale: f64,
        cfg: &OptimizerConfig,
    ) {
        assert!(
            self.in_step,
            "step_bucket_range outside begin_step/finish_step"
        );
        let step = self.state().step_count + 1;
        for bucket in range {
            let span = self.bucket_range(bucket);
            let len = span.len() as u64;
            if len == 0 {
                continue;
            }
            self.push_event(OffloadEvent::Fetch {
                bucket,
                device_bytes: 12 * len,
            });
            let descaled = promote_and_descale(&grad_q[span.clone()], loss_scale);
            self.push_event(OffloadEvent::StepRun {
                bucket,
                device_bytes: 16 * len,
            });
            let state = self.state.as_mut().expect("store initialized");
            adam_update_slice(
                &mut state.master[span.clone()],
                &mut state.first_moment[span.clone()],
                &mut state.second_moment[span.clone()],
                &descaled,
                cfg,
                step,
            );
            self.push_event(OffloadEvent::Writeback {
                bucket,
                device_bytes: 0,
            });
        }
    }

    pub fn finish_step(&mut self) {
        assert!(self.in_step, "finish_step without begin_step");
        self.state.as_mut().expect("store initialized").step_count += 1;
        self.in_step = false;
    }

    /// Full bucketed step over every bucket.
    pub fn bucketed_step(
        &mut self,
        grad_q: &[T],
        loss_scale: f64,
        cfg: &OptimizerConfig,
    ) -> Result<(), OptimError> {
        self.begin_step(grad_q, loss_scale)?;
        self.step_bucket_range(0..self.num_buckets(), grad_q, loss_scale, cfg);
        self.finish_step();
        Ok(())
    }

    /// Monolithic baseline: promote and descale the whole gradient, then one
    /// Adam step. No offload events are recorded; this is the unoptimized
    /// path that keeps everything device-resident.
    pub fn monolithic_step(
        &mut self,
        grad_q: &[T],
        loss_scale: f64,
        cfg: &OptimizerConfig,
    ) -> Result<(), OptimError> {
        assert!(loss_scale > 0.0, "loss scale must be positive");
        let n = self.param_count();
        if grad_q.len() != n {
            return Err(OptimError::LengthMismatch {
                expected: n,
                got: grad_q.len(),
            });
        }
        scan_finite(grad_q, self.bucket_size)?;
        let descaled = promote_and_descale(grad_q, loss_scale);
        let state = self.state.as_mut().expect("store initialized");
        let step = state.step_count + 1;
        adam_update_slice(
            &mut state.master,
            &mut state.first_moment,
            &mut state.second_moment,
            &descaled,
            cfg,
            step,
        );
        state.step_count = step;
        Ok(())
    }

    fn push_event(&mut self, ev: OffloadEvent) {
        self.device_bytes_peak = self.device_bytes_peak.max(ev.device_bytes());
        self.events.push(ev);
    }
}
