//! Dynamic batching of per-environment inference requests.
//!
//! A batch fires when `b_max` requests are pending (size trigger) or when the
//! oldest pending request has waited `t_max` (time trigger). The batcher is
//! event driven: callers report arrivals and fire a timer at
//! [`DynamicBatcher::next_deadline`]. When both triggers land on the same
//! instant the size trigger wins, which is why arrivals only evaluate the size
//! rule and the time rule waits for the timer.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::pipeline::InferenceRequest;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicBatcherConfig {
    /// Maximum requests per inference call.
    pub b_max: usize,
    /// Maximum wait of the oldest pending request, in seconds.
    pub t_max: f64,
}

impl DynamicBatcherConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.b_max == 0 {
            return Err("b_max must be >= 1".into());
        }
        if !(self.t_max > 0.0) {
            return Err("t_max must be > 0".into());
        }
        Ok(())
    }
}

/// One evaluation of both trigger rules on a pending queue sorted by arrival.
/// Takes the oldest `min(len, b_max)` requests if either rule fires.
pub fn dynamic_batch_collect(
    pending: &mut VecDeque<InferenceRequest>,
    cfg: &DynamicBatcherConfig,
    now: f64,
) -> Option<Vec<InferenceRequest>> {
    let oldest = pending.front()?.arrival_time;
    if pending.len() >= cfg.b_max || now >= oldest + cfg.t_max {
        let n = pending.len().min(cfg.b_max);
        Some(pending.drain(..n).collect())
    } else {
        None
    }
}

#[derive(Debug, Clone)]
pub struct DynamicBatcher {
    cfg: DynamicBatcherConfig,
    pending: VecDeque<InferenceRequest>,
}

impl DynamicBatcher {
    pub fn new(cfg: DynamicBatcherConfig) -> Self {
        Self {
            cfg,
            pending: VecDeque::new(),
        }
    }

    pub fn config(&self) -> &DynamicBatcherConfig {
        &self.cfg
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    /// Record an arrival and return any batches the size trigger releases.
    pub fn on_arrival(&mut self, request: InferenceRequest) -> Vec<Vec<InferenceRequest>> {
        debug_assert!(self
            .pending
            .back()
            .is_none_or(|b| b.arrival_time <= request.arrival_time));
        self.pending.push_back(request);
        let mut out = Vec::new();
        while self.pending.len() >= self.cfg.b_max {
            out.push(self.pending.drain(..self.cfg.b_max).collect());
        }
        out
    }

    /// Evaluate both rules at `now` (timer expiry).
    pub fn on_timer(&mut self, now: f64) -> Vec<Vec<InferenceRequest>> {
        let mut out = Vec::new();
        while let Some(batch) = dynamic_batch_collect(&mut self.pending, &self.cfg, now) {
            out.push(batch);
        }
        out
    }

    /// When the time trigger next fires, if anything is pending.
    pub fn next_deadline(&self) -> Option<f64> {
        self.pending.front().map(|r| r.arrival_time + self.cfg.t_max)
    }

    /// Everything still waiting (used at shutdown).
    pub fn drain(&mut self) -> Vec<InferenceRequest> {
        self.pending.drain(..).collect()
    }
}

/// Replays a whole arrival trace through the event-driven batcher, firing the
/// timer exactly at each deadline. Returns `(dispatch_time, request ids)`.
pub fn replay_trace(arrivals: &[f64], cfg: &DynamicBatcherConfig) -> Vec<(f64, Vec<u64>)> {
    let mut b = DynamicBatcher::new(*cfg);
    let mut out = Vec::new();
    let mut i = 0;
    loop {
        let next_arrival = arrivals.get(i).copied();
        let deadline = b.next_deadline();
        let fire_timer = match (next_arrival, deadline) {
            (None, None) => break,
            (Some(_), None) => false,
            (None, Some(_)) => true,
            // arrivals at the deadline instant are admitted before the timer fires
            (Some(a), Some(d)) => d < a,
        };
        if fire_timer {
            let now = deadline.unwrap_or_default();
            for batch in b.on_timer(now) {
                out.push((now, batch.iter().map(|r| r.id).collect()));
            }
        } else {
            let now = arrivals[i];
            let req = InferenceRequest {
                id: i as u64,
                env_id: i,
                arrival_time: now,
                step_index: 0,
                served_version: None,
            };
            i += 1;
            for batch in b.on_arrival(req) {
                out.push((now, batch.iter().map(|r| r.id).collect()));
            }
        }
    }
    out
}
