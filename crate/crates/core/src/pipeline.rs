//! Rollout/actor pipeline primitives.
//!
//! Policy versioning, trajectory transport through a bounded pipe, and the
//! sample-count trigger that turns queued trajectories into a training batch.
//! Everything here is usable from both executors: the virtual kernel drives
//! [`BatchAccumulator`] directly, the live executor goes through [`Pipe`].

use std::collections::VecDeque;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Monotone policy version. Version 0 is the initial policy.
pub type Version = u64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("trajectory {id}: {reason}")]
    InvalidTrajectory { id: u64, reason: String },
    #[error("trajectory {id} was produced by version {produced} which is ahead of actor version {actor}")]
    VersionAhead { id: u64, produced: Version, actor: Version },
    #[error("pipe closed")]
    Closed,
    #[error("pipe closed with {residual_samples} samples below the batch threshold")]
    PartialFinalBatch {
        residual: Vec<Trajectory>,
        residual_samples: u64,
    },
    #[error("batch threshold must be at least 1")]
    ZeroThreshold,
}

/// A published policy: its version plus an opaque token standing in for the weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyHandle {
    pub version: Version,
    pub params_token: u64,
}

/// Holds the current policy. Readers always observe a whole `(version, token)`
/// pair because both live behind one lock.
#[derive(Debug)]
pub struct PolicyStore {
    current: Mutex<PolicyHandle>,
    changed: Condvar,
}

impl PolicyStore {
    pub fn new(initial_token: u64) -> Self {
        Self {
            current: Mutex::new(PolicyHandle {
                version: 0,
                params_token: initial_token,
            }),
            changed: Condvar::new(),
        }
    }

    pub fn snapshot(&self) -> PolicyHandle {
        *self.current.lock()
    }

    /// Publish new parameters. The returned handle carries `previous + 1`.
    pub fn publish(&self, params_token: u64) -> PolicyHandle {
        let mut cur = self.current.lock();
        let next = PolicyHandle {
            version: cur.version + 1,
            params_token,
        };
        *cur = next;
        self.changed.notify_all();
        next
    }

    /// Block until the version reaches `at_least` or the timeout elapses.
    pub fn wait_for(&self, at_least: Version, timeout: Duration) -> Option<PolicyHandle> {
        let deadline = Instant::now() + timeout;
        let mut cur = self.current.lock();
        while cur.version < at_least {
            if self.changed.wait_until(&mut cur, deadline).timed_out() {
                return (cur.version >= at_least).then_some(*cur);
            }
        }
        Some(*cur)
    }

    /// Wake every waiter without publishing (used on shutdown).
    pub fn notify_all(&self) {
        let _guard = self.current.lock();
        self.changed.notify_all();
    }
}

impl Default for PolicyStore {
    fn default() -> Self {
        Self::new(0)
    }
}

/// One completed episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: u64,
    pub env_id: usize,
    pub num_steps: u32,
    pub num_samples: u64,
    /// `(chunk_index, version)` for every action chunk of the episode.
    pub policy_versions: Vec<(u32, Version)>,
    pub t_start: f64,
    pub t_end: f64,
    pub success: bool,
}

impl Trajectory {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let fail = |reason: &str| {
            Err(PipelineError::InvalidTrajectory {
                id: self.id,
                reason: reason.to_string(),
            })
        };
        if self.num_steps == 0 {
            return fail("num_steps must be >= 1");
        }
        if self.num_samples == 0 {
            return fail("num_samples must be >= 1");
        }
        if !(self.t_end > self.t_start) {
            return fail("t_end must be after t_start");
        }
        if self.policy_versions.is_empty() {
            return fail("policy_versions is empty");
        }
        if self.policy_versions.windows(2).any(|w| w[1].1 < w[0].1) {
            return fail("policy versions decrease within the episode");
        }
        Ok(())
    }

    pub fn min_version(&self) -> Version {
        self.policy_versions.iter().map(|p| p.1).min().unwrap_or(0)
    }

    pub fn max_version(&self) -> Version {
        self.policy_versions.iter().map(|p| p.1).max().unwrap_or(0)
    }
}

/// Off-policy lag of a trajectory when consumed by an actor at `actor_version`.
pub fn staleness(trajectory: &Trajectory, actor_version: Version) -> Result<u64, PipelineError> {
    let produced = trajectory.max_version();
    if produced > actor_version {
        return Err(PipelineError::VersionAhead {
            id: trajectory.id,
            produced,
            actor: actor_version,
        });
    }
    Ok(actor_version - trajectory.min_version())
}

/// A single environment's request for an action chunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceRequest {
    pub id: u64,
    pub env_id: usize,
    pub arrival_time: f64,
    pub step_index: u32,
    pub served_version: Option<Version>,
}

/// What the actor waits for before training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BatchTarget {
    /// Cumulative `num_samples` must reach this many samples.
    Samples(u64),
    /// This many trajectories, regardless of size (synchronous rounds).
    Trajectories(usize),
}

impl BatchTarget {
    fn validate(self) -> Result<(), PipelineError> {
        match self {
            BatchTarget::Samples(0) | BatchTarget::Trajectories(0) => {
                Err(PipelineError::ZeroThreshold)
            }
            _ => Ok(()),
        }
    }
}

/// Trajectories consumed by one training step (or one streamed micro-batch).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainBatch {
    pub trajectories: Vec<Trajectory>,
    pub total_samples: u64,
    pub actor_version: Version,
    pub staleness: Vec<u64>,
}

impl TrainBatch {
    pub fn assemble(
        trajectories: Vec<Trajectory>,
        actor_version: Version,
    ) -> Result<Self, PipelineError> {
        let staleness = trajectories
            .iter()
            .map(|t| staleness(t, actor_version))
            .collect::<Result<Vec<_>, _>>()?;
        let total_samples = trajectories.iter().map(|t| t.num_samples).sum();
        Ok(Self {
            trajectories,
            total_samples,
            actor_version,
            staleness,
        })
    }
}

/// Incremental first-crossing rule: trajectories are offered in FIFO order and
/// the batch closes on the first one that brings the total to the target.
#[derive(Debug, Clone)]
pub struct BatchAccumulator {
    target: BatchTarget,
    staged: Vec<Trajectory>,
    samples: u64,
}

impl BatchAccumulator {
    pub fn new(target: BatchTarget) -> Result<Self, PipelineError> {
        target.validate()?;
        Ok(Self {
            target,
            staged: Vec::new(),
            samples: 0,
        })
    }

    pub fn target(&self) -> BatchTarget {
        self.target
    }

    /// Returns the completed set of trajectories once the target is reached.
    pub fn offer(&mut self, trajectory: Trajectory) -> Option<Vec<Trajectory>> {
        self.samples += trajectory.num_samples;
        self.staged.push(trajectory);
        let done = match self.target {
            BatchTarget::Samples(n) => self.samples >= n,
            BatchTarget::Trajectories(n) => self.staged.len() >= n,
        };
        if done {
            self.samples = 0;
            Some(std::mem::take(&mut self.staged))
        } else {
            None
        }
    }

    pub fn staged(&self) -> &[Trajectory] {
        &self.staged
    }

    pub fn staged_samples(&self) -> u64 {
        self.samples
    }

    pub fn into_staged(self) -> Vec<Trajectory> {
        self.staged
    }
}

/// Pure form of the batch trigger over an in-memory queue. Pops the earliest
/// trajectories whose cumulative samples first reach `batch_size_samples`, or
/// returns `None` (leaving the queue untouched) when the queue holds too little.
pub fn collect_train_batch(
    queue: &mut VecDeque<Trajectory>,
    batch_size_samples: u64,
) -> Result<Option<Vec<Trajectory>>, PipelineError> {
    if batch_size_samples == 0 {
        return Err(PipelineError::ZeroThreshold);
    }
    let mut acc = 0u64;
    let mut take = None;
    for (i, t) in queue.iter().enumerate() {
        acc += t.num_samples;
        if acc >= batch_size_samples {
            take = Some(i + 1);
            break;
        }
    }
    Ok(take.map(|n| queue.drain(..n).collect()))
}

#[derive(Debug)]
struct PipeState {
    items: VecDeque<Trajectory>,
    closed: bool,
}

/// Bounded FIFO of trajectories, safe for many producers and one consumer.
/// `push` blocks while the pipe is full.
#[derive(Debug)]
pub struct Pipe {
    capacity: usize,
    state: Mutex<PipeState>,
    not_full: Condvar,
    not_empty: Condvar,
}

impl Pipe {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "pipe capacity must be >= 1");
        Self {
            capacity,
            state: Mutex::new(PipeState {
                items: VecDeque::with_capacity(capacity),
                closed: false,
            }),
            not_full: Condvar::new(),
            not_empty: Condvar::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.state.lock().items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_closed(&self) -> bool {
        self.state.lock().closed
    }

    /// Enqueue, blocking while full. Returns the depth after the push.
    pub fn push(&self, trajectory: Trajectory) -> Result<usize, PipelineError> {
        let mut st = self.state.lock();
        loop {
            if st.closed {
                return Err(PipelineError::Closed);
            }
            if st.items.len() < self.capacity {
                st.items.push_back(trajectory);
                let depth = st.items.len();
                self.not_empty.notify_one();
                return Ok(depth);
            }
            self.not_full.wait(&mut st);
        }
    }

    /// Non-blocking push; hands the trajectory back when the pipe is full.
    pub fn try_push(&self, trajectory: Trajectory) -> Result<Result<usize, Trajectory>, PipelineError> {
        let mut st = self.state.lock();
        if st.closed {
            return Err(PipelineError::Closed);
        }
        if st.items.len() >= self.capacity {
            return Ok(Err(trajectory));
        }
        st.items.push_back(trajectory);
        self.not_empty.notify_one();
        Ok(Ok(st.items.len()))
    }

    /// Dequeue, blocking while empty. `None` once closed and drained.
    pub fn pop(&self) -> Option<Trajectory> {
        let mut st = self.state.lock();
        loop {
            if let Some(t) = st.items.pop_front() {
                self.not_full.notify_one();
                return Some(t);
            }
            if st.closed {
                return None;
            }
            self.not_empty.wait(&mut st);
        }
    }

    pub fn try_pop(&self) -> Option<Trajectory> {
        let mut st = self.state.lock();
        let t = st.items.pop_front();
        if t.is_some() {
            self.not_full.notify_one();
        }
        t
    }

    /// Like [`Pipe::pop`] with a timeout; returns the depth after the pop too.
    pub fn pop_timeout(&self, timeout: Duration) -> Result<Option<(Trajectory, usize)>, PipelineError> {
        let deadline = Instant::now() + timeout;
        let mut st = self.state.lock();
        loop {
            if let Some(t) = st.items.pop_front() {
                self.not_full.notify_one();
                return Ok(Some((t, st.items.len())));
            }
            if st.closed {
                return Err(PipelineError::Closed);
            }
            if self.not_empty.wait_until(&mut st, deadline).timed_out() {
                return Ok(None);
            }
        }
    }

    /// Blocks until the first-crossing rule closes a batch. Trajectories are
    /// pulled one at a time so producers are released as soon as space frees.
    /// If the pipe closes first, the partial residue is returned in the error.
    pub fn collect_train_batch(&self, target: BatchTarget) -> Result<Vec<Trajectory>, PipelineError> {
        let mut acc = BatchAccumulator::new(target)?;
        loop {
            match self.pop() {
                Some(t) => {
                    if let Some(batch) = acc.offer(t) {
                        return Ok(batch);
                    }
                }
                None => {
                    let residual_samples = acc.staged_samples();
                    return Err(PipelineError::PartialFinalBatch {
                        residual: acc.into_staged(),
                        residual_samples,
                    });
                }
            }
        }
    }

    pub fn close(&self) {
        let mut st = self.state.lock();
        st.closed = true;
        self.not_full.notify_all();
        self.not_empty.notify_all();
    }

    /// Drain whatever is left (used when accounting residual samples).
    pub fn drain(&self) -> Vec<Trajectory> {
        let mut st = self.state.lock();
        let out: Vec<_> = st.items.drain(..).collect();
        self.not_full.notify_all();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;
    use std::thread;

    fn traj(id: u64, samples: u64, versions: &[Version]) -> Trajectory {
        Trajectory {
            id,
            env_id: 0,
            num_steps: samples as u32,
            num_samples: samples,
            policy_versions: versions
                .iter()
                .enumerate()
                .map(|(i, v)| (i as u32, *v))
                .collect(),
            t_start: 0.0,
            t_end: 1.0,
            success: false,
        }
    }

    #[test]
    fn publish_increments_version() {
        let store = PolicyStore::new(7);
        assert_eq!(store.snapshot().version, 0);
        assert_eq!(store.publish(1).version, 1);
        for k in 2..=5 {
            assert_eq!(store.publish(k).version, k);
        }
        assert_eq!(store.snapshot(), PolicyHandle { version: 5, params_token: 5 });
    }

    #[test]
    fn concurrent_snapshots_never_see_torn_pairs() {
        // token is always version * 1000 + 17, so a torn read would break the relation
        let store = Arc::new(PolicyStore::new(17));
        let writer = {
            let store = store.clone();
            thread::spawn(move || {
                for v in 1..=2000u64 {
                    store.publish(v * 1000 + 17);
                }
            })
        };
        let readers: Vec<_> = (0..2)
            .map(|_| {
                let store = store.clone();
                thread::spawn(move || {
                    let mut last = 0;
                    let mut seen = 0usize;
                    for _ in 0..20_000 {
                        let h = store.snapshot();
                        assert_eq!(h.params_token, h.version * 1000 + 17);
                        assert!(h.version >= last);
                        last = h.version;
                        seen += 1;
                    }
                    seen
                })
            })
            .collect();
        writer.join().unwrap();
        for r in readers {
            assert_eq!(r.join().unwrap(), 20_000);
        }
        assert_eq!(store.snapshot().version, 2000);
    }

    #[test]
    fn staleness_is_lag_behind_oldest_chunk() {
        assert_eq!(staleness(&traj(1, 4, &[5]), 5).unwrap(), 0);
        assert_eq!(staleness(&traj(1, 4, &[3]), 5).unwrap(), 2);
        assert_eq!(staleness(&traj(1, 4, &[3, 4]), 5).unwrap(), 2);
        assert!(matches!(
            staleness(&traj(9, 4, &[6]), 5),
            Err(PipelineError::VersionAhead { id: 9, .. })
        ));
    }

    #[test]
    fn trajectory_validation() {
        assert!(traj(1, 3, &[0, 1]).validate().is_ok());
        assert!(traj(1, 3, &[1, 0]).validate().is_err());
        assert!(traj(1, 3, &[]).validate().is_err());
        let mut t = traj(1, 3, &[0]);
        t.t_end = t.t_start;
        assert!(t.validate().is_err());
    }

    #[test]
    fn first_crossing_rule() {
        let mut q: VecDeque<_> = (0..3).map(|i| traj(i, 3, &[0])).collect();
        let b = collect_train_batch(&mut q, 8).unwrap().unwrap();
        assert_eq!(b.len(), 3);
        assert_eq!(b.iter().map(|t| t.num_samples).sum::<u64>(), 9);

        let mut q: VecDeque<_> = (0..3).map(|i| traj(i, 1, &[0])).collect();
        for i in 0..3 {
            let b = collect_train_batch(&mut q, 1).unwrap().unwrap();
            assert_eq!(b[0].id, i);
        }
        assert!(collect_train_batch(&mut q, 1).unwrap().is_none());
        assert!(collect_train_batch(&mut q, 0).is_err());
    }

    #[test]
    fn pipe_push_pop_depth() {
        let pipe = Pipe::new(4);
        assert_eq!(pipe.push(traj(0, 1, &[0])).unwrap(), 1);
        assert_eq!(pipe.len(), 1);
        assert_eq!(pipe.pop().unwrap().id, 0);
    }

    #[test]
    fn full_pipe_blocks_until_pop() {
        let pipe = Arc::new(Pipe::new(1));
        pipe.push(traj(0, 1, &[0])).unwrap();
        assert!(pipe.try_push(traj(1, 1, &[0])).unwrap().is_err());
        let producer = {
            let pipe = pipe.clone();
            thread::spawn(move || pipe.push(traj(1, 1, &[0])).unwrap())
        };
        thread::sleep(Duration::from_millis(30));
        assert!(!producer.is_finished());
        assert_eq!(pipe.pop().unwrap().id, 0);
        producer.join().unwrap();
        assert_eq!(pipe.pop().unwrap().id, 1);
    }

    #[test]
    fn closed_pipe_rejects_push_and_returns_residue() {
        let pipe = Pipe::new(8);
        pipe.push(traj(0, 2, &[0])).unwrap();
        pipe.close();
        assert_eq!(pipe.push(traj(1, 1, &[0])), Err(PipelineError::Closed));
        match pipe.collect_train_batch(BatchTarget::Samples(5)) {
            Err(PipelineError::PartialFinalBatch { residual, residual_samples }) => {
                assert_eq!(residual.len(), 1);
                assert_eq!(residual_samples, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn many_producers_conserve_items_in_fifo_per_producer() {
        const N: usize = 4;
        const M: u64 = 250;
        let pipe = Arc::new(Pipe::new(3));
        let producers: Vec<_> = (0..N)
            .map(|p| {
                let pipe = pipe.clone();
                thread::spawn(move || {
                    for i in 0..M {
                        let mut t = traj(i, 1, &[0]);
                        t.env_id = p;
                        pipe.push(t).unwrap();
                    }
                })
            })
            .collect();
        let mut last = vec![None::<u64>; N];
        let mut popped = 0;
        while popped < N * M as usize {
            let t = pipe.pop().unwrap();
            if let Some(prev) = last[t.env_id] {
                assert!(t.id > prev);
            }
            last[t.env_id] = Some(t.id);
            popped += 1;
        }
        for p in producers {
            p.join().unwrap();
        }
        assert_eq!(popped, N * M as usize);
        assert!(pipe.is_empty());
    }

    #[test]
    fn wait_for_version_times_out_then_succeeds() {
        let store = Arc::new(PolicyStore::new(0));
        assert!(store.wait_for(1, Duration::from_millis(5)).is_none());
        let s = store.clone();
        let h = thread::spawn(move || s.wait_for(1, Duration::from_secs(5)));
        thread::sleep(Duration::from_millis(10));
        store.publish(3);
        assert_eq!(h.join().unwrap().unwrap().version, 1);
    }

    #[test]
    fn assemble_computes_staleness() {
        let b = TrainBatch::assemble(vec![traj(0, 2, &[1]), traj(1, 3, &[2, 3])], 3).unwrap();
        assert_eq!(b.total_samples, 5);
        assert_eq!(b.staleness, vec![2, 1]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn batch_totals_bracketed(sizes in prop::collection::vec(1u64..20, 1..200), threshold in 1u64..60) {
                let max = *sizes.iter().max().unwrap();
                let mut acc = BatchAccumulator::new(BatchTarget::Samples(threshold)).unwrap();
                let mut consumed = 0usize;
                for (i, s) in sizes.iter().enumerate() {
                    if let Some(batch) = acc.offer(traj(i as u64, *s, &[0])) {
                        let total: u64 = batch.iter().map(|t| t.num_samples).sum();
                        prop_assert!(total >= threshold && total <= threshold + max - 1);
                        for t in &batch {
                            prop_assert_eq!(t.id as usize, consumed);
                            consumed += 1;
                        }
                    }
                }
                prop_assert_eq!(consumed + acc.staged().len(), sizes.len());
            }
        }
    }
}
