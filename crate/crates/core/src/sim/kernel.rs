//! Deterministic discrete-event interpreter for worker programs.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, VecDeque};

use crate::pipeline::{BatchAccumulator, InferenceRequest, PolicyHandle, TrainBatch, Trajectory, Version};
use crate::strategies::{DynamicBatcher, DynamicBatcherConfig};

use super::log::EventLog;
use super::metrics::MetricsCollector;
use super::program::{BatcherId, ComputeTag, DeviceId, Input, Op, Role, WorkerId, WorkerProgram};
use super::{SimError, Termination};

enum Action {
    Resume(WorkerId, Input),
    ComputeEnd(WorkerId),
    Timer(BatcherId),
}

struct Event {
    time: f64,
    // timers sort after every other event at the same instant, so arrivals
    // landing exactly on a deadline are admitted first
    class: u8,
    seq: u64,
    action: Action,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then(other.class.cmp(&self.class))
            .then(other.seq.cmp(&self.seq))
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Blocked {
    Running,
    Device(Vec<DeviceId>),
    Computing,
    Delaying,
    PipeFull,
    Collect(u64),
    Version(Version),
    Responses(usize),
    Batcher(BatcherId),
    Finished,
}

struct ComputeRequest {
    worker: WorkerId,
    devices: Vec<DeviceId>,
    duration: f64,
    tag: ComputeTag,
}

struct BatcherState {
    batcher: DynamicBatcher,
    ready: VecDeque<Vec<InferenceRequest>>,
    server: Option<WorkerId>,
    timer_at: Option<f64>,
}

pub struct Kernel {
    now: f64,
    seq: u64,
    heap: BinaryHeap<Event>,
    workers: Vec<Box<dyn WorkerProgram>>,
    names: Vec<String>,
    roles: Vec<Role>,
    state: Vec<Blocked>,
    device_owner: Vec<Option<WorkerId>>,
    device_queue: VecDeque<ComputeRequest>,
    running: HashMap<WorkerId, ComputeRequest>,
    pipe: VecDeque<Trajectory>,
    capacity: usize,
    blocked_pushers: VecDeque<(WorkerId, Trajectory)>,
    collector: Option<(WorkerId, BatchAccumulator)>,
    version: Version,
    version_waiters: Vec<(WorkerId, Version)>,
    batchers: Vec<BatcherState>,
    inbox: Vec<VecDeque<InferenceRequest>>,
    owner: HashMap<u64, WorkerId>,
    pub metrics: MetricsCollector,
    pub log: Option<EventLog>,
    termination: Termination,
    done: bool,
}

impl Kernel {
    pub fn new(
        workers: Vec<Box<dyn WorkerProgram>>,
        batchers: &[DynamicBatcherConfig],
        devices: usize,
        pipe_capacity: usize,
        termination: Termination,
        metrics: MetricsCollector,
        log: bool,
    ) -> Self {
        let n = workers.len();
        let names = workers.iter().map(|w| w.name().to_string()).collect();
        let roles = workers.iter().map(|w| w.role()).collect();
        Self {
            now: 0.0,
            seq: 0,
            heap: BinaryHeap::new(),
            workers,
            names,
            roles,
            state: vec![Blocked::Running; n],
            device_owner: vec![None; devices],
            device_queue: VecDeque::new(),
            running: HashMap::new(),
            pipe: VecDeque::new(),
            capacity: pipe_capacity.max(1),
            blocked_pushers: VecDeque::new(),
            collector: None,
            version: 0,
            version_waiters: Vec::new(),
            batchers: batchers
                .iter()
                .map(|c| BatcherState {
                    batcher: DynamicBatcher::new(*c),
                    ready: VecDeque::new(),
                    server: None,
                    timer_at: None,
                })
                .collect(),
            inbox: vec![VecDeque::new(); n],
            owner: HashMap::new(),
            metrics,
            log: log.then(EventLog::default),
            termination,
            done: false,
        }
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    fn schedule(&mut self, time: f64, class: u8, action: Action) {
        self.seq += 1;
        self.heap.push(Event {
            time,
            class,
            seq: self.seq,
            action,
        });
    }

    fn wake(&mut self, w: WorkerId, input: Input) {
        self.state[w] = Blocked::Running;
        self.schedule(self.now, 0, Action::Resume(w, input));
    }

    fn record(&mut self, w: WorkerId, action: &str, ids: Vec<u64>, value: Option<f64>) {
        if let Some(log) = &mut self.log {
            log.push(self.now, &self.names[w], action, ids, value);
        }
    }

    /// Run until the termination condition holds.
    pub fn run(&mut self) -> Result<(), SimError> {
        for w in 0..self.workers.len() {
            self.schedule(0.0, 0, Action::Resume(w, Input::Start));
        }
        while let Some(ev) = self.heap.pop() {
            if let Termination::Duration(limit) = self.termination {
                if ev.time > limit {
                    self.now = limit;
                    self.done = true;
                    break;
                }
            }
            debug_assert!(ev.time >= self.now, "clock went backwards");
            self.now = ev.time;
            match ev.action {
                Action::Resume(w, input) => {
                    let op = self.workers[w].resume(self.now, input);
                    self.apply(w, op)?;
                }
                Action::ComputeEnd(w) => self.finish_compute(w),
                Action::Timer(b) => self.fire_timer(b),
            }
            if self.done {
                break;
            }
        }
        if !self.done {
            if let Termination::Duration(limit) = self.termination {
                // nothing left to do before the horizon
                if self.blocked_workers().is_empty() {
                    self.now = limit;
                    return Ok(());
                }
            }
            return Err(SimError::Deadlock {
                time: self.now,
                blocked: self.blocked_workers(),
            });
        }
        Ok(())
    }

    fn blocked_workers(&self) -> Vec<String> {
        self.state
            .iter()
            .enumerate()
            .filter(|(_, s)| !matches!(s, Blocked::Finished))
            .map(|(w, s)| format!("{} waiting on {:?}", self.names[w], s))
            .collect()
    }

    fn apply(&mut self, w: WorkerId, op: Op) -> Result<(), SimError> {
        match op {
            Op::Compute { devices, duration, tag } => {
                if let Some(&bad) = devices.iter().find(|&&d| d >= self.device_owner.len()) {
                    return Err(SimError::Config(format!("{} uses unknown device {bad}", self.names[w])));
                }
                self.state[w] = Blocked::Device(devices.clone());
                self.device_queue.push_back(ComputeRequest {
                    worker: w,
                    devices,
                    duration: duration.max(0.0),
                    tag,
                });
                self.dispatch_devices();
            }
            Op::Delay { duration } => {
                self.state[w] = Blocked::Delaying;
                self.schedule(self.now + duration.max(0.0), 0, Action::Resume(w, Input::Done));
            }
            Op::Push(t) => {
                t.validate()?;
                self.metrics.on_produced();
                if self.pipe.len() < self.capacity {
                    self.enqueue(w, t);
                    self.wake(w, Input::Done);
                    self.feed_collector()?;
                } else {
                    self.state[w] = Blocked::PipeFull;
                    self.blocked_pushers.push_back((w, t));
                }
            }
            Op::Collect(target) => {
                let acc = BatchAccumulator::new(target)?;
                let need = match target {
                    crate::pipeline::BatchTarget::Samples(s) => s,
                    crate::pipeline::BatchTarget::Trajectories(n) => n as u64,
                };
                self.state[w] = Blocked::Collect(need);
                self.collector = Some((w, acc));
                self.feed_collector()?;
            }
            Op::Snapshot => {
                let h = self.handle();
                self.wake(w, Input::Policy(h));
            }
            Op::Publish => {
                self.version += 1;
                let h = self.handle();
                self.metrics.on_publish(self.now);
                self.record(w, "publish", vec![], Some(self.version as f64));
                self.wake(w, Input::Policy(h));
                let ready: Vec<_> = self
                    .version_waiters
                    .iter()
                    .filter(|(_, v)| *v <= self.version)
                    .map(|(w, _)| *w)
                    .collect();
                self.version_waiters.retain(|(_, v)| *v > self.version);
                for r in ready {
                    self.wake(r, Input::Policy(h));
                }
                self.check_termination();
            }
            Op::WaitVersion(v) => {
                if self.version >= v {
                    let h = self.handle();
                    self.wake(w, Input::Policy(h));
                } else {
                    self.state[w] = Blocked::Version(v);
                    self.version_waiters.push((w, v));
                }
            }
            Op::Submit { batcher, requests } => {
                if batcher >= self.batchers.len() {
                    return Err(SimError::Config(format!("{} uses unknown batcher {batcher}", self.names[w])));
                }
                for r in requests {
                    self.owner.insert(r.id, w);
                    self.record(w, "submit", vec![r.id], Some(batcher as f64));
                    let formed = self.batchers[batcher].batcher.on_arrival(r);
                    self.enqueue_batches(batcher, formed);
                }
                self.arm_timer(batcher);
                self.serve(batcher);
                self.wake(w, Input::Done);
            }
            Op::AwaitResponses(k) => {
                if self.inbox[w].len() >= k {
                    let rs = self.inbox[w].drain(..k).collect();
                    self.wake(w, Input::Responses(rs));
                } else {
                    self.state[w] = Blocked::Responses(k);
                }
            }
            Op::NextBatch(b) => {
                if b >= self.batchers.len() {
                    return Err(SimError::Config(format!("{} uses unknown batcher {b}", self.names[w])));
                }
                self.state[w] = Blocked::Batcher(b);
                self.batchers[b].server = Some(w);
                self.serve(b);
            }
            Op::Respond(reqs) => {
                let version = reqs.first().and_then(|r| r.served_version).unwrap_or(self.version);
                self.record(w, "respond", reqs.iter().map(|r| r.id).collect(), Some(version as f64));
                let mut targets = Vec::new();
                for r in reqs {
                    let Some(&o) = self.owner.get(&r.id) else {
                        return Err(SimError::Config(format!("response for unknown request {}", r.id)));
                    };
                    self.owner.remove(&r.id);
                    self.inbox[o].push_back(r);
                    if !targets.contains(&o) {
                        targets.push(o);
                    }
                }
                for o in targets {
                    if let Blocked::Responses(k) = self.state[o] {
                        if self.inbox[o].len() >= k {
                            let rs = self.inbox[o].drain(..k).collect();
                            self.wake(o, Input::Responses(rs));
                        }
                    }
                }
                self.wake(w, Input::Done);
            }
            Op::Finish => self.state[w] = Blocked::Finished,
        }
        Ok(())
    }

    fn handle(&self) -> PolicyHandle {
        PolicyHandle {
            version: self.version,
            params_token: self.version,
        }
    }

    fn check_termination(&mut self) {
        let updates = self.metrics.updates();
        self.done = match self.termination {
            Termination::Updates(n) => updates >= n,
            Termination::Samples(budget) => self.metrics.trained_samples() >= budget,
            Termination::Duration(_) => false,
        };
    }

    fn dispatch_devices(&mut self) {
        let mut reserved = vec![false; self.device_owner.len()];
        let mut i = 0;
        while i < self.device_queue.len() {
            let req = &self.device_queue[i];
            let free = req
                .devices
                .iter()
                .all(|&d| self.device_owner[d].is_none() && !reserved[d]);
            if free {
                let req = self.device_queue.remove(i).expect("index in range");
                for &d in &req.devices {
                    self.device_owner[d] = Some(req.worker);
                }
                self.state[req.worker] = Blocked::Computing;
                let ids = req.devices.iter().map(|&d| d as u64).collect();
                self.record(req.worker, "compute_start", ids, Some(req.duration));
                self.schedule(self.now + req.duration, 0, Action::ComputeEnd(req.worker));
                self.running.insert(req.worker, req);
            } else {
                // FIFO per device: later requests may not jump over this one
                for &d in &req.devices {
                    reserved[d] = true;
                }
                i += 1;
            }
        }
    }

    fn finish_compute(&mut self, w: WorkerId) {
        let Some(req) = self.running.remove(&w) else { return };
        for &d in &req.devices {
            self.device_owner[d] = None;
        }
        let trainer = self.roles[w] == Role::Trainer;
        self.metrics.on_compute(&req.devices, req.duration, trainer);
        let ids = req.devices.iter().map(|&d| d as u64).collect();
        self.record(w, "compute_end", ids, None);
        let _ = req.tag;
        self.wake(w, Input::Done);
        self.dispatch_devices();
    }

    fn enqueue(&mut self, w: WorkerId, t: Trajectory) {
        self.record(w, "push", vec![t.id], Some(t.min_version() as f64));
        self.pipe.push_back(t);
        self.metrics.on_depth(self.now, self.pipe.len());
    }

    fn feed_collector(&mut self) -> Result<(), SimError> {
        while self.collector.is_some() {
            let Some(t) = self.pipe.pop_front() else { break };
            let (w, acc) = self.collector.as_mut().expect("checked above");
            let w = *w;
            let id = t.id;
            let closed = acc.offer(t);
            self.metrics.on_depth(self.now, self.pipe.len());
            self.record(w, "pop", vec![id], Some(self.pipe.len() as f64));
            // space freed: admit one blocked producer
            if let Some((p, traj)) = self.blocked_pushers.pop_front() {
                self.enqueue(p, traj);
                self.wake(p, Input::Done);
            }
            if let Some(trajs) = closed {
                self.collector = None;
                let batch = TrainBatch::assemble(trajs, self.version)?;
                self.metrics.on_batch(&batch);
                self.record(
                    w,
                    "collect",
                    batch.trajectories.iter().map(|t| t.id).collect(),
                    Some(self.version as f64),
                );
                self.wake(w, Input::Batch(batch));
            }
        }
        Ok(())
    }

    fn enqueue_batches(&mut self, b: BatcherId, formed: Vec<Vec<InferenceRequest>>) {
        for batch in formed {
            let oldest = batch.first().map(|r| r.arrival_time).unwrap_or(self.now);
            self.metrics.on_dispatch(batch.len(), self.now - oldest);
            if let Some(log) = &mut self.log {
                log.push(
                    self.now,
                    &format!("batcher{b}"),
                    "dispatch",
                    batch.iter().map(|r| r.id).collect(),
                    Some(b as f64),
                );
            }
            self.batchers[b].ready.push_back(batch);
        }
    }

    fn arm_timer(&mut self, b: BatcherId) {
        let deadline = self.batchers[b].batcher.next_deadline();
        if deadline != self.batchers[b].timer_at {
            self.batchers[b].timer_at = deadline;
            if let Some(d) = deadline {
                self.schedule(d.max(self.now), 1, Action::Timer(b));
            }
        }
    }

    fn fire_timer(&mut self, b: BatcherId) {
        // stale timers (deadline moved) are ignored
        if self.batchers[b].timer_at != Some(self.now) {
            return;
        }
        self.batchers[b].timer_at = None;
        let formed = self.batchers[b].batcher.on_timer(self.now);
        self.enqueue_batches(b, formed);
        self.arm_timer(b);
        self.serve(b);
    }

    fn serve(&mut self, b: BatcherId) {
        let st = &mut self.batchers[b];
        if let Some(server) = st.server {
            if let Some(batch) = st.ready.pop_front() {
                st.server = None;
                self.wake(server, Input::Requests(batch));
            }
        }
    }

    /// Trajectories and samples not consumed by any batch.
    pub fn residual(&self) -> (u64, u64) {
        let staged = self.collector.as_ref().map(|(_, a)| a.staged()).unwrap_or(&[]);
        let all = self
            .pipe
            .iter()
            .chain(staged.iter())
            .chain(self.blocked_pushers.iter().map(|(_, t)| t));
        all.fold((0, 0), |(n, s), t| (n + 1, s + t.num_samples))
    }
}
