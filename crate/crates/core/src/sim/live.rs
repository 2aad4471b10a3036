//! Live executor: one OS thread per worker program, real sleeps for compute,
//! and the concurrent [`Pipe`] / [`PolicyStore`] for cross-worker traffic.
//!
//! Simulated seconds map to real seconds through `time_scale`. Reported
//! times are converted back to simulated seconds so reports compare directly
//! with the virtual executor.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, FairMutex, Mutex};

use crate::pipeline::{BatchAccumulator, InferenceRequest, Pipe, PipelineError, PolicyStore, TrainBatch};
use crate::strategies::{schedule, DynamicBatcher};

use super::log::EventLog;
use super::metrics::{MetricsCollector, MetricsReport};
use super::program::{Input, Op, Role, WorkerProgram};
use super::{RunConfig, SimError, Termination};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LiveOptions {
    /// Real seconds per simulated second.
    pub time_scale: f64,
    /// Abort if no worker makes progress for this long (real time).
    pub watchdog: Duration,
    pub event_log: bool,
}

impl Default for LiveOptions {
    fn default() -> Self {
        Self {
            time_scale: 0.1,
            watchdog: Duration::from_secs(10),
            event_log: false,
        }
    }
}

const POLL: Duration = Duration::from_millis(20);

struct BatcherShared {
    batcher: DynamicBatcher,
    ready: VecDeque<Vec<InferenceRequest>>,
}

struct Inbox {
    items: Mutex<VecDeque<InferenceRequest>>,
    cv: Condvar,
}

struct Shared {
    start: Instant,
    scale: f64,
    stop: AtomicBool,
    progress: AtomicU64,
    devices: Vec<FairMutex<()>>,
    pipe: Pipe,
    store: PolicyStore,
    batchers: Vec<(Mutex<BatcherShared>, Condvar)>,
    inboxes: Vec<Inbox>,
    owner: Mutex<HashMap<u64, usize>>,
    metrics: Mutex<MetricsCollector>,
    log: Option<Mutex<EventLog>>,
    status: Vec<Mutex<String>>,
    names: Vec<String>,
    termination: Termination,
    error: Mutex<Option<SimError>>,
}

impl Shared {
    fn now(&self) -> f64 {
        self.start.elapsed().as_secs_f64() / self.scale
    }

    fn real(&self, sim: f64) -> Duration {
        Duration::from_secs_f64((sim * self.scale).max(0.0))
    }

    fn instant_of(&self, sim: f64) -> Instant {
        self.start + self.real(sim)
    }

    fn stopped(&self) -> bool {
        self.stop.load(Ordering::SeqCst)
    }

    fn halt(&self) {
        self.stop.store(true, Ordering::SeqCst);
        self.pipe.close();
        self.store.notify_all();
        for (m, cv) in &self.batchers {
            let _g = m.lock();
            cv.notify_all();
        }
        for ib in &self.inboxes {
            let _g = ib.items.lock();
            ib.cv.notify_all();
        }
    }

    fn fail(&self, e: SimError) {
        self.error.lock().get_or_insert(e);
        self.halt();
    }

    fn record(&self, worker: &str, action: &str, ids: Vec<u64>, value: Option<f64>) {
        if let Some(log) = &self.log {
            let t = self.now();
            log.lock().push(t, worker, action, ids, value);
        }
    }

    fn set_status(&self, w: usize, s: impl Into<String>) {
        *self.status[w].lock() = s.into();
        self.progress.fetch_add(1, Ordering::SeqCst);
    }

    fn publish(&self, worker: &str) -> crate::pipeline::PolicyHandle {
        let mut m = self.metrics.lock();
        let h = self.store.publish(self.store.snapshot().version + 1);
        m.on_publish(self.now());
        let done = match self.termination {
            Termination::Updates(n) => m.updates() >= n,
            Termination::Samples(b) => m.trained_samples() >= b,
            Termination::Duration(_) => false,
        };
        drop(m);
        self.record(worker, "publish", vec![], Some(h.version as f64));
        if done {
            self.halt();
        }
        h
    }
}

/// Halts the run when its thread unwinds, so the others stop promptly.
struct PanicGuard<'a>(&'a Shared, String);

impl Drop for PanicGuard<'_> {
    fn drop(&mut self) {
        if thread::panicking() {
            self.0.fail(SimError::Panic(vec![self.1.clone()]));
        }
    }
}

/// Run the same worker programs on real threads.
pub fn run_live(config: &RunConfig, options: &LiveOptions) -> Result<(MetricsReport, Option<EventLog>), SimError> {
    if !(options.time_scale > 0.0) {
        return Err(SimError::Config("time_scale must be > 0".into()));
    }
    let plan = config.plan()?;
    let sched = schedule(&plan, config.seed);
    let names: Vec<String> = sched.workers.iter().map(|w| w.name().to_string()).collect();
    let shared = Arc::new(Shared {
        start: Instant::now(),
        scale: options.time_scale,
        stop: AtomicBool::new(false),
        progress: AtomicU64::new(0),
        devices: (0..plan.device_count).map(|_| FairMutex::new(())).collect(),
        pipe: Pipe::new(plan.pipe_capacity),
        store: PolicyStore::new(0),
        batchers: sched
            .batchers
            .iter()
            .map(|c| {
                let st = BatcherShared {
                    batcher: DynamicBatcher::new(*c),
                    ready: VecDeque::new(),
                };
                (Mutex::new(st), Condvar::new())
            })
            .collect(),
        inboxes: (0..names.len())
            .map(|_| Inbox {
                items: Mutex::new(VecDeque::new()),
                cv: Condvar::new(),
            })
            .collect(),
        owner: Mutex::new(HashMap::new()),
        metrics: Mutex::new(MetricsCollector::new(
            plan.device_count,
            config.metrics_resolution,
            config.warmup_updates,
        )),
        log: options.event_log.then(|| Mutex::new(EventLog::default())),
        status: names.iter().map(|_| Mutex::new("starting".to_string())).collect(),
        names: names.clone(),
        termination: config.termination,
        error: Mutex::new(None),
    });

    let mut handles = Vec::new();
    for b in 0..sched.batchers.len() {
        let sh = Arc::clone(&shared);
        let name = format!("batcher{b}");
        let n = name.clone();
        handles.push((name, thread::spawn(move || {
            let _guard = PanicGuard(&sh, n);
            batcher_loop(&sh, b)
        })));
    }
    for (w, program) in sched.workers.into_iter().enumerate() {
        let sh = Arc::clone(&shared);
        let n = names[w].clone();
        handles.push((names[w].clone(), thread::spawn(move || {
            let _guard = PanicGuard(&sh, n);
            worker_loop(&sh, w, program)
        })));
    }

    let mut last_progress = shared.progress.load(Ordering::SeqCst);
    let mut last_change = Instant::now();
    while !shared.stopped() {
        thread::sleep(POLL);
        if let Termination::Duration(d) = config.termination {
            if shared.now() >= d {
                shared.halt();
                break;
            }
        }
        let p = shared.progress.load(Ordering::SeqCst);
        if p != last_progress {
            last_progress = p;
            last_change = Instant::now();
        } else if last_change.elapsed() > options.watchdog {
            let hung = names
                .iter()
                .enumerate()
                .map(|(w, n)| format!("{n}: {}", shared.status[w].lock()))
                .collect();
            shared.fail(SimError::Watchdog {
                seconds: last_change.elapsed().as_secs_f64(),
                hung,
            });
        }
    }
    let end = shared.now();
    let panicked: Vec<String> = handles.into_iter().filter_map(|(n, h)| h.join().err().map(|_| n)).collect();
    if !panicked.is_empty() {
        return Err(SimError::Panic(panicked));
    }
    if let Some(e) = shared.error.lock().take() {
        return Err(e);
    }
    let residual = shared
        .pipe
        .drain()
        .iter()
        .fold((0, 0), |(n, s), t| (n + 1, s + t.num_samples));
    let metrics = shared.metrics.lock().clone();
    let roles = plan.device_roles();
    let report = metrics.finish(
        "live",
        plan.strategy.label(),
        &plan.preset.name,
        config.seed,
        plan.total_envs,
        plan.global_batch_samples,
        &roles,
        end,
        residual,
    );
    let log = shared.log.as_ref().map(|l| std::mem::take(&mut *l.lock()));
    Ok((report, log))
}

fn batcher_loop(sh: &Shared, b: usize) {
    let (m, cv) = &sh.batchers[b];
    let mut st = m.lock();
    while !sh.stopped() {
        match st.batcher.next_deadline() {
            Some(d) if sh.now() >= d => {
                let now = sh.now();
                let formed = st.batcher.on_timer(now.max(d));
                for batch in formed {
                    dispatched(sh, b, &batch);
                    st.ready.push_back(batch);
                }
                cv.notify_all();
            }
            Some(d) => {
                let _ = cv.wait_until(&mut st, sh.instant_of(d));
            }
            None => {
                let _ = cv.wait_for(&mut st, POLL);
            }
        }
    }
}

fn dispatched(sh: &Shared, b: usize, batch: &[InferenceRequest]) {
    let now = sh.now();
    let oldest = batch.first().map(|r| r.arrival_time).unwrap_or(now);
    sh.metrics.lock().on_dispatch(batch.len(), now - oldest);
    sh.record(&format!("batcher{b}"), "dispatch", batch.iter().map(|r| r.id).collect(), Some(b as f64));
}

fn worker_loop(sh: &Shared, w: usize, mut program: Box<dyn WorkerProgram>) {
    let name = sh.names[w].clone();
    let trainer = program.role() == Role::Trainer;
    let mut input = Input::Start;
    while !sh.stopped() {
        let op = program.resume(sh.now(), input);
        match execute(sh, w, &name, trainer, op) {
            Some(next) => input = next,
            None => break,
        }
    }
    sh.set_status(w, "exited");
}

/// Perform one operation; `None` means the worker should exit.
fn execute(sh: &Shared, w: usize, name: &str, trainer: bool, op: Op) -> Option<Input> {
    match op {
        Op::Compute { mut devices, duration, .. } => {
            sh.set_status(w, format!("waiting for devices {devices:?}"));
            devices.sort_unstable();
            devices.dedup();
            let guards: Vec<_> = devices.iter().map(|&d| sh.devices[d].lock()).collect();
            sh.set_status(w, "computing");
            let ids: Vec<u64> = devices.iter().map(|&d| d as u64).collect();
            sh.record(name, "compute_start", ids.clone(), Some(duration));
            thread::sleep(sh.real(duration));
            sh.metrics.lock().on_compute(&devices, duration, trainer);
            sh.record(name, "compute_end", ids, None);
            drop(guards);
            Some(Input::Done)
        }
        Op::Delay { duration } => {
            sh.set_status(w, "delaying");
            thread::sleep(sh.real(duration));
            Some(Input::Done)
        }
        Op::Push(t) => {
            if let Err(e) = t.validate() {
                sh.fail(e.into());
                return None;
            }
            sh.set_status(w, "pushing");
            let id = t.id;
            let min_version = t.min_version();
            sh.metrics.lock().on_produced();
            match sh.pipe.push(t) {
                Ok(depth) => {
                    sh.metrics.lock().on_depth(sh.now(), depth);
                    sh.record(name, "push", vec![id], Some(min_version as f64));
                    sh.set_status(w, "pushed");
                    Some(Input::Done)
                }
                Err(_) => None,
            }
        }
        Op::Collect(target) => {
            let mut acc = match BatchAccumulator::new(target) {
                Ok(a) => a,
                Err(e) => {
                    sh.fail(e.into());
                    return None;
                }
            };
            sh.set_status(w, format!("collecting {target:?}"));
            loop {
                match sh.pipe.pop_timeout(POLL) {
                    Ok(Some((t, depth))) => {
                        sh.metrics.lock().on_depth(sh.now(), depth);
                        sh.record(name, "pop", vec![t.id], Some(depth as f64));
                        if let Some(trajs) = acc.offer(t) {
                            let version = sh.store.snapshot().version;
                            let batch = match TrainBatch::assemble(trajs, version) {
                                Ok(b) => b,
                                Err(e) => {
                                    sh.fail(e.into());
                                    return None;
                                }
                            };
                            sh.metrics.lock().on_batch(&batch);
                            let ids = batch.trajectories.iter().map(|t| t.id).collect();
                            sh.record(name, "collect", ids, Some(version as f64));
                            sh.set_status(w, "collected");
                            return Some(Input::Batch(batch));
                        }
                    }
                    Ok(None) if sh.stopped() => return None,
                    Ok(None) => {}
                    Err(PipelineError::Closed) | Err(_) => return None,
                }
            }
        }
        Op::Snapshot => Some(Input::Policy(sh.store.snapshot())),
        Op::Publish => Some(Input::Policy(sh.publish(name))),
        Op::WaitVersion(v) => {
            sh.set_status(w, format!("waiting for version {v}"));
            loop {
                if let Some(h) = sh.store.wait_for(v, POLL) {
                    sh.set_status(w, "version ready");
                    return Some(Input::Policy(h));
                }
                if sh.stopped() {
                    return None;
                }
            }
        }
        Op::Submit { batcher, requests } => {
            let (m, cv) = &sh.batchers[batcher];
            {
                let mut owner = sh.owner.lock();
                for r in &requests {
                    owner.insert(r.id, w);
                }
            }
            let mut st = m.lock();
            for mut r in requests {
                // stamped under the lock so arrivals stay ordered across threads
                r.arrival_time = sh.now();
                sh.record(name, "submit", vec![r.id], Some(batcher as f64));
                for batch in st.batcher.on_arrival(r) {
                    dispatched(sh, batcher, &batch);
                    st.ready.push_back(batch);
                }
            }
            cv.notify_all();
            Some(Input::Done)
        }
        Op::AwaitResponses(k) => {
            sh.set_status(w, format!("awaiting {k} responses"));
            let ib = &sh.inboxes[w];
            let mut items = ib.items.lock();
            while items.len() < k {
                if sh.stopped() {
                    return None;
                }
                let _ = ib.cv.wait_for(&mut items, POLL);
            }
            let rs = items.drain(..k).collect();
            Some(Input::Responses(rs))
        }
        Op::NextBatch(b) => {
            sh.set_status(w, format!("waiting on batcher {b}"));
            let (m, cv) = &sh.batchers[b];
            let mut st = m.lock();
            loop {
                if let Some(batch) = st.ready.pop_front() {
                    sh.set_status(w, "serving");
                    return Some(Input::Requests(batch));
                }
                if sh.stopped() {
                    return None;
                }
                let _ = cv.wait_for(&mut st, POLL);
            }
        }
        Op::Respond(reqs) => {
            let version = reqs.first().and_then(|r| r.served_version).unwrap_or(0);
            sh.record(name, "respond", reqs.iter().map(|r| r.id).collect(), Some(version as f64));
            let mut by_owner: Vec<(usize, Vec<InferenceRequest>)> = Vec::new();
            {
                let mut owner = sh.owner.lock();
                for r in reqs {
                    let Some(o) = owner.remove(&r.id) else {
                        drop(owner);
                        sh.fail(SimError::Config(format!("response for unknown request {}", r.id)));
                        return None;
                    };
                    match by_owner.iter_mut().find(|(x, _)| *x == o) {
                        Some((_, v)) => v.push(r),
                        None => by_owner.push((o, vec![r])),
                    }
                }
            }
            for (o, rs) in by_owner {
                let ib = &sh.inboxes[o];
                ib.items.lock().extend(rs);
                ib.cv.notify_all();
            }
            Some(Input::Done)
        }
        Op::Finish => None,
    }
}
