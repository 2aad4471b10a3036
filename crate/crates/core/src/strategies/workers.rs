//! Worker state machines. Each one is resumed by an executor with the outcome
//! of its previous operation and answers with the next.

use std::collections::VecDeque;

use rand_chacha::ChaCha8Rng;

use crate::pipeline::{BatchTarget, InferenceRequest, Trajectory, Version};
use crate::rng;
use crate::sim::program::{BatcherId, ComputeTag, DeviceId, Input, Op, Role, WorkerProgram};
use crate::workload::{sample_episode_length, CostModel, EnvModel, EpisodeModel, HorizonDist, NetworkModel, WorkloadPreset};

const HORIZON_STREAM: u64 = 0;
const JITTER_STREAM: u64 = 1;

/// The episode an environment is currently playing, plus its random streams.
#[derive(Debug, Clone)]
pub struct Episode {
    env_id: usize,
    model: EpisodeModel,
    index: u32,
    horizon: u32,
    steps_done: u32,
    calls: u32,
    versions: Vec<(u32, Version)>,
    t_start: Option<f64>,
    requests: u64,
    horizon_rng: ChaCha8Rng,
    jitter_rng: ChaCha8Rng,
}

impl Episode {
    pub fn new(env_id: usize, model: &EpisodeModel, seed: u64) -> Self {
        let mut horizon_rng = rng::stream(seed, env_id as u64, HORIZON_STREAM);
        let horizon = sample_episode_length(model, &mut horizon_rng);
        Self {
            env_id,
            model: model.clone(),
            index: 0,
            horizon,
            steps_done: 0,
            calls: 0,
            versions: Vec::new(),
            t_start: None,
            requests: 0,
            horizon_rng,
            jitter_rng: rng::stream(seed, env_id as u64, JITTER_STREAM),
        }
    }

    pub fn env_id(&self) -> usize {
        self.env_id
    }

    pub fn horizon(&self) -> u32 {
        self.horizon
    }

    pub fn is_running(&self) -> bool {
        self.steps_done < self.horizon
    }

    /// Steps the next action chunk will execute.
    pub fn chunk_steps(&self) -> u32 {
        self.model.action_chunk.min(self.horizon - self.steps_done)
    }

    pub fn chunk_index(&self) -> u32 {
        self.calls
    }

    pub fn request(&mut self, now: f64) -> InferenceRequest {
        self.t_start.get_or_insert(now);
        let id = ((self.env_id as u64) << 32) | (self.requests & 0xffff_ffff);
        self.requests += 1;
        InferenceRequest {
            id,
            env_id: self.env_id,
            arrival_time: now,
            step_index: self.steps_done,
            served_version: None,
        }
    }

    /// Record the policy version that produced the next chunk.
    pub fn record_chunk(&mut self, now: f64, version: Version) {
        self.t_start.get_or_insert(now);
        self.versions.push((self.calls, version));
        self.calls += 1;
    }

    /// Wall time this env needs for its current chunk on its own CPU core.
    pub fn cpu_time(&mut self, step_cost: f64, jitter: f64) -> f64 {
        EnvModel::cpu_step_time(step_cost, jitter, self.chunk_steps(), &mut self.jitter_rng)
    }

    /// Apply the current chunk; returns the finished trajectory if the episode ended.
    pub fn advance(&mut self, now: f64) -> Option<Trajectory> {
        self.steps_done += self.chunk_steps();
        if self.is_running() {
            return None;
        }
        let success = match self.model.horizon {
            HorizonDist::Fixed { .. } => true,
            HorizonDist::TruncatedGeometric { max, .. } => self.horizon < max,
        };
        let t = Trajectory {
            id: ((self.env_id as u64) << 32) | self.index as u64,
            env_id: self.env_id,
            num_steps: self.horizon,
            num_samples: self.horizon as u64 * self.model.samples_per_step,
            policy_versions: std::mem::take(&mut self.versions),
            t_start: self.t_start.take().unwrap_or(now),
            t_end: now,
            success,
        };
        Some(t)
    }

    /// Start the next episode (new horizon draw).
    pub fn reset(&mut self) {
        self.index += 1;
        self.horizon = sample_episode_length(&self.model, &mut self.horizon_rng);
        self.steps_done = 0;
        self.calls = 0;
        self.versions.clear();
        self.t_start = None;
    }
}

/// How a lockstep rollout worker schedules episodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RolloutMode {
    /// One episode per env per round, then wait for the next policy version.
    Round,
    /// Rounds follow each other without waiting for the trainer; the policy is
    /// re-read before every inference call.
    Continuous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RolloutStage {
    Begin,
    Snapshotted,
    Infer,
    EnvStep,
    Advance,
    Flush,
    Barrier,
}

/// Drives all envs of one rollout device in lockstep: one batched inference
/// call, then every env executes its chunk, then finished episodes are pushed.
pub struct SyncRolloutWorker {
    name: String,
    device: DeviceId,
    envs: Vec<Episode>,
    cost: CostModel,
    mode: RolloutMode,
    load_weights: bool,
    rollout_workers: usize,
    version: Version,
    stage: RolloutStage,
    finished: VecDeque<Trajectory>,
}

impl SyncRolloutWorker {
    pub fn new(
        device: DeviceId,
        env_ids: &[usize],
        preset: &WorkloadPreset,
        seed: u64,
        mode: RolloutMode,
        load_weights: bool,
        rollout_workers: usize,
    ) -> Self {
        Self {
            name: format!("rollout{device}"),
            device,
            envs: env_ids.iter().map(|&e| Episode::new(e, &preset.episode, seed)).collect(),
            cost: preset.cost.clone(),
            mode,
            load_weights,
            rollout_workers,
            version: 0,
            stage: RolloutStage::Begin,
            finished: VecDeque::new(),
        }
    }

    fn load(&self) -> Op {
        Op::Compute {
            devices: vec![self.device],
            duration: self.cost.policy_load(self.rollout_workers),
            tag: ComputeTag::WeightLoad,
        }
    }
}

impl WorkerProgram for SyncRolloutWorker {
    fn name(&self) -> &str {
        &self.name
    }

    fn role(&self) -> Role {
        Role::Rollout
    }

    fn resume(&mut self, now: f64, input: Input) -> Op {
        let mut input = Some(input);
        loop {
            match self.stage {
                RolloutStage::Begin => {
                    if self.mode == RolloutMode::Continuous {
                        self.stage = RolloutStage::Snapshotted;
                        return Op::Snapshot;
                    }
                    self.stage = RolloutStage::Infer;
                }
                RolloutStage::Snapshotted => {
                    self.stage = RolloutStage::Infer;
                    if let Some(Input::Policy(h)) = input.take() {
                        if h.version != self.version {
                            self.version = h.version;
                            if self.load_weights {
                                return self.load();
                            }
                        }
                    }
                }
                RolloutStage::Infer => {
                    let version = self.version;
                    let mut active = 0;
                    for e in self.envs.iter_mut().filter(|e| e.is_running()) {
                        e.record_chunk(now, version);
                        active += 1;
                    }
                    if active == 0 {
                        if self.mode == RolloutMode::Continuous {
                            for e in &mut self.envs {
                                e.reset();
                            }
                            continue;
                        }
                        self.stage = RolloutStage::Barrier;
                        return Op::WaitVersion(self.version + 1);
                    }
                    self.stage = RolloutStage::EnvStep;
                    return Op::Compute {
                        devices: vec![self.device],
                        duration: self.cost.inference_latency(active),
                        tag: ComputeTag::Inference,
                    };
                }
                RolloutStage::EnvStep => {
                    self.stage = RolloutStage::Advance;
                    match self.cost.env {
                        EnvModel::CpuPerEnv { step_cost, jitter } => {
                            // lockstep: the slowest env gates the next inference call
                            let slowest = self
                                .envs
                                .iter_mut()
                                .filter(|e| e.is_running())
                                .map(|e| e.cpu_time(step_cost, jitter))
                                .fold(0.0, f64::max);
                            return Op::Delay { duration: slowest };
                        }
                        EnvModel::GpuBatched { alpha, beta } => {
                            let running = self.envs.iter().filter(|e| e.is_running());
                            let (n, steps) = running.fold((0, 0), |(n, s), e| (n + 1, s.max(e.chunk_steps())));
                            return Op::Compute {
                                devices: vec![self.device],
                                duration: EnvModel::gpu_batch_time(alpha, beta, n, steps),
                                tag: ComputeTag::EnvStep,
                            };
                        }
                    }
                }
                RolloutStage::Advance => {
                    for e in self.envs.iter_mut().filter(|e| e.is_running()) {
                        if let Some(t) = e.advance(now) {
                            self.finished.push_back(t);
                        }
                    }
                    self.stage = RolloutStage::Flush;
                }
                RolloutStage::Flush => {
                    if let Some(t) = self.finished.pop_front() {
                        return Op::Push(t);
                    }
                    self.stage = RolloutStage::Begin;
                }
                RolloutStage::Barrier => {
                    if let Some(Input::Policy(h)) = input.take() {
                        self.version = h.version;
                    }
                    for e in &mut self.envs {
                        e.reset();
                    }
                    self.stage = RolloutStage::Infer;
                    if self.load_weights {
                        return self.load();
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TrainStage {
    Collect,
    Train,
    Publish,
}

fn train_op(devices: &[DeviceId], duration: f64, tag: ComputeTag) -> Op {
    Op::Compute {
        devices: devices.to_vec(),
        duration,
        tag,
    }
}

/// Synchronous trainer: waits for one full round, trains, publishes.
pub struct SyncTrainer {
    devices: Vec<DeviceId>,
    target: BatchTarget,
    cost: CostModel,
    network: NetworkModel,
    stage: TrainStage,
}

impl SyncTrainer {
    pub fn new(devices: Vec<DeviceId>, target: BatchTarget, preset: &WorkloadPreset) -> Self {
        Self {
            devices,
            target,
            cost: preset.cost.clone(),
            network: preset.network,
            stage: TrainStage::Collect,
        }
    }
}

impl WorkerProgram for SyncTrainer {
    fn name(&self) -> &str {
        "trainer"
    }

    fn role(&self) -> Role {
        Role::Trainer
    }

    fn resume(&mut self, _now: f64, input: Input) -> Op {
        match (self.stage, input) {
            (TrainStage::Train, Input::Batch(b)) => {
                let n = self.devices.len();
                let d = self.cost.train_compute(b.total_samples, n) + self.network.allreduce(n) + self.cost.sync_overhead;
                self.stage = TrainStage::Publish;
                train_op(&self.devices, d, ComputeTag::Train)
            }
            (TrainStage::Publish, Input::Done) => {
                self.stage = TrainStage::Collect;
                Op::Publish
            }
            _ => {
                self.stage = TrainStage::Train;
                Op::Collect(self.target)
            }
        }
    }
}

/// Trainer that fires whenever the queued samples reach the global batch.
pub struct AsyncTrainer {
    devices: Vec<DeviceId>,
    global_batch: u64,
    cost: CostModel,
    network: NetworkModel,
    stage: TrainStage,
}

impl AsyncTrainer {
    pub fn new(devices: Vec<DeviceId>, global_batch: u64, preset: &WorkloadPreset) -> Self {
        Self {
            devices,
            global_batch,
            cost: preset.cost.clone(),
            network: preset.network,
            stage: TrainStage::Collect,
        }
    }
}

impl WorkerProgram for AsyncTrainer {
    fn name(&self) -> &str {
        "trainer"
    }

    fn role(&self) -> Role {
        Role::Trainer
    }

    fn resume(&mut self, _now: f64, input: Input) -> Op {
        match (self.stage, input) {
            (TrainStage::Train, Input::Batch(b)) => {
                let n = self.devices.len();
                let d = self.cost.train_compute(b.total_samples, n) + self.network.allreduce(n);
                self.stage = TrainStage::Publish;
                train_op(&self.devices, d, ComputeTag::Train)
            }
            (TrainStage::Publish, Input::Done) => {
                self.stage = TrainStage::Collect;
                Op::Publish
            }
            _ => {
                self.stage = TrainStage::Train;
                Op::Collect(BatchTarget::Samples(self.global_batch))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StreamStage {
    Collect,
    Micro,
    AfterMicro,
    AfterUpdate,
}

/// Trainer that runs forward/backward per micro-batch as data arrives and
/// applies one parameter update per global batch.
pub struct StreamingTrainer {
    devices: Vec<DeviceId>,
    global_batch: u64,
    micro_batch: u64,
    accumulated: u64,
    cost: CostModel,
    network: NetworkModel,
    stage: StreamStage,
}

impl StreamingTrainer {
    pub fn new(devices: Vec<DeviceId>, global_batch: u64, micro_batch: u64, preset: &WorkloadPreset) -> Self {
        Self {
            devices,
            global_batch,
            micro_batch: micro_batch.clamp(1, global_batch.max(1)),
            accumulated: 0,
            cost: preset.cost.clone(),
            network: preset.network,
            stage: StreamStage::Collect,
        }
    }

    fn collect(&mut self) -> Op {
        self.stage = StreamStage::Micro;
        // the last micro-batch closes on the same trajectory a whole-batch
        // collect would, so update boundaries match the non-streamed run
        let remaining = self.global_batch - self.accumulated;
        Op::Collect(BatchTarget::Samples(self.micro_batch.min(remaining)))
    }
}

impl WorkerProgram for StreamingTrainer {
    fn name(&self) -> &str {
        "trainer"
    }

    fn role(&self) -> Role {
        Role::Trainer
    }

    fn resume(&mut self, _now: f64, input: Input) -> Op {
        match (self.stage, input) {
            (StreamStage::Micro, Input::Batch(b)) => {
                self.accumulated += b.total_samples;
                self.stage = StreamStage::AfterMicro;
                let d = self.cost.train_compute(b.total_samples, self.devices.len());
                train_op(&self.devices, d, ComputeTag::MicroBatch)
            }
            (StreamStage::AfterMicro, Input::Done) => {
                if self.accumulated >= self.global_batch {
                    self.accumulated = 0;
                    self.stage = StreamStage::AfterUpdate;
                    let d = self.network.allreduce(self.devices.len());
                    train_op(&self.devices, d, ComputeTag::Update)
                } else {
                    self.collect()
                }
            }
            (StreamStage::AfterUpdate, Input::Done) => {
                self.stage = StreamStage::Collect;
                Op::Publish
            }
            _ => self.collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ServerStage {
    Wait,
    Snapshot,
    Infer,
    Respond,
}

/// Serves batches formed by one dynamic batcher on one device.
pub struct InferenceServer {
    name: String,
    device: DeviceId,
    batcher: BatcherId,
    cost: CostModel,
    rollout_workers: usize,
    version: Version,
    batch: Vec<InferenceRequest>,
    stage: ServerStage,
}

impl InferenceServer {
    pub fn new(device: DeviceId, batcher: BatcherId, preset: &WorkloadPreset, rollout_workers: usize) -> Self {
        Self {
            name: format!("server{device}"),
            device,
            batcher,
            cost: preset.cost.clone(),
            rollout_workers,
            version: 0,
            batch: Vec::new(),
            stage: ServerStage::Wait,
        }
    }

    fn infer(&mut self) -> Op {
        self.stage = ServerStage::Respond;
        Op::Compute {
            devices: vec![self.device],
            duration: self.cost.inference_latency(self.batch.len()),
            tag: ComputeTag::Inference,
        }
    }
}

impl WorkerProgram for InferenceServer {
    fn name(&self) -> &str {
        &self.name
    }

    fn role(&self) -> Role {
        Role::InferenceServer
    }

    fn resume(&mut self, _now: f64, input: Input) -> Op {
        match (self.stage, input) {
            (ServerStage::Snapshot, Input::Requests(reqs)) => {
                self.batch = reqs;
                Op::Snapshot
            }
            (ServerStage::Snapshot, Input::Policy(h)) => {
                if h.version != self.version {
                    self.version = h.version;
                    self.stage = ServerStage::Infer;
                    return Op::Compute {
                        devices: vec![self.device],
                        duration: self.cost.policy_load(self.rollout_workers),
                        tag: ComputeTag::WeightLoad,
                    };
                }
                self.infer()
            }
            (ServerStage::Infer, Input::Done) => self.infer(),
            (ServerStage::Respond, Input::Done) => {
                self.stage = ServerStage::Wait;
                let version = self.version;
                let mut served = std::mem::take(&mut self.batch);
                for r in &mut served {
                    r.served_version = Some(version);
                }
                Op::Respond(served)
            }
            _ => {
                self.stage = ServerStage::Snapshot;
                Op::NextBatch(self.batcher)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EnvStage {
    Submit,
    Await,
    Step,
    Advance,
    Flush,
}

/// One CPU environment submitting its own inference requests.
pub struct CpuEnvWorker {
    name: String,
    batcher: BatcherId,
    episode: Episode,
    step_cost: f64,
    jitter: f64,
    stage: EnvStage,
}

impl CpuEnvWorker {
    pub fn new(env_id: usize, device: DeviceId, batcher: BatcherId, preset: &WorkloadPreset, seed: u64) -> Self {
        let (step_cost, jitter) = match preset.cost.env {
            EnvModel::CpuPerEnv { step_cost, jitter } => (step_cost, jitter),
            EnvModel::GpuBatched { .. } => panic!("CpuEnvWorker needs a CPU env model"),
        };
        Self {
            name: format!("env{env_id}@{device}"),
            batcher,
            episode: Episode::new(env_id, &preset.episode, seed),
            step_cost,
            jitter,
            stage: EnvStage::Submit,
        }
    }
}

impl WorkerProgram for CpuEnvWorker {
    fn name(&self) -> &str {
        &self.name
    }

    fn role(&self) -> Role {
        Role::Env
    }

    fn resume(&mut self, now: f64, input: Input) -> Op {
        match (self.stage, input) {
            (EnvStage::Await, _) => {
                self.stage = EnvStage::Step;
                Op::AwaitResponses(1)
            }
            (EnvStage::Step, Input::Responses(rs)) => {
                let v = rs.first().and_then(|r| r.served_version).unwrap_or(0);
                self.episode.record_chunk(now, v);
                self.stage = EnvStage::Advance;
                Op::Delay {
                    duration: self.episode.cpu_time(self.step_cost, self.jitter),
                }
            }
            (EnvStage::Advance, Input::Done) => match self.episode.advance(now) {
                Some(t) => {
                    self.episode.reset();
                    self.stage = EnvStage::Flush;
                    Op::Push(t)
                }
                None => self.submit(now),
            },
            _ => self.submit(now),
        }
    }
}

impl CpuEnvWorker {
    fn submit(&mut self, now: f64) -> Op {
        self.stage = EnvStage::Await;
        Op::Submit {
            batcher: self.batcher,
            requests: vec![self.episode.request(now)],
        }
    }
}

/// A mini-batch of GPU-simulated environments that step together on their
/// device and submit their requests together.
pub struct GpuEnvGroup {
    name: String,
    device: DeviceId,
    batcher: BatcherId,
    envs: Vec<Episode>,
    alpha: f64,
    beta: f64,
    stage: EnvStage,
    finished: VecDeque<Trajectory>,
}

impl GpuEnvGroup {
    pub fn new(env_ids: &[usize], device: DeviceId, batcher: BatcherId, preset: &WorkloadPreset, seed: u64) -> Self {
        let (alpha, beta) = match preset.cost.env {
            EnvModel::GpuBatched { alpha, beta } => (alpha, beta),
            EnvModel::CpuPerEnv { .. } => panic!("GpuEnvGroup needs a GPU env model"),
        };
        Self {
            name: format!("envgroup{}@{device}", env_ids.first().copied().unwrap_or(0)),
            device,
            batcher,
            envs: env_ids.iter().map(|&e| Episode::new(e, &preset.episode, seed)).collect(),
            alpha,
            beta,
            stage: EnvStage::Submit,
            finished: VecDeque::new(),
        }
    }

    fn submit(&mut self, now: f64) -> Op {
        self.stage = EnvStage::Await;
        Op::Submit {
            batcher: self.batcher,
            requests: self.envs.iter_mut().map(|e| e.request(now)).collect(),
        }
    }
}

impl WorkerProgram for GpuEnvGroup {
    fn name(&self) -> &str {
        &self.name
    }

    fn role(&self) -> Role {
        Role::Env
    }

    fn resume(&mut self, now: f64, input: Input) -> Op {
        match (self.stage, input) {
            (EnvStage::Await, _) => {
                self.stage = EnvStage::Step;
                Op::AwaitResponses(self.envs.len())
            }
            (EnvStage::Step, Input::Responses(rs)) => {
                for r in &rs {
                    let v = r.served_version.unwrap_or(0);
                    if let Some(e) = self.envs.iter_mut().find(|e| e.env_id() == r.env_id) {
                        e.record_chunk(now, v);
                    }
                }
                let steps = self.envs.iter().map(Episode::chunk_steps).max().unwrap_or(0);
                self.stage = EnvStage::Advance;
                Op::Compute {
                    devices: vec![self.device],
                    duration: EnvModel::gpu_batch_time(self.alpha, self.beta, self.envs.len(), steps),
                    tag: ComputeTag::EnvStep,
                }
            }
            (EnvStage::Advance, Input::Done) => {
                for e in &mut self.envs {
                    if let Some(t) = e.advance(now) {
                        e.reset();
                        self.finished.push_back(t);
                    }
                }
                self.stage = EnvStage::Flush;
                match self.finished.pop_front() {
                    Some(t) => Op::Push(t),
                    None => self.submit(now),
                }
            }
            (EnvStage::Flush, Input::Done) => match self.finished.pop_front() {
                Some(t) => Op::Push(t),
                None => self.submit(now),
            },
            _ => self.submit(now),
        }
    }
}
