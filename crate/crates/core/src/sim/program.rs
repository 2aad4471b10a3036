//! The instruction set shared by the virtual and live executors.
//!
//! A worker is a state machine: the executor resumes it with the outcome of its
//! previous [`Op`] and receives the next one. Blocking semantics (full pipe,
//! batch threshold, policy barrier, batcher queue, busy device) live entirely
//! in the executor.

use serde::Serialize;

use crate::pipeline::{BatchTarget, InferenceRequest, PolicyHandle, TrainBatch, Trajectory, Version};

pub type WorkerId = usize;
pub type DeviceId = usize;
pub type BatcherId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ComputeTag {
    Inference,
    EnvStep,
    Train,
    MicroBatch,
    Update,
    WeightLoad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Rollout,
    InferenceServer,
    Env,
    Trainer,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// Hold every listed device exclusively for `duration`.
    Compute {
        devices: Vec<DeviceId>,
        duration: f64,
        tag: ComputeTag,
    },
    /// Off-device work (CPU environment step).
    Delay { duration: f64 },
    /// Enqueue a finished trajectory; blocks while the pipe is full.
    Push(Trajectory),
    /// Block until the batch target is met.
    Collect(BatchTarget),
    Snapshot,
    Publish,
    /// Block until the store reaches this version.
    WaitVersion(Version),
    /// Hand requests to a batcher; never blocks.
    Submit {
        batcher: BatcherId,
        requests: Vec<InferenceRequest>,
    },
    /// Block until this many served requests have come back.
    AwaitResponses(usize),
    /// Block until the batcher has formed a batch.
    NextBatch(BatcherId),
    /// Return served requests to their environments.
    Respond(Vec<InferenceRequest>),
    Finish,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Input {
    Start,
    Done,
    Policy(PolicyHandle),
    Batch(TrainBatch),
    Requests(Vec<InferenceRequest>),
    Responses(Vec<InferenceRequest>),
}

pub trait WorkerProgram: Send {
    fn name(&self) -> &str;
    fn role(&self) -> Role;
    fn resume(&mut self, now: f64, input: Input) -> Op;
}
