//! All messages exchanged between actors. Every payload names what it does;
//! `kind`/`summary` feed the replayable event trace.

use std::rc::Rc;

use crate::buffer::Batch;
use crate::cluster::{BroadcastResult, CallValue};
use crate::engine::{Command, GenerationOutcome, GenerationRequest};
use crate::ids::{PolicyVersion, RequestId, TrajectoryId};
use crate::kernel::{ActorId, SimTime};
use crate::reward::{RewardOutcome, RewardRequest};
use crate::rollout::{AbortReason, BarrierKind, Trajectory};
use crate::workload::TaskSpec;

pub enum Msg {
    /// Generic timer / test payload.
    Tick(u64),

    // -- inference engine & proxy -----------------------------------------
    Command(Command),
    StepDone,
    GenerationDone(GenerationOutcome),
    Submit(Box<GenerationRequest>),
    AbortGeneration { request_id: RequestId },
    SuspendAll { reply_to: ActorId },
    ResumeAll { reply_to: ActorId, version: u64 },
    WorkerSuspended { worker: usize },
    WorkerResumed { worker: usize },
    AllSuspended,
    AllResumed,
    WorkerFault,
    WorkerRevive,

    // -- generic cluster broadcast ------------------------------------------
    ExecuteAll {
        method: String,
        arg: CallValue,
        reply_to: ActorId,
    },
    MemberInvoke {
        call_id: u64,
        method: String,
        arg: CallValue,
    },
    MemberReply {
        call_id: u64,
        worker: usize,
        result: Result<CallValue, String>,
    },
    BroadcastDone(BroadcastResult),

    // -- rollout -------------------------------------------------------------
    StartTrajectory {
        trajectory_id: TrajectoryId,
        task: Rc<TaskSpec>,
        init_version: PolicyVersion,
        slot: usize,
    },
    EnvResetDone { slot: usize },
    EnvStepDone {
        slot: usize,
        gen_time: SimTime,
        step_latency: SimTime,
    },
    TurnGo,
    BarrierReport { slot: usize, kind: BarrierKind },
    AbortTrajectory { slot: usize, reason: AbortReason },
    TrajectoryFinished(Box<Trajectory>),
    TrajectoryAborted {
        slot: usize,
        trajectory: Box<Trajectory>,
    },
    ProductionKick,
    StopProduction,
    StaleCutoff { min_version: PolicyVersion },
    DistributionComplete { version: PolicyVersion },

    // -- reward ---------------------------------------------------------------
    RewardInvoke(Box<RewardRequest>),
    RewardDone(Box<RewardOutcome>),
    RewardRetry(Box<RewardRequest>),
    RewardInstanceReady { instance: usize },
    RewardServiceDone { instance: usize },
    RewardIdleCheck { instance: usize, epoch: u64 },

    // -- sample buffer ----------------------------------------------------------
    BufferPut(Box<Trajectory>),
    GetBatch {
        batch_size: u64,
        group_size: u64,
        reply_to: ActorId,
    },
    VersionAdvance { version: PolicyVersion },
    BatchReady(Box<Batch>),

    // -- trainer -------------------------------------------------------------
    TrainerStart,
    UpdateRetry,
    UpdateDone,
    TrainStepDone,
    TrainerFault,
    StoreOutage { until: SimTime },
}

impl Msg {
    pub fn kind(&self) -> &'static str {
        match self {
            Msg::Tick(_) => "tick",
            Msg::Command(c) => match c {
                Command::Add(_) => "cmd_add",
                Command::Abort(_) => "cmd_abort",
                Command::Suspend => "cmd_suspend",
                Command::Resume => "cmd_resume",
            },
            Msg::StepDone => "engine_step_done",
            Msg::GenerationDone(_) => "generation_done",
            Msg::Submit(_) => "submit",
            Msg::AbortGeneration { .. } => "abort_generation",
            Msg::SuspendAll { .. } => "suspend_all",
            Msg::ResumeAll { .. } => "resume_all",
            Msg::WorkerSuspended { .. } => "worker_suspended",
            Msg::WorkerResumed { .. } => "worker_resumed",
            Msg::AllSuspended => "all_suspended",
            Msg::AllResumed => "all_resumed",
            Msg::WorkerFault => "worker_fault",
            Msg::WorkerRevive => "worker_revive",
            Msg::ExecuteAll { .. } => "execute_all",
            Msg::MemberInvoke { .. } => "member_invoke",
            Msg::MemberReply { .. } => "member_reply",
            Msg::BroadcastDone(_) => "broadcast_done",
            Msg::StartTrajectory { .. } => "start_trajectory",
            Msg::EnvResetDone { .. } => "env_reset_done",
            Msg::EnvStepDone { .. } => "env_step_done",
            Msg::TurnGo => "turn_go",
            Msg::BarrierReport { .. } => "barrier_report",
            Msg::AbortTrajectory { .. } => "abort_trajectory",
            Msg::TrajectoryFinished(_) => "trajectory_finished",
            Msg::TrajectoryAborted { .. } => "trajectory_aborted",
            Msg::ProductionKick => "production_kick",
            Msg::StopProduction => "stop_production",
            Msg::StaleCutoff { .. } => "stale_cutoff",
            Msg::DistributionComplete { .. } => "distribution_complete",
            Msg::RewardInvoke(_) => "reward_invoke",
            Msg::RewardDone(_) => "reward_done",
            Msg::RewardRetry(_) => "reward_retry",
            Msg::RewardInstanceReady { .. } => "reward_instance_ready",
            Msg::RewardServiceDone { .. } => "reward_service_done",
            Msg::RewardIdleCheck { .. } => "reward_idle_check",
            Msg::BufferPut(_) => "buffer_put",
            Msg::GetBatch { .. } => "get_batch",
            Msg::VersionAdvance { .. } => "version_advance",
            Msg::BatchReady(_) => "batch_ready",
            Msg::TrainerStart => "trainer_start",
            Msg::UpdateRetry => "update_retry",
            Msg::UpdateDone => "update_done",
            Msg::TrainStepDone => "train_step_done",
            Msg::TrainerFault => "trainer_fault",
            Msg::StoreOutage { .. } => "store_outage",
        }
    }

    pub fn summary(&self) -> String {
        match self {
            Msg::Tick(n) => format!("n={n}"),
            Msg::Command(Command::Add(req)) => format!(
                "req={} traj={} tag={} ctx={} gen={}",
                req.request_id, req.trajectory_id, req.tag, req.context_tokens, req.max_new_tokens
            ),
            Msg::Command(Command::Abort(id)) => format!("req={id}"),
            Msg::Command(_) => String::new(),
            Msg::StepDone => String::new(),
            Msg::GenerationDone(o) => format!(
                "req={} traj={} status={:?} tokens={}",
                o.request_id, o.trajectory_id, o.status, o.response_tokens
            ),
            Msg::Submit(req) => format!(
                "req={} traj={} tag={} ctx={}",
                req.request_id, req.trajectory_id, req.tag, req.context_tokens
            ),
            Msg::AbortGeneration { request_id } => format!("req={request_id}"),
            Msg::SuspendAll { .. } | Msg::ResumeAll { .. } => String::new(),
            Msg::WorkerSuspended { worker } | Msg::WorkerResumed { worker } => {
                format!("worker={worker}")
            }
            Msg::AllSuspended | Msg::AllResumed => String::new(),
            Msg::WorkerFault | Msg::WorkerRevive => String::new(),
            Msg::ExecuteAll { method, .. } => format!("method={method}"),
            Msg::MemberInvoke {
                call_id, method, ..
            } => format!("call={call_id} method={method}"),
            Msg::MemberReply {
                call_id, worker, result
            } => format!(
                "call={call_id} worker={worker} ok={}",
                result.is_ok()
            ),
            Msg::BroadcastDone(r) => format!("call={} n={}", r.call_id, r.results.len()),
            Msg::StartTrajectory {
                trajectory_id,
                task,
                init_version,
                slot,
            } => format!(
                "traj={trajectory_id} task={} init={init_version} slot={slot}",
                task.tag
            ),
            Msg::EnvResetDone { slot } => format!("slot={slot}"),
            Msg::EnvStepDone { slot, .. } => format!("slot={slot}"),
            Msg::TurnGo => String::new(),
            Msg::BarrierReport { slot, kind } => format!("slot={slot} kind={kind:?}"),
            Msg::AbortTrajectory { slot, reason } => format!("slot={slot} reason={reason:?}"),
            Msg::TrajectoryFinished(t) => format!(
                "traj={} task={} turns={}",
                t.trajectory_id,
                t.task_tag,
                t.turns.len()
            ),
            Msg::TrajectoryAborted { trajectory, .. } => format!(
                "traj={} reason={:?}",
                trajectory.trajectory_id, trajectory.abort_reason
            ),
            Msg::ProductionKick | Msg::StopProduction => String::new(),
            Msg::StaleCutoff { min_version } => format!("min={min_version}"),
            Msg::DistributionComplete { version } => format!("version={version}"),
            Msg::RewardInvoke(r) => format!(
                "traj={} class={} tokens={}",
                r.trajectory_id,
                r.cost_class.as_str(),
                r.payload_tokens
            ),
            Msg::RewardDone(o) => format!("traj={} status={:?}", o.trajectory_id, o.status),
            Msg::RewardRetry(r) => format!("traj={} attempt={}", r.trajectory_id, r.attempt),
            Msg::RewardInstanceReady { instance } => format!("instance={instance}"),
            Msg::RewardServiceDone { instance } => format!("instance={instance}"),
            Msg::RewardIdleCheck { instance, .. } => format!("instance={instance}"),
            Msg::BufferPut(t) => format!(
                "traj={} init={} group_pending",
                t.trajectory_id, t.init_version
            ),
            Msg::GetBatch {
                batch_size,
                group_size,
                ..
            } => format!("batch={batch_size} group={group_size}"),
            Msg::VersionAdvance { version } => format!("version={version}"),
            Msg::BatchReady(b) => format!("n={}", b.trajectories.len()),
            Msg::TrainerStart | Msg::UpdateRetry | Msg::UpdateDone | Msg::TrainStepDone => {
                String::new()
            }
            Msg::TrainerFault => String::new(),
            Msg::StoreOutage { until } => format!("until={until}"),
        }
    }
}
