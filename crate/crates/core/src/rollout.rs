//! Trajectory-level rollout: per-environment manager lifecycles, the rollout
//! scheduler supervising them, and the redundant-environment optimization.
//!
//! Each environment slot is an actor that runs one trajectory at a time:
//! reset (with fail-slow penalties and fail-stop aborts), then per turn a
//! generation request against the full accumulated context followed by an
//! env step, and finally a non-blocking reward dispatch. The scheduler pools
//! all launched slots; completed trajectories fill the batch quota in
//! completion order, and once the quota is met the remaining in-flight
//! surplus is aborted.
//!
//! A lockstep mode exists purely as the experimental baseline: all live
//! environments synchronize on every turn, so one slow draw stalls the
//! whole wave.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::rc::Rc;

use rand::Rng;
use serde::Serialize;

use crate::cluster::{dispatch_serverless, ClusterCore};
use crate::engine::{GenerationOutcome, GenerationRequest, GenerationStatus};
use crate::error::SimError;
use crate::ids::{GroupId, PolicyVersion, RequestId, TrajectoryId};
use crate::kernel::{Actor, ActorId, Ctx, EventId, SimTime};
use crate::metrics::MetricsHub;
use crate::msg::Msg;
use crate::reward::RewardRequest;
use crate::workload::TaskSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryStatus {
    Resetting,
    Generating,
    SteppingEnv,
    AwaitingReward,
    Completed,
    Aborted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AbortReason {
    /// Batch quota met; surplus rollout terminated.
    Surplus,
    /// Asynchronous bound violated; cannot be consumed anymore.
    Stale,
    /// Environment hard failure (fail-stop).
    EnvFailure,
    /// Inference worker failure propagated into the trajectory.
    WorkerFailure,
    /// Run shutdown.
    RunEnd,
}

#[derive(Debug, Clone, Serialize)]
pub struct TurnRecord {
    pub obs_tokens: u64,
    pub action_tokens: u64,
    /// Generation submit time.
    pub t_start: SimTime,
    /// Env step completion time.
    pub t_end: SimTime,
    pub gen_time: SimTime,
    pub env_time: SimTime,
}

/// The unit of rollout: a versioned multi-turn record.
#[derive(Debug, Clone, Serialize)]
pub struct Trajectory {
    pub trajectory_id: TrajectoryId,
    pub group_id: Option<GroupId>,
    pub env_slot: usize,
    pub task_tag: String,
    /// The policy version that initiated generation; immutable afterwards.
    pub init_version: PolicyVersion,
    pub turns: Vec<TurnRecord>,
    pub status: TrajectoryStatus,
    pub reward: Option<f64>,
    /// Unique observation tokens across turns.
    pub prompt_tokens: u64,
    /// Generated action tokens across turns.
    pub response_tokens: u64,
    pub reset_time: SimTime,
    pub env_time: SimTime,
    pub gen_time: SimTime,
    pub started_at: SimTime,
    pub finished_at: SimTime,
    pub abort_reason: Option<AbortReason>,
}

/// Sizing of one collection: `groups * group_size` trajectories needed,
/// `ceil(redundancy * groups * group_size)` environments launched.
#[derive(Debug, Clone, Serialize)]
pub struct RolloutPlan {
    pub groups: u64,
    pub group_size: u64,
    pub redundancy: f64,
    /// Replacement launches per batch are capped at
    /// `replacement_cap_factor * launched`.
    pub replacement_cap_factor: f64,
}

impl RolloutPlan {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.groups == 0 || self.group_size == 0 {
            return Err(SimError::config("rollout plan needs groups, group_size >= 1"));
        }
        if !self.redundancy.is_finite() || self.redundancy < 1.0 {
            return Err(SimError::config(format!(
                "redundancy {} must be >= 1",
                self.redundancy
            )));
        }
        if !self.replacement_cap_factor.is_finite() || self.replacement_cap_factor < 1.0 {
            return Err(SimError::config("replacement_cap_factor must be >= 1"));
        }
        Ok(())
    }

    pub fn quota(&self) -> u64 {
        self.groups * self.group_size
    }

    pub fn launched(&self) -> u64 {
        (self.redundancy * self.quota() as f64).ceil() as u64
    }

    pub fn launch_cap(&self) -> u64 {
        (self.replacement_cap_factor * self.launched() as f64).ceil() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RolloutMode {
    TrajectoryLevel,
    Lockstep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BarrierKind {
    Reset,
    Turn,
}

// ---------------------------------------------------------------------------
// Environment slot
// ---------------------------------------------------------------------------

#[derive(Debug)]
struct ActiveTrajectory {
    traj: Trajectory,
    task: Rc<TaskSpec>,
    stream: String,
    obs: Vec<u64>,
    acts: Vec<u64>,
    hard_fail: bool,
    turn: usize,
    pending_timer: Option<EventId>,
    current_request: Option<RequestId>,
    gen_submit_at: SimTime,
    aborting: Option<AbortReason>,
}

impl ActiveTrajectory {
    fn context_tokens(&self) -> u64 {
        // full accumulated history: all observations so far plus all prior
        // actions; strictly increasing across turns
        let obs: u64 = self.obs[..=self.turn].iter().sum();
        let acts: u64 = self.acts[..self.turn].iter().sum();
        obs + acts
    }
}

/// Lifecycle controller for a single environment instance. All actions of a
/// trajectory run against this slot (session affinity by construction).
pub struct EnvManager {
    pub slot: usize,
    scheduler: ActorId,
    proxy: ActorId,
    reward_cluster: Rc<RefCell<ClusterCore>>,
    lockstep: bool,
    active: Option<ActiveTrajectory>,
    trajectories_run: u64,
    metrics: Rc<RefCell<MetricsHub>>,
    cpu_pool: String,
}

impl EnvManager {
    pub fn new(
        slot: usize,
        scheduler: ActorId,
        proxy: ActorId,
        reward_cluster: Rc<RefCell<ClusterCore>>,
        lockstep: bool,
        metrics: Rc<RefCell<MetricsHub>>,
        cpu_pool: String,
    ) -> EnvManager {
        EnvManager {
            slot,
            scheduler,
            proxy,
            reward_cluster,
            lockstep,
            active: None,
            trajectories_run: 0,
            metrics,
            cpu_pool,
        }
    }

    fn request_id(&self, turn: usize) -> RequestId {
        RequestId(
            ((self.slot as u64) << 40)
                | ((self.trajectories_run & 0xFF_FFFF) << 16)
                | turn as u64,
        )
    }

    fn start(
        &mut self,
        ctx: &mut Ctx,
        trajectory_id: TrajectoryId,
        task: Rc<TaskSpec>,
        init_version: PolicyVersion,
    ) -> Result<(), SimError> {
        debug_assert!(self.active.is_none(), "slot is busy");
        self.trajectories_run += 1;
        let stream = format!("env/{}/{}", self.slot, self.trajectories_run);
        // Content is pre-drawn at reset time so abort timing can never change
        // what a trajectory would have contained.
        let (turns, obs, acts, hard_fail, reset_latency) = {
            let rng = ctx.rng(&stream);
            let turns = task.turns.sample(rng) as usize;
            let obs: Vec<u64> = (0..turns)
                .map(|_| task.prompt_tokens_per_turn.sample(rng))
                .collect();
            let acts: Vec<u64> = (0..turns)
                .map(|_| task.response_tokens_per_turn.sample(rng))
                .collect();
            let hard_fail =
                task.env_abort_prob > 0.0 && rng.gen::<f64>() < task.env_abort_prob;
            (turns, obs, acts, hard_fail, task.env_reset.sample(rng))
        };
        let traj = Trajectory {
            trajectory_id,
            group_id: None,
            env_slot: self.slot,
            task_tag: task.tag.clone(),
            init_version,
            turns: Vec::with_capacity(turns),
            status: TrajectoryStatus::Resetting,
            reward: None,
            prompt_tokens: 0,
            response_tokens: 0,
            reset_time: reset_latency,
            env_time: SimTime::ZERO,
            gen_time: SimTime::ZERO,
            started_at: ctx.now(),
            finished_at: SimTime::ZERO,
            abort_reason: None,
        };
        self.metrics
            .borrow_mut()
            .activity_begin(&self.cpu_pool, ctx.now());
        let timer = ctx.schedule_self(reset_latency, Msg::EnvResetDone { slot: self.slot });
        self.active = Some(ActiveTrajectory {
            traj,
            task,
            stream,
            obs,
            acts,
            hard_fail,
            turn: 0,
            pending_timer: Some(timer),
            current_request: None,
            gen_submit_at: SimTime::ZERO,
            aborting: None,
        });
        Ok(())
    }

    fn submit_generation(&mut self, ctx: &mut Ctx) -> Result<(), SimError> {
        let turn = self.active.as_ref().expect("active trajectory").turn;
        let request_id = self.request_id(turn);
        let a = self.active.as_mut().unwrap();
        a.traj.status = TrajectoryStatus::Generating;
        a.current_request = Some(request_id);
        a.gen_submit_at = ctx.now();
        a.pending_timer = None;
        let req = GenerationRequest {
            request_id,
            trajectory_id: a.traj.trajectory_id,
            tag: a.task.affinity().to_string(),
            context_tokens: a.context_tokens(),
            max_new_tokens: a.acts[turn],
            callback: ctx.self_id(),
        };
        ctx.send(self.proxy, Msg::Submit(Box::new(req)))?;
        Ok(())
    }

    fn finish_trajectory(&mut self, ctx: &mut Ctx) -> Result<(), SimError> {
        let mut a = self.active.take().expect("active trajectory");
        a.traj.status = TrajectoryStatus::AwaitingReward;
        a.traj.finished_at = ctx.now();
        self.metrics
            .borrow_mut()
            .activity_end(&self.cpu_pool, ctx.now());
        // non-blocking reward dispatch; the scheduler owns the pending
        // trajectory from here on
        let payload = a.traj.prompt_tokens + a.traj.response_tokens;
        let request = RewardRequest {
            trajectory_id: a.traj.trajectory_id,
            task_tag: a.traj.task_tag.clone(),
            cost_class: a.task.reward,
            payload_tokens: payload.max(1),
            reply_to: self.scheduler,
            endpoint: String::new(),
            attempt: 0,
        };
        dispatch_serverless(&self.reward_cluster.borrow(), ctx, "compute_rewards", request)?;
        ctx.send(
            self.scheduler,
            Msg::TrajectoryFinished(Box::new(a.traj)),
        )?;
        Ok(())
    }

    fn abort_now(&mut self, ctx: &mut Ctx, reason: AbortReason) -> Result<(), SimError> {
        let mut a = self.active.take().expect("active trajectory");
        if let Some(timer) = a.pending_timer.take() {
            ctx.cancel(timer);
        }
        a.traj.status = TrajectoryStatus::Aborted;
        a.traj.abort_reason = Some(reason);
        a.traj.finished_at = ctx.now();
        self.metrics
            .borrow_mut()
            .activity_end(&self.cpu_pool, ctx.now());
        ctx.send(
            self.scheduler,
            Msg::TrajectoryAborted {
                slot: self.slot,
                trajectory: Box::new(a.traj),
            },
        )?;
        Ok(())
    }

    fn on_generation_done(
        &mut self,
        ctx: &mut Ctx,
        outcome: GenerationOutcome,
    ) -> Result<(), SimError> {
        let aborting = match self.active.as_mut() {
            None => return Ok(()), // stale callback after abort completed
            Some(a) => {
                if a.current_request != Some(outcome.request_id) {
                    return Ok(());
                }
                a.current_request = None;
                a.aborting
            }
        };
        if let Some(reason) = aborting {
            // abort was waiting for the in-flight generation to terminate
            return self.abort_now(ctx, reason);
        }
        match outcome.status {
            GenerationStatus::Completed => {
                let slot = self.slot;
                let a = self.active.as_mut().unwrap();
                let gen_time = ctx.now() - a.gen_submit_at;
                a.traj.gen_time += gen_time;
                a.traj.status = TrajectoryStatus::SteppingEnv;
                let stream = a.stream.clone();
                let step_latency = a.task.env_step.sample(ctx.rng(&stream));
                let timer = ctx.schedule_self(
                    step_latency,
                    Msg::EnvStepDone {
                        slot,
                        gen_time,
                        step_latency,
                    },
                );
                self.active.as_mut().unwrap().pending_timer = Some(timer);
                Ok(())
            }
            // abort initiated externally; the scheduler message may still be
            // in flight — treat as an abort either way
            GenerationStatus::Aborted => self.abort_now(ctx, AbortReason::Surplus),
            GenerationStatus::Failed(_) => self.abort_now(ctx, AbortReason::WorkerFailure),
        }
    }

    fn on_step_done(
        &mut self,
        ctx: &mut Ctx,
        gen_time: SimTime,
        step_latency: SimTime,
    ) -> Result<(), SimError> {
        let lockstep = self.lockstep;
        let slot = self.slot;
        let a = self.active.as_mut().expect("active trajectory");
        a.pending_timer = None;
        let turn = a.turn;
        a.traj.turns.push(TurnRecord {
            obs_tokens: a.obs[turn],
            action_tokens: a.acts[turn],
            t_start: a.gen_submit_at,
            t_end: ctx.now(),
            gen_time,
            env_time: step_latency,
        });
        a.traj.prompt_tokens += a.obs[turn];
        a.traj.response_tokens += a.acts[turn];
        a.traj.env_time += step_latency;
        a.turn += 1;
        if a.turn >= a.obs.len() {
            self.finish_trajectory(ctx)
        } else if lockstep {
            ctx.send(
                self.scheduler,
                Msg::BarrierReport {
                    slot,
                    kind: BarrierKind::Turn,
                },
            )?;
            Ok(())
        } else {
            self.submit_generation(ctx)
        }
    }
}

impl Actor for EnvManager {
    fn handle(&mut self, msg: Msg, ctx: &mut Ctx) -> Result<(), SimError> {
        match msg {
            Msg::StartTrajectory {
                trajectory_id,
                task,
                init_version,
                ..
            } => self.start(ctx, trajectory_id, task, init_version),
            Msg::EnvResetDone { .. } => {
                let (aborting, hard_fail) = {
                    let a = self.active.as_mut().expect("resetting trajectory");
                    a.pending_timer = None;
                    (a.aborting, a.hard_fail)
                };
                if let Some(reason) = aborting {
                    return self.abort_now(ctx, reason);
                }
                if hard_fail {
                    return self.abort_now(ctx, AbortReason::EnvFailure);
                }
                if self.lockstep {
                    ctx.send(
                        self.scheduler,
                        Msg::BarrierReport {
                            slot: self.slot,
                            kind: BarrierKind::Reset,
                        },
                    )?;
                    Ok(())
                } else {
                    self.submit_generation(ctx)
                }
            }
            Msg::TurnGo => {
                debug_assert!(self.lockstep);
                if self.active.is_some() {
                    self.submit_generation(ctx)?;
                }
                Ok(())
            }
            Msg::GenerationDone(outcome) => self.on_generation_done(ctx, outcome),
            Msg::EnvStepDone {
                gen_time,
                step_latency,
                ..
            } => self.on_step_done(ctx, gen_time, step_latency),
            Msg::AbortTrajectory { reason, .. } => {
                let Some(a) = self.active.as_mut() else {
                    return Ok(()); // already finished; abort raced with completion
                };
                if let Some(req) = a.current_request {
                    // a generation is in flight: latch the abort, cancel the
                    // request, finish when the terminal callback lands
                    a.aborting = Some(reason);
                    ctx.send(self.proxy, Msg::AbortGeneration { request_id: req })?;
                    Ok(())
                } else if a.pending_timer.is_some() {
                    self.abort_now(ctx, reason)
                } else {
                    // between phases (barrier wait): abort directly
                    self.abort_now(ctx, reason)
                }
            }
            other => Err(SimError::contract(format!(
                "env manager received unexpected message {}",
                other.kind()
            ))),
        }
    }
}

// ---------------------------------------------------------------------------
// Rollout scheduler
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct BatchRecord {
    pub index: u64,
    pub opened_at: SimTime,
    pub filled_at: SimTime,
    pub quota: u64,
    pub launched: u64,
    pub surplus_aborts: u64,
}

#[derive(Debug, Clone, Copy)]
struct InFlight {
    slot: usize,
    init_version: PolicyVersion,
}

/// Production gating per training paradigm: how many batches may be started
/// given the number of distributed versions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProductionGate {
    /// Serial: one batch per distributed version, no lookahead.
    PerVersion,
    /// One batch of lookahead: rollout k+1 overlaps training of batch k.
    OneAhead,
    /// Continuous production (bounded only by the staleness rule).
    Free,
}

pub struct RolloutScheduler {
    buffer: ActorId,
    reward_cluster: Rc<RefCell<ClusterCore>>,
    slots: Vec<ActorId>,
    busy: BTreeMap<usize, InFlight>,
    idle: BTreeSet<usize>,
    tasks: Vec<Rc<TaskSpec>>,
    cumulative_weights: Vec<f64>,
    plan: RolloutPlan,
    mode: RolloutMode,
    gate: ProductionGate,
    stale_inflight_abort: bool,
    env_concurrency: u64,

    distributed_versions: u64,
    current_version: PolicyVersion,
    batches_started: u64,
    batches_completed: u64,
    batch_open: bool,
    batch_opened_at: SimTime,
    batch_done: u64,
    launches_this_batch: u64,
    next_trajectory: u64,

    pending_reward: BTreeMap<TrajectoryId, Trajectory>,
    retry_backoff: SimTime,

    // lockstep barrier state
    barrier_pending: BTreeSet<usize>,
    live_lockstep: BTreeSet<usize>,

    stopped: bool,
    pub stale_aborts: u64,
    pub surplus_aborts: u64,
    pub env_failures: u64,
    pub wasted_prompt_tokens: u64,
    pub wasted_response_tokens: u64,
    batch_surplus: u64,
    metrics: Rc<RefCell<MetricsHub>>,
}

impl RolloutScheduler {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        buffer: ActorId,
        reward_cluster: Rc<RefCell<ClusterCore>>,
        slots: Vec<ActorId>,
        tasks: Vec<Rc<TaskSpec>>,
        plan: RolloutPlan,
        mode: RolloutMode,
        gate: ProductionGate,
        stale_inflight_abort: bool,
        env_concurrency: u64,
        metrics: Rc<RefCell<MetricsHub>>,
    ) -> RolloutScheduler {
        let weights: Vec<f64> = tasks.iter().map(|t| t.weight).collect();
        let mut acc = 0.0;
        let cumulative_weights = weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        let idle: BTreeSet<usize> = (0..slots.len()).collect();
        RolloutScheduler {
            buffer,
            reward_cluster,
            slots,
            busy: BTreeMap::new(),
            idle,
            tasks,
            cumulative_weights,
            plan,
            mode,
            gate,
            stale_inflight_abort,
            env_concurrency,
            distributed_versions: 1, // the initial weights count as distributed
            current_version: PolicyVersion(0),
            batches_started: 0,
            batches_completed: 0,
            batch_open: false,
            batch_opened_at: SimTime::ZERO,
            batch_done: 0,
            launches_this_batch: 0,
            next_trajectory: 0,
            pending_reward: BTreeMap::new(),
            retry_backoff: SimTime::secs_unchecked(1.0),
            barrier_pending: BTreeSet::new(),
            live_lockstep: BTreeSet::new(),
            stopped: false,
            stale_aborts: 0,
            surplus_aborts: 0,
            env_failures: 0,
            wasted_prompt_tokens: 0,
            wasted_response_tokens: 0,
            batch_surplus: 0,
            metrics,
        }
    }

    fn pick_task(&self, ctx: &mut Ctx, ordinal: u64) -> Rc<TaskSpec> {
        if self.tasks.len() == 1 {
            return self.tasks[0].clone();
        }
        let total = *self.cumulative_weights.last().unwrap();
        let draw: f64 = ctx.rng(&format!("task/{ordinal}")).gen::<f64>() * total;
        let idx = self
            .cumulative_weights
            .iter()
            .position(|&c| draw < c)
            .unwrap_or(self.tasks.len() - 1);
        self.tasks[idx].clone()
    }

    fn may_start_batch(&self) -> bool {
        if self.stopped {
            return false;
        }
        match self.gate {
            ProductionGate::Free => true,
            ProductionGate::PerVersion => self.batches_started < self.distributed_versions,
            ProductionGate::OneAhead => self.batches_started < self.distributed_versions + 1,
        }
    }

    fn launch_slot(&mut self, ctx: &mut Ctx, slot: usize) -> Result<(), SimError> {
        let trajectory_id = TrajectoryId(self.next_trajectory);
        self.next_trajectory += 1;
        self.launches_this_batch += 1;
        let task = self.pick_task(ctx, trajectory_id.0);
        self.idle.remove(&slot);
        self.busy.insert(
            slot,
            InFlight {
                slot,
                init_version: self.current_version,
            },
        );
        if self.mode == RolloutMode::Lockstep {
            self.live_lockstep.insert(slot);
            self.barrier_pending.insert(slot);
        }
        ctx.send(
            self.slots[slot],
            Msg::StartTrajectory {
                trajectory_id,
                task,
                init_version: self.current_version,
                slot,
            },
        )?;
        Ok(())
    }

    /// Fill idle slots with new trajectories, honoring the production gate,
    /// the CPU concurrency cap and the per-batch replacement cap.
    fn pump(&mut self, ctx: &mut Ctx) -> Result<(), SimError> {
        if self.stopped {
            return Ok(());
        }
        if !self.batch_open {
            if !self.may_start_batch() {
                return Ok(());
            }
            self.batches_started += 1;
            self.batch_open = true;
            self.batch_opened_at = ctx.now();
            self.batch_done = 0;
            self.batch_surplus = 0;
            self.launches_this_batch = 0;
        }
        loop {
            let live = self.busy.len() as u64;
            if live >= self.env_concurrency {
                break;
            }
            // never run more envs than the plan launched, and stop launching
            // replacements once the remaining quota is covered
            let outstanding_needed = self.plan.quota().saturating_sub(self.batch_done);
            if self.gate != ProductionGate::Free && outstanding_needed == 0 {
                break;
            }
            if live >= self.plan.launched() {
                break;
            }
            if self.launches_this_batch >= self.plan.launch_cap() {
                return Err(SimError::Aborted(format!(
                    "collection error: replacement cap {} exhausted in batch {}",
                    self.plan.launch_cap(),
                    self.batches_started
                )));
            }
            let Some(&slot) = self.idle.iter().next() else {
                break;
            };
            self.launch_slot(ctx, slot)?;
        }
        Ok(())
    }

    fn record_waste(&mut self, traj: &Trajectory) {
        self.wasted_prompt_tokens += traj.prompt_tokens;
        self.wasted_response_tokens += traj.response_tokens;
    }

    fn complete_batch(&mut self, ctx: &mut Ctx) -> Result<(), SimError> {
        self.batches_completed += 1;
        self.batch_open = false;
        self.metrics.borrow_mut().batch_record(BatchRecord {
            index: self.batches_completed,
            opened_at: self.batch_opened_at,
            filled_at: ctx.now(),
            quota: self.plan.quota(),
            launched: self.launches_this_batch,
            surplus_aborts: 0, // patched below once the aborts land
        });
        // surplus abort: the quota is met, terminate ongoing rollouts
        if self.gate != ProductionGate::Free {
            let victims: Vec<usize> = self.busy.keys().copied().collect();
            for slot in victims {
                ctx.send(
                    self.slots[slot],
                    Msg::AbortTrajectory {
                        slot,
                        reason: AbortReason::Surplus,
                    },
                )?;
            }
        }
        // next batch (if the gate allows) starts immediately
        self.pump(ctx)
    }

    fn on_finished(&mut self, ctx: &mut Ctx, traj: Trajectory) -> Result<(), SimError> {
        let slot = traj.env_slot;
        self.busy.remove(&slot);
        self.idle.insert(slot);
        if self.mode == RolloutMode::Lockstep {
            self.live_lockstep.remove(&slot);
            self.barrier_pending.remove(&slot);
            self.check_barrier(ctx)?;
        }
        self.metrics.borrow_mut().trajectory_phase(&traj);
        self.pending_reward.insert(traj.trajectory_id, traj);
        self.batch_done += 1;
        if self.batch_open && self.batch_done >= self.plan.quota() {
            self.complete_batch(ctx)?;
        } else {
            self.pump(ctx)?;
        }
        Ok(())
    }

    fn on_aborted(&mut self, ctx: &mut Ctx, traj: Trajectory) -> Result<(), SimError> {
        let slot = traj.env_slot;
        self.busy.remove(&slot);
        self.idle.insert(slot);
        if self.mode == RolloutMode::Lockstep {
            self.live_lockstep.remove(&slot);
            self.barrier_pending.remove(&slot);
            self.check_barrier(ctx)?;
        }
        {
            let mut hub = self.metrics.borrow_mut();
            match traj.abort_reason.unwrap_or(AbortReason::RunEnd) {
                AbortReason::Surplus => {
                    self.surplus_aborts += 1;
                    self.batch_surplus += 1;
                    hub.surplus_aborts += 1;
                }
                AbortReason::Stale => {
                    self.stale_aborts += 1;
                    hub.stale_aborts += 1;
                }
                AbortReason::EnvFailure | AbortReason::WorkerFailure => self.env_failures += 1,
                AbortReason::RunEnd => {}
            }
            hub.wasted_prompt_tokens += traj.prompt_tokens;
            hub.wasted_response_tokens += traj.response_tokens;
            hub.trajectory_terminal(&traj);
        }
        self.record_waste(&traj);
        self.pump(ctx)
    }

    fn check_barrier(&mut self, ctx: &mut Ctx) -> Result<(), SimError> {
        if self.mode != RolloutMode::Lockstep {
            return Ok(());
        }
        if self.barrier_pending.is_empty() && !self.live_lockstep.is_empty() {
            // everyone synchronized: release the next generation wave
            self.barrier_pending = self.live_lockstep.clone();
            let targets: Vec<usize> = self.live_lockstep.iter().copied().collect();
            for slot in targets {
                ctx.send(self.slots[slot], Msg::TurnGo)?;
            }
        }
        Ok(())
    }

    fn on_reward(
        &mut self,
        ctx: &mut Ctx,
        outcome: crate::reward::RewardOutcome,
    ) -> Result<(), SimError> {
        match outcome.status {
            crate::reward::RewardStatus::Ok(reward) => {
                let Some(mut traj) = self.pending_reward.remove(&outcome.trajectory_id) else {
                    return Ok(());
                };
                traj.reward = Some(reward);
                traj.status = TrajectoryStatus::Completed;
                self.metrics.borrow_mut().trajectory_terminal(&traj);
                ctx.send(self.buffer, Msg::BufferPut(Box::new(traj)))?;
                Ok(())
            }
            crate::reward::RewardStatus::Throttled => {
                let Some(traj) = self.pending_reward.get(&outcome.trajectory_id) else {
                    return Ok(());
                };
                // retry after an exponential backoff; the reward value is
                // unaffected (stateless service)
                let request = RewardRequest {
                    trajectory_id: traj.trajectory_id,
                    task_tag: traj.task_tag.clone(),
                    cost_class: cost_class_of(traj, &self.tasks),
                    payload_tokens: (traj.prompt_tokens + traj.response_tokens).max(1),
                    reply_to: ctx.self_id(),
                    endpoint: String::new(),
                    attempt: outcome.attempt + 1,
                };
                let backoff = self
                    .retry_backoff
                    .scale(f64::from(1u32 << outcome.attempt.min(6)));
                ctx.schedule_self(backoff, Msg::RewardRetry(Box::new(request)));
                Ok(())
            }
        }
    }

    /// Evict in-flight trajectories that can no longer satisfy the bound.
    fn on_stale_cutoff(&mut self, ctx: &mut Ctx, min_version: PolicyVersion) -> Result<(), SimError> {
        if !self.stale_inflight_abort {
            return Ok(());
        }
        let victims: Vec<usize> = self
            .busy
            .values()
            .filter(|f| f.init_version < min_version)
            .map(|f| f.slot)
            .collect();
        for slot in victims {
            ctx.send(
                self.slots[slot],
                Msg::AbortTrajectory {
                    slot,
                    reason: AbortReason::Stale,
                },
            )?;
        }
        Ok(())
    }

    pub fn batches_completed(&self) -> u64 {
        self.batches_completed
    }
}

/// Cost-class lookup for retries (the trajectory retains only the task tag).
fn cost_class_of(traj: &Trajectory, tasks: &[Rc<TaskSpec>]) -> crate::workload::CostClass {
    tasks
        .iter()
        .find(|t| t.tag == traj.task_tag)
        .map(|t| t.reward)
        .unwrap_or(crate::workload::CostClass::RuleBased)
}

impl Actor for RolloutScheduler {
    fn handle(&mut self, msg: Msg, ctx: &mut Ctx) -> Result<(), SimError> {
        match msg {
            Msg::ProductionKick => self.pump(ctx),
            Msg::TrajectoryFinished(traj) => self.on_finished(ctx, *traj),
            Msg::TrajectoryAborted { trajectory, .. } => self.on_aborted(ctx, *trajectory),
            Msg::BarrierReport { slot, .. } => {
                self.barrier_pending.remove(&slot);
                self.check_barrier(ctx)
            }
            Msg::RewardDone(outcome) => self.on_reward(ctx, *outcome),
            Msg::RewardRetry(request) => {
                dispatch_serverless(
                    &self.reward_cluster.borrow(),
                    ctx,
                    "compute_rewards",
                    *request,
                )
            }
            Msg::DistributionComplete { version } => {
                self.current_version = version;
                self.distributed_versions += 1;
                self.pump(ctx)
            }
            Msg::StaleCutoff { min_version } => self.on_stale_cutoff(ctx, min_version),
            Msg::StopProduction => {
                self.stopped = true;
                let victims: Vec<usize> = self.busy.keys().copied().collect();
                for slot in victims {
                    ctx.send(
                        self.slots[slot],
                        Msg::AbortTrajectory {
                            slot,
                            reason: AbortReason::RunEnd,
                        },
                    )?;
                }
                Ok(())
            }
            other => Err(SimError::contract(format!(
                "rollout scheduler received unexpected message {}",
                other.kind()
            ))),
        }
    }
}
