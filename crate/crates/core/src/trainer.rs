//! Training-side workflow: batch retrieval, train-step execution, version
//! advancement, and the weight-synchronization protocol with asynchronous
//! cross-cluster publication.
//!
//! Per iteration the trainer retrieves a batch, suspends the inference
//! fleet, distributes the latest trained weights (only the transfer residual
//! not yet covered by background publication is charged inside the suspend
//! window, plus the intra-cluster broadcast), resumes the fleet and runs the
//! train step. Paradigms differ in ordering and production gating:
//!
//! - synchronous: weights first, then collect, then train (fully serial);
//! - one-off: batch k+1 collection overlaps training of batch k;
//! - bounded-asynchronous: continuous production under the bound `alpha`.
//!
//! `async(alpha = 0)` is the synchronous paradigm by definition and runs the
//! same code path.

use std::cell::RefCell;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::buffer::Batch;
use crate::error::SimError;
use crate::ids::PolicyVersion;
use crate::kernel::{Actor, ActorId, Ctx, EventId, SimTime};
use crate::metrics::{MetricsHub, StepPhases};
use crate::msg::Msg;
use crate::rollout::ProductionGate;
use crate::workload::{train_step_time, DevicePool, LinkModel, ModelSpec};

/// Training paradigm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    Synchronous,
    OneOff,
    Async { alpha: u64 },
}

impl Paradigm {
    pub fn alpha(&self) -> u64 {
        match self {
            Paradigm::Synchronous => 0,
            Paradigm::OneOff => 1,
            Paradigm::Async { alpha } => *alpha,
        }
    }

    /// Weights are distributed before the blocking batch retrieval when the
    /// consumable batch cannot exist until the new version reaches the
    /// workers (synchronous consumption).
    pub fn update_first(&self) -> bool {
        self.alpha() == 0
    }

    pub fn production_gate(&self) -> ProductionGate {
        match self {
            Paradigm::Synchronous => ProductionGate::PerVersion,
            Paradigm::Async { alpha: 0 } => ProductionGate::PerVersion,
            Paradigm::OneOff => ProductionGate::OneAhead,
            Paradigm::Async { .. } => ProductionGate::Free,
        }
    }
}

/// One inference cluster's distribution path: cross-cluster link for the
/// staging-store fetch plus the intra-cluster broadcast bandwidth.
#[derive(Debug, Clone)]
pub struct DistributionPath {
    pub pool_label: String,
    pub link: LinkModel,
    pub nvlink_bw: f64,
}

/// An asynchronous weight publication to the staging store. Fetching version
/// v is possible only after the publication timeline completes; at suspend
/// time only the residual is charged.
#[derive(Debug, Clone)]
struct Publication {
    version: PolicyVersion,
    started: Option<SimTime>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Idle,
    PreUpdateSuspend,
    PreUpdateWindow,
    AwaitBatch,
    Suspending,
    UpdateWindow,
    Training,
}

pub struct Trainer {
    buffer: ActorId,
    proxy: ActorId,
    scheduler: ActorId,
    paradigm: Paradigm,
    model: ModelSpec,
    pool: Vec<DevicePool>,
    batch_size: u64,
    group_size: u64,
    paths: Vec<DistributionPath>,
    background_publication: bool,

    version: PolicyVersion,
    distributed: PolicyVersion,
    publication: Option<Publication>,
    phase: Phase,
    steps_done: u64,
    target_steps: u64,

    // per-iteration phase timestamps
    iter_started: SimTime,
    batch_requested: SimTime,
    batch_at: SimTime,
    suspend_issued: SimTime,
    drained_at: SimTime,
    resumed_at: SimTime,
    window_residual: SimTime,
    window_broadcast: SimTime,
    pre_stall: SimTime,
    pre_window: SimTime,
    current_batch: Option<Batch>,
    train_timer: Option<(EventId, SimTime, SimTime)>, // (event, started, duration)

    // checkpointing
    checkpoint_interval: u64,
    last_checkpoint: PolicyVersion,
    restart_delay: SimTime,
    train_durations: Vec<SimTime>,
    pub recoveries: u64,

    // staging-store outage injection
    store_outage_until: Option<SimTime>,
    update_retry_backoff: SimTime,

    metrics: Rc<RefCell<MetricsHub>>,
}

impl Trainer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        buffer: ActorId,
        proxy: ActorId,
        scheduler: ActorId,
        paradigm: Paradigm,
        model: ModelSpec,
        pool: Vec<DevicePool>,
        batch_size: u64,
        group_size: u64,
        paths: Vec<DistributionPath>,
        background_publication: bool,
        target_steps: u64,
        checkpoint_interval: u64,
        restart_delay: SimTime,
        metrics: Rc<RefCell<MetricsHub>>,
    ) -> Trainer {
        Trainer {
            buffer,
            proxy,
            scheduler,
            paradigm,
            model,
            pool,
            batch_size,
            group_size,
            paths,
            background_publication,
            version: PolicyVersion(0),
            distributed: PolicyVersion(0),
            publication: None,
            phase: Phase::Idle,
            steps_done: 0,
            target_steps,
            iter_started: SimTime::ZERO,
            batch_requested: SimTime::ZERO,
            batch_at: SimTime::ZERO,
            suspend_issued: SimTime::ZERO,
            drained_at: SimTime::ZERO,
            resumed_at: SimTime::ZERO,
            window_residual: SimTime::ZERO,
            window_broadcast: SimTime::ZERO,
            pre_stall: SimTime::ZERO,
            pre_window: SimTime::ZERO,
            current_batch: None,
            train_timer: None,
            checkpoint_interval: checkpoint_interval.max(1),
            last_checkpoint: PolicyVersion(0),
            restart_delay,
            train_durations: Vec::new(),
            recoveries: 0,
            store_outage_until: None,
            update_retry_backoff: SimTime::secs_unchecked(1.0),
            metrics,
        }
    }

    pub fn version(&self) -> PolicyVersion {
        self.version
    }

    pub fn steps_done(&self) -> u64 {
        self.steps_done
    }

    pub fn finished(&self) -> bool {
        self.steps_done >= self.target_steps
    }

    fn start_iteration(&mut self, ctx: &mut Ctx) -> Result<(), SimError> {
        self.iter_started = ctx.now();
        self.pre_stall = SimTime::ZERO;
        self.pre_window = SimTime::ZERO;
        self.window_residual = SimTime::ZERO;
        self.window_broadcast = SimTime::ZERO;
        if self.paradigm.update_first() && self.version > self.distributed {
            // synchronous ordering: distribute first so this iteration's
            // batch can be produced under the new version at staleness zero
            self.phase = Phase::PreUpdateSuspend;
            self.suspend_issued = ctx.now();
            ctx.send(
                self.proxy,
                Msg::SuspendAll {
                    reply_to: ctx.self_id(),
                },
            )?;
            Ok(())
        } else {
            self.request_batch(ctx)
        }
    }

    fn request_batch(&mut self, ctx: &mut Ctx) -> Result<(), SimError> {
        self.phase = Phase::AwaitBatch;
        self.batch_requested = ctx.now();
        ctx.send(
            self.buffer,
            Msg::GetBatch {
                batch_size: self.batch_size,
                group_size: self.group_size,
                reply_to: ctx.self_id(),
            },
        )?;
        Ok(())
    }

    /// Suspend window cost for distributing `self.version`: the residual of
    /// the cross-cluster publication (zero once background publication has
    /// completed), plus the intra-cluster broadcast, in parallel per cluster.
    fn update_window(&mut self, now: SimTime) -> (SimTime, SimTime, SimTime) {
        let weight_bytes = self.model.weight_bytes();
        let publication_elapsed = match &self.publication {
            Some(p) if p.version == self.version => match p.started {
                Some(start) if self.background_publication => now.saturating_sub(start),
                _ => SimTime::ZERO,
            },
            _ => SimTime::ZERO,
        };
        let mut window = SimTime::ZERO;
        let mut max_residual = SimTime::ZERO;
        let mut max_broadcast = SimTime::ZERO;
        for path in &self.paths {
            let full = path.link.transfer_time(weight_bytes);
            let residual = full.saturating_sub(publication_elapsed);
            let broadcast = SimTime::secs_unchecked(weight_bytes / path.nvlink_bw);
            window = window.max(residual + broadcast);
            max_residual = max_residual.max(residual);
            max_broadcast = max_broadcast.max(broadcast);
        }
        (window, max_residual, max_broadcast)
    }

    fn on_all_suspended(&mut self, ctx: &mut Ctx) -> Result<(), SimError> {
        self.drained_at = ctx.now();
        // staging-store outage: retry with backoff inside the suspend window
        if let Some(until) = self.store_outage_until {
            if ctx.now() < until {
                ctx.note(
                    "store_outage_retry",
                    format!("staging store unavailable until t={until}"),
                );
                let next = self.phase;
                debug_assert!(matches!(
                    next,
                    Phase::PreUpdateSuspend | Phase::Suspending
                ));
                ctx.schedule_self(self.update_retry_backoff, Msg::UpdateRetry);
                return Ok(());
            }
        }
        let (window, residual, broadcast) = self.update_window(ctx.now());
        self.window_residual = residual;
        self.window_broadcast = broadcast;
        self.phase = match self.phase {
            Phase::PreUpdateSuspend => Phase::PreUpdateWindow,
            _ => Phase::UpdateWindow,
        };
        ctx.schedule_self(window, Msg::UpdateDone);
        Ok(())
    }

    fn on_update_done(&mut self, ctx: &mut Ctx) -> Result<(), SimError> {
        debug_assert_eq!(self.distributed.0 + 1, self.version.0);
        self.distributed = self.version;
        // the buffer's staleness clock advances at distribution completion
        ctx.send(
            self.buffer,
            Msg::VersionAdvance {
                version: self.distributed,
            },
        )?;
        ctx.send(
            self.scheduler,
            Msg::DistributionComplete {
                version: self.distributed,
            },
        )?;
        ctx.send(
            self.proxy,
            Msg::ResumeAll {
                reply_to: ctx.self_id(),
                version: self.distributed.0,
            },
        )?;
        Ok(())
    }

    fn on_all_resumed(&mut self, ctx: &mut Ctx) -> Result<(), SimError> {
        self.resumed_at = ctx.now();
        match self.phase {
            Phase::PreUpdateWindow => {
                // synchronous ordering: the update is done, now wait for the
                // batch produced under the fresh version
                self.pre_window = ctx.now() - self.suspend_issued;
                self.request_batch(ctx)
            }
            Phase::UpdateWindow => self.begin_train(ctx),
            _ => Err(SimError::contract("resume outside an update window".into())),
        }
    }

    fn on_batch(&mut self, ctx: &mut Ctx, batch: Batch) -> Result<(), SimError> {
        self.batch_at = ctx.now();
        self.current_batch = Some(batch);
        if self.paradigm.update_first() {
            // weights already distributed this iteration; train directly
            self.pre_stall = self.batch_at - self.batch_requested;
            self.begin_train(ctx)
        } else if self.version > self.distributed {
            self.phase = Phase::Suspending;
            self.suspend_issued = ctx.now();
            ctx.send(
                self.proxy,
                Msg::SuspendAll {
                    reply_to: ctx.self_id(),
                },
            )?;
            Ok(())
        } else {
            // nothing to distribute (first iteration)
            self.suspend_issued = ctx.now();
            self.drained_at = ctx.now();
            self.resumed_at = ctx.now();
            self.begin_train(ctx)
        }
    }

    fn begin_train(&mut self, ctx: &mut Ctx) -> Result<(), SimError> {
        self.phase = Phase::Training;
        let batch = self.current_batch.as_ref().expect("batch to train on");
        let tokens = batch.prompt_tokens() + batch.response_tokens();
        let duration = train_step_time(tokens, &self.model, &self.pool)?;
        self.metrics
            .borrow_mut()
            .activity_begin(&self.pool[0].profile.name, ctx.now());
        let ev = ctx.schedule_self(duration, Msg::TrainStepDone);
        self.train_timer = Some((ev, ctx.now(), duration));
        Ok(())
    }

    fn on_train_done(&mut self, ctx: &mut Ctx) -> Result<(), SimError> {
        let (_, train_started, duration) = self.train_timer.take().expect("training in flight");
        self.train_durations.push(duration);
        self.metrics
            .borrow_mut()
            .activity_end(&self.pool[0].profile.name, ctx.now());
        self.version = self.version.next();
        if self.version.0 % self.checkpoint_interval == 0 {
            self.last_checkpoint = self.version;
        }
        // background publication of the new weights starts immediately and
        // overlaps the next rollout; without it the full transfer is paid
        // inside the next suspend window
        self.publication = Some(Publication {
            version: self.version,
            started: self.background_publication.then_some(ctx.now()),
        });
        let batch = self.current_batch.take().expect("trained batch");
        self.steps_done += 1;
        self.emit_step_report(&batch, train_started, ctx.now());
        if self.finished() {
            self.phase = Phase::Idle;
            ctx.send(self.scheduler, Msg::StopProduction)?;
            return Ok(());
        }
        self.start_iteration(ctx)
    }

    fn emit_step_report(&mut self, batch: &Batch, train_started: SimTime, now: SimTime) {
        let step_time = now - self.iter_started;
        let stall = match self.paradigm.update_first() {
            true => self.pre_stall,
            false => self.batch_at - self.batch_requested,
        };
        let window = match self.paradigm.update_first() {
            true => self.pre_window,
            false => {
                if self.resumed_at > self.batch_at {
                    self.resumed_at - self.suspend_issued
                } else {
                    SimTime::ZERO
                }
            }
        };
        let train_compute = now - train_started;
        let phases = StepPhases {
            get_batch_stall: stall,
            suspend_window: window,
            transfer_residual: self.window_residual,
            broadcast: self.window_broadcast,
            train_compute,
            resume_to_first_token: self
                .metrics
                .borrow()
                .first_engine_completion_after(self.resumed_at)
                .map(|t| t.saturating_sub(self.resumed_at))
                .unwrap_or(SimTime::ZERO),
        };
        self.metrics.borrow_mut().step_report(
            self.steps_done,
            self.iter_started,
            now,
            step_time,
            batch.prompt_tokens(),
            batch.response_tokens(),
            phases,
            self.version,
        );
    }

    fn on_fault(&mut self, ctx: &mut Ctx) -> Result<(), SimError> {
        self.recoveries += 1;
        // redo everything since the last checkpoint, then the current step
        let redo_steps = (self.version.0 - self.last_checkpoint.0) as usize;
        let redo: SimTime = self
            .train_durations
            .iter()
            .rev()
            .take(redo_steps)
            .fold(SimTime::ZERO, |acc, d| acc + *d);
        ctx.note(
            "trainer_recovery",
            format!(
                "restart from checkpoint {} (redoing {} steps)",
                self.last_checkpoint, redo_steps
            ),
        );
        if let Some((ev, started, duration)) = self.train_timer.take() {
            ctx.cancel(ev);
            // restart, recompute lost steps, re-run the interrupted step
            let penalty = self.restart_delay + redo;
            let new_ev = ctx.schedule_self(penalty + duration, Msg::TrainStepDone);
            self.train_timer = Some((new_ev, started, duration));
        }
        // Faults outside a train step only cost the recovery note: the
        // trainer is blocked on another component and loses no work.
        Ok(())
    }
}

impl Actor for Trainer {
    fn handle(&mut self, msg: Msg, ctx: &mut Ctx) -> Result<(), SimError> {
        match msg {
            Msg::TrainerStart => self.start_iteration(ctx),
            Msg::BatchReady(batch) => self.on_batch(ctx, *batch),
            Msg::AllSuspended => self.on_all_suspended(ctx),
            Msg::UpdateRetry => self.on_all_suspended(ctx),
            Msg::UpdateDone => self.on_update_done(ctx),
            Msg::AllResumed => self.on_all_resumed(ctx),
            Msg::TrainStepDone => self.on_train_done(ctx),
            Msg::TrainerFault => self.on_fault(ctx),
            Msg::StoreOutage { until } => {
                self.store_outage_until = Some(until);
                Ok(())
            }
            Msg::Tick(_) => Ok(()),
            other => Err(SimError::contract(format!(
                "trainer received unexpected message {}",
                other.kind()
            ))),
        }
    }
}
