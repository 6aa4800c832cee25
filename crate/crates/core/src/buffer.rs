//! The staleness-filtered queue between trajectory producers and the
//! training consumer.
//!
//! Admission rule: with the agent at version `n` and asynchronous bound
//! `alpha`, a trajectory is admissible iff `init_version >= n - alpha`.
//! Version advances apply the rule retroactively (eviction) and notify the
//! rollout scheduler so in-flight trajectories that can no longer satisfy
//! the bound are aborted early (configurable to finish-then-reject instead).
//!
//! Consumption is group-granular: `get_batch` returns whole groups only,
//! oldest first, where groups are chunks of `group_size` trajectories in
//! admission order.

use std::cell::RefCell;
use std::collections::VecDeque;
use std::rc::Rc;

use serde::Serialize;

use crate::error::SimError;
use crate::ids::{GroupId, PolicyVersion};
use crate::kernel::{Actor, ActorId, Ctx, SimTime};
use crate::metrics::MetricsHub;
use crate::msg::Msg;
use crate::rollout::{Trajectory, TrajectoryStatus};

/// The asynchronous bound: maximum allowed version gap between the current
/// agent and the version that initiated a trajectory. `alpha = 0` degenerates
/// to synchronous consumption.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AsyncBoundPolicy {
    pub alpha: u64,
    /// Abort in-flight trajectories as soon as they violate the bound
    /// (false = let them finish and reject at admission).
    pub abort_in_flight: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConsumptionRecord {
    pub trajectory_id: crate::ids::TrajectoryId,
    pub group_id: GroupId,
    pub init_version: PolicyVersion,
    pub n_at_return: PolicyVersion,
    pub consumed_at: SimTime,
}

/// A consumed batch, whole groups only.
#[derive(Debug)]
pub struct Batch {
    pub trajectories: Vec<Trajectory>,
    pub requested_at: SimTime,
    pub fulfilled_at: SimTime,
}

impl Batch {
    pub fn prompt_tokens(&self) -> u64 {
        self.trajectories.iter().map(|t| t.prompt_tokens).sum()
    }

    pub fn response_tokens(&self) -> u64 {
        self.trajectories.iter().map(|t| t.response_tokens).sum()
    }
}

struct PendingGet {
    batch_size: u64,
    group_size: u64,
    reply_to: ActorId,
    requested_at: SimTime,
}

pub struct SampleBuffer {
    policy: AsyncBoundPolicy,
    current_n: PolicyVersion,
    entries: VecDeque<Trajectory>,
    pending: Option<PendingGet>,
    scheduler: ActorId,
    next_group: u64,
    metrics: Rc<RefCell<MetricsHub>>,
    pub stale_rejects: u64,
    pub evictions: u64,
}

impl SampleBuffer {
    pub fn new(
        policy: AsyncBoundPolicy,
        scheduler: ActorId,
        metrics: Rc<RefCell<MetricsHub>>,
    ) -> SampleBuffer {
        SampleBuffer {
            policy,
            current_n: PolicyVersion(0),
            entries: VecDeque::new(),
            pending: None,
            scheduler,
            next_group: 0,
            metrics,
            stale_rejects: 0,
            evictions: 0,
        }
    }

    pub fn occupancy(&self) -> usize {
        self.entries.len()
    }

    pub fn current_version(&self) -> PolicyVersion {
        self.current_n
    }

    /// Diagnostic for deadlock reports: what the blocked consumer waits for.
    pub fn pending_diagnostic(&self) -> Option<String> {
        self.pending.as_ref().map(|p| {
            format!(
                "get_batch({}, group_size={}) blocked since t={} with {} trajectories buffered",
                p.batch_size,
                p.group_size,
                p.requested_at,
                self.entries.len()
            )
        })
    }

    fn admissible(&self, init: PolicyVersion) -> bool {
        init.0 + self.policy.alpha >= self.current_n.0
    }

    fn record_occupancy(&self, now: SimTime) {
        self.metrics
            .borrow_mut()
            .buffer_occupancy(now, self.entries.len() as u64);
    }

    fn put(&mut self, ctx: &mut Ctx, traj: Trajectory) -> Result<(), SimError> {
        if traj.status != TrajectoryStatus::Completed || traj.reward.is_none() {
            return Err(SimError::contract(format!(
                "buffer put requires a completed, rewarded trajectory (got {:?})",
                traj.status
            )));
        }
        if !self.admissible(traj.init_version) {
            self.stale_rejects += 1;
            self.metrics.borrow_mut().stale_abort(&traj);
            ctx.note(
                "stale_reject",
                format!(
                    "trajectory {} init={} n={} alpha={}",
                    traj.trajectory_id, traj.init_version, self.current_n, self.policy.alpha
                ),
            );
            return Ok(());
        }
        self.entries.push_back(traj);
        self.record_occupancy(ctx.now());
        self.try_fulfill(ctx)
    }

    fn on_version_advance(&mut self, ctx: &mut Ctx, new_n: PolicyVersion) -> Result<(), SimError> {
        if new_n.0 != self.current_n.0 + 1 {
            return Err(SimError::contract(format!(
                "non-monotonic version advance: {} -> {}",
                self.current_n, new_n
            )));
        }
        self.current_n = new_n;
        // retroactive admission: evict entries violating the bound
        let before = self.entries.len();
        let mut kept = VecDeque::with_capacity(before);
        for traj in self.entries.drain(..) {
            if traj.init_version.0 + self.policy.alpha >= new_n.0 {
                kept.push_back(traj);
            } else {
                self.evictions += 1;
                self.metrics.borrow_mut().stale_abort(&traj);
            }
        }
        self.entries = kept;
        if self.entries.len() != before {
            self.record_occupancy(ctx.now());
        }
        if self.policy.abort_in_flight {
            let min_version = PolicyVersion(new_n.0.saturating_sub(self.policy.alpha));
            ctx.send(self.scheduler, Msg::StaleCutoff { min_version })?;
        }
        Ok(())
    }

    fn on_get_batch(
        &mut self,
        ctx: &mut Ctx,
        batch_size: u64,
        group_size: u64,
        reply_to: ActorId,
    ) -> Result<(), SimError> {
        if group_size == 0 || batch_size % group_size != 0 {
            return Err(SimError::contract(format!(
                "get_batch({batch_size}) must be divisible by group_size ({group_size})"
            )));
        }
        if self.pending.is_some() {
            return Err(SimError::contract(
                "single training consumer: get_batch is already pending".into(),
            ));
        }
        self.pending = Some(PendingGet {
            batch_size,
            group_size,
            reply_to,
            requested_at: ctx.now(),
        });
        self.try_fulfill(ctx)
    }

    fn try_fulfill(&mut self, ctx: &mut Ctx) -> Result<(), SimError> {
        let Some(p) = self.pending.as_ref() else {
            return Ok(());
        };
        if (self.entries.len() as u64) < p.batch_size {
            return Ok(());
        }
        let p = self.pending.take().unwrap();
        let mut trajectories = Vec::with_capacity(p.batch_size as usize);
        for _ in 0..p.batch_size {
            trajectories.push(self.entries.pop_front().unwrap());
        }
        // whole groups only: chunk the FIFO prefix into groups of
        // `group_size` in admission order
        let now = ctx.now();
        for (i, traj) in trajectories.iter_mut().enumerate() {
            let group = GroupId(self.next_group + (i as u64 / p.group_size));
            traj.group_id = Some(group);
            debug_assert!(
                traj.init_version.0 + self.policy.alpha >= self.current_n.0,
                "staleness safety violated at consumption"
            );
            self.metrics.borrow_mut().consumption(ConsumptionRecord {
                trajectory_id: traj.trajectory_id,
                group_id: group,
                init_version: traj.init_version,
                n_at_return: self.current_n,
                consumed_at: now,
            });
        }
        self.next_group += p.batch_size / p.group_size;
        self.record_occupancy(now);
        ctx.send(
            p.reply_to,
            Msg::BatchReady(Box::new(Batch {
                trajectories,
                requested_at: p.requested_at,
                fulfilled_at: now,
            })),
        )?;
        Ok(())
    }
}

impl Actor for SampleBuffer {
    fn handle(&mut self, msg: Msg, ctx: &mut Ctx) -> Result<(), SimError> {
        match msg {
            Msg::BufferPut(traj) => self.put(ctx, *traj),
            Msg::VersionAdvance { version } => self.on_version_advance(ctx, version),
            Msg::GetBatch {
                batch_size,
                group_size,
                reply_to,
            } => self.on_get_batch(ctx, batch_size, group_size, reply_to),
            other => Err(SimError::contract(format!(
                "sample buffer received unexpected message {}",
                other.kind()
            ))),
        }
    }
}
