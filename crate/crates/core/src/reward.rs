//! Reward computation service.
//!
//! Two deployment modes for the same stateless evaluation:
//! - serverless pool: reactive autoscaling with per-instance cold starts and
//!   scale-to-zero after an idle timeout;
//! - dedicated pool: a reserved set of GPUs that serves llm-judge requests
//!   while rule/sandbox checks run off-pool.
//!
//! The reward value is a stable hash of `(trajectory_id, cost_class)` mapped
//! to [0, 1): identical across retries, instances and modes.

use std::cell::RefCell;
use std::collections::VecDeque;
use std::rc::Rc;

use crate::dist::LatencyDistribution;
use crate::error::SimError;
use crate::ids::TrajectoryId;
use crate::kernel::{Actor, ActorId, Ctx, SimTime};
use crate::metrics::MetricsHub;
use crate::msg::Msg;
use crate::workload::{prefill_time, CostClass, HardwareProfile, ModelSpec};

#[derive(Debug, Clone)]
pub struct RewardRequest {
    pub trajectory_id: TrajectoryId,
    pub task_tag: String,
    pub cost_class: CostClass,
    pub payload_tokens: u64,
    pub reply_to: ActorId,
    /// Filled in by the serverless dispatch path.
    pub endpoint: String,
    /// Retry attempt (throttled requests are re-submitted by the caller).
    pub attempt: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RewardStatus {
    Ok(f64),
    /// Queue beyond the scenario cap; caller should retry after a backoff.
    Throttled,
}

#[derive(Debug, Clone)]
pub struct RewardOutcome {
    pub trajectory_id: TrajectoryId,
    pub status: RewardStatus,
    pub queued_at: SimTime,
    pub finished_at: SimTime,
    pub cold_start: bool,
    pub attempt: u32,
}

/// Deterministic pseudo-reward in [0, 1).
pub fn pseudo_reward(trajectory_id: TrajectoryId, class: CostClass) -> f64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in trajectory_id
        .0
        .to_le_bytes()
        .iter()
        .chain(class.as_str().as_bytes())
    {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    (h >> 11) as f64 / (1u64 << 53) as f64
}

#[derive(Debug, Clone)]
pub struct ServerlessParams {
    pub max_instances: u64,
    pub cold_start: SimTime,
    pub idle_timeout: SimTime,
    pub queue_cap: usize,
}

impl Default for ServerlessParams {
    fn default() -> Self {
        ServerlessParams {
            max_instances: 64,
            cold_start: SimTime::secs_unchecked(2.0),
            idle_timeout: SimTime::secs_unchecked(30.0),
            queue_cap: usize::MAX,
        }
    }
}

#[derive(Debug, Clone)]
pub enum RewardMode {
    Serverless(ServerlessParams),
    Dedicated { pool: String, devices: u64 },
}

/// Per-class service cost model.
#[derive(Debug, Clone)]
pub struct RewardCostModel {
    pub rule_based: SimTime,
    pub code_sandbox: LatencyDistribution,
    pub judge_model: ModelSpec,
    pub judge_hw: HardwareProfile,
}

impl RewardCostModel {
    pub fn default_with(judge_model: ModelSpec, judge_hw: HardwareProfile) -> Self {
        RewardCostModel {
            rule_based: SimTime::secs_unchecked(0.1),
            code_sandbox: LatencyDistribution::lognormal(0.7, 0.6).unwrap(),
            judge_model,
            judge_hw,
        }
    }

    fn service_time(&self, req: &RewardRequest, ctx: &mut Ctx) -> SimTime {
        match req.cost_class {
            CostClass::RuleBased => self.rule_based,
            CostClass::CodeSandbox => self.code_sandbox.sample(ctx.rng("reward/sandbox")),
            CostClass::LlmJudge => {
                prefill_time(req.payload_tokens, &self.judge_model, &self.judge_hw)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum InstanceState {
    ColdStarting,
    Warm,
    Busy,
    Retired,
}

#[derive(Debug)]
struct Instance {
    state: InstanceState,
    /// Bumped on every state change; stale idle-check timers are ignored.
    epoch: u64,
    pending: Option<(RewardRequest, SimTime, bool)>,
}

/// The reward pool actor. Instances are modeled activities, not actors.
pub struct RewardService {
    mode: RewardMode,
    costs: RewardCostModel,
    instances: Vec<Instance>,
    queue: VecDeque<(RewardRequest, SimTime)>,
    metrics: Rc<RefCell<MetricsHub>>,
    pool_label: String,
    pub served: u64,
    pub cold_starts: u64,
    pub throttled: u64,
}

impl RewardService {
    pub fn new(mode: RewardMode, costs: RewardCostModel, metrics: Rc<RefCell<MetricsHub>>) -> Self {
        let (instances, pool_label) = match &mode {
            RewardMode::Serverless(_) => (Vec::new(), "serverless".to_string()),
            RewardMode::Dedicated { pool, devices } => (
                (0..*devices)
                    .map(|_| Instance {
                        state: InstanceState::Warm,
                        epoch: 0,
                        pending: None,
                    })
                    .collect(),
                pool.clone(),
            ),
        };
        RewardService {
            mode,
            costs,
            instances,
            queue: VecDeque::new(),
            metrics,
            pool_label,
            served: 0,
            cold_starts: 0,
            throttled: 0,
        }
    }

    pub fn warm_instances(&self) -> usize {
        self.instances
            .iter()
            .filter(|i| matches!(i.state, InstanceState::Warm | InstanceState::Busy))
            .count()
    }

    fn live_instances(&self) -> usize {
        self.instances
            .iter()
            .filter(|i| !matches!(i.state, InstanceState::Retired))
            .count()
    }

    fn begin_service(
        &mut self,
        ctx: &mut Ctx,
        idx: usize,
        req: RewardRequest,
        queued_at: SimTime,
        cold: bool,
    ) -> Result<(), SimError> {
        let service = self.costs.service_time(&req, ctx);
        let inst = &mut self.instances[idx];
        inst.state = InstanceState::Busy;
        inst.epoch += 1;
        inst.pending = Some((req, queued_at, cold));
        self.metrics
            .borrow_mut()
            .activity_begin(&self.pool_label, ctx.now());
        ctx.schedule_self(service, Msg::RewardServiceDone { instance: idx });
        Ok(())
    }

    fn pump(&mut self, ctx: &mut Ctx) -> Result<(), SimError> {
        // serve queued requests on warm instances, oldest first
        loop {
            if self.queue.is_empty() {
                break;
            }
            let Some(idx) = self
                .instances
                .iter()
                .position(|i| i.state == InstanceState::Warm)
            else {
                break;
            };
            let (req, queued_at) = self.queue.pop_front().unwrap();
            self.begin_service(ctx, idx, req, queued_at, false)?;
        }
        // serverless: reactive scale-up, one instance per queued request not
        // already covered by a provisioning instance
        if let RewardMode::Serverless(params) = &self.mode {
            let max = params.max_instances as usize;
            let cold = params.cold_start;
            let provisioning = self
                .instances
                .iter()
                .filter(|i| i.state == InstanceState::ColdStarting)
                .count();
            let mut backlog = self.queue.len().saturating_sub(provisioning);
            while backlog > 0 && self.live_instances() < max {
                backlog -= 1;
                self.cold_starts += 1;
                let idx = self
                    .instances
                    .iter()
                    .position(|i| i.state == InstanceState::Retired)
                    .unwrap_or_else(|| {
                        self.instances.push(Instance {
                            state: InstanceState::Retired,
                            epoch: 0,
                            pending: None,
                        });
                        self.instances.len() - 1
                    });
                let inst = &mut self.instances[idx];
                inst.state = InstanceState::ColdStarting;
                inst.epoch += 1;
                ctx.schedule_self(cold, Msg::RewardInstanceReady { instance: idx });
            }
        }
        Ok(())
    }

    fn on_invoke(&mut self, ctx: &mut Ctx, req: RewardRequest) -> Result<(), SimError> {
        // rule/sandbox evaluations in dedicated mode run off-pool (CPU
        // scripts); only llm-judge requests contend for the reserved GPUs.
        if let RewardMode::Dedicated { .. } = self.mode {
            if req.cost_class != CostClass::LlmJudge {
                let service = self.costs.service_time(&req, ctx);
                let reward = pseudo_reward(req.trajectory_id, req.cost_class);
                let queued_at = ctx.now();
                let reply = Msg::RewardDone(Box::new(RewardOutcome {
                    trajectory_id: req.trajectory_id,
                    status: RewardStatus::Ok(reward),
                    queued_at,
                    finished_at: queued_at + service,
                    cold_start: false,
                    attempt: req.attempt,
                }));
                ctx.schedule(service, req.reply_to, reply)?;
                return Ok(());
            }
        }
        let cap = match &self.mode {
            RewardMode::Serverless(p) => p.queue_cap,
            RewardMode::Dedicated { .. } => usize::MAX,
        };
        if self.queue.len() >= cap {
            self.throttled += 1;
            ctx.send(
                req.reply_to,
                Msg::RewardDone(Box::new(RewardOutcome {
                    trajectory_id: req.trajectory_id,
                    status: RewardStatus::Throttled,
                    queued_at: ctx.now(),
                    finished_at: ctx.now(),
                    cold_start: false,
                    attempt: req.attempt,
                })),
            )?;
            return Ok(());
        }
        self.queue.push_back((req, ctx.now()));
        self.pump(ctx)
    }

    fn on_instance_ready(&mut self, ctx: &mut Ctx, idx: usize) -> Result<(), SimError> {
        if self.instances[idx].state == InstanceState::ColdStarting {
            self.instances[idx].state = InstanceState::Warm;
            self.instances[idx].epoch += 1;
            if let Some((req, queued_at)) = self.queue.pop_front() {
                self.begin_service(ctx, idx, req, queued_at, true)?;
            } else {
                self.arm_idle_timer(ctx, idx);
            }
        }
        Ok(())
    }

    fn arm_idle_timer(&mut self, ctx: &mut Ctx, idx: usize) {
        if let RewardMode::Serverless(p) = &self.mode {
            let epoch = self.instances[idx].epoch;
            ctx.schedule_self(
                p.idle_timeout,
                Msg::RewardIdleCheck {
                    instance: idx,
                    epoch,
                },
            );
        }
    }

    fn on_service_done(&mut self, ctx: &mut Ctx, idx: usize) -> Result<(), SimError> {
        let (req, queued_at, cold) = self.instances[idx]
            .pending
            .take()
            .expect("service completion without request");
        self.metrics
            .borrow_mut()
            .activity_end(&self.pool_label, ctx.now());
        self.served += 1;
        let reward = pseudo_reward(req.trajectory_id, req.cost_class);
        ctx.send(
            req.reply_to,
            Msg::RewardDone(Box::new(RewardOutcome {
                trajectory_id: req.trajectory_id,
                status: RewardStatus::Ok(reward),
                queued_at,
                finished_at: ctx.now(),
                cold_start: cold,
                attempt: req.attempt,
            })),
        )?;
        let inst = &mut self.instances[idx];
        inst.state = InstanceState::Warm;
        inst.epoch += 1;
        if let Some((req, queued_at)) = self.queue.pop_front() {
            self.begin_service(ctx, idx, req, queued_at, false)?;
        } else {
            self.arm_idle_timer(ctx, idx);
            self.pump(ctx)?;
        }
        Ok(())
    }

    fn on_idle_check(&mut self, idx: usize, epoch: u64) {
        let inst = &mut self.instances[idx];
        // scale-to-zero: retire only if nothing touched the instance since
        // the timer was armed
        if inst.state == InstanceState::Warm && inst.epoch == epoch {
            inst.state = InstanceState::Retired;
            inst.epoch += 1;
        }
    }
}

impl Actor for RewardService {
    fn handle(&mut self, msg: Msg, ctx: &mut Ctx) -> Result<(), SimError> {
        match msg {
            Msg::RewardInvoke(req) => self.on_invoke(ctx, *req),
            Msg::RewardInstanceReady { instance } => self.on_instance_ready(ctx, instance),
            Msg::RewardServiceDone { instance } => self.on_service_done(ctx, instance),
            Msg::RewardIdleCheck { instance, epoch } => {
                self.on_idle_check(instance, epoch);
                Ok(())
            }
            other => Err(SimError::contract(format!(
                "reward service received unexpected message {}",
                other.kind()
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pseudo_reward_is_stable_and_bounded() {
        let a = pseudo_reward(TrajectoryId(42), CostClass::LlmJudge);
        let b = pseudo_reward(TrajectoryId(42), CostClass::LlmJudge);
        assert_eq!(a, b);
        assert!((0.0..1.0).contains(&a));
        // different inputs give different rewards (with overwhelming odds)
        assert_ne!(a, pseudo_reward(TrajectoryId(43), CostClass::LlmJudge));
        assert_ne!(a, pseudo_reward(TrajectoryId(42), CostClass::RuleBased));
    }
}
