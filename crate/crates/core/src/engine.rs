//! Command-driven inference worker.
//!
//! Each worker owns a continuous-batching engine loop: it drains pending
//! ADD/ABORT/SUSPEND/RESUME commands, admits waiting requests while the KV
//! budget allows, then advances one chunked-prefill or one decode step for
//! the resident batch. Request completion fires a callback event at step
//! completion time. Adding or aborting a request never stalls the batch by
//! more than the step already in flight.

use std::cell::RefCell;
use std::collections::VecDeque;
use std::rc::Rc;

use serde::Serialize;

use crate::error::SimError;
use crate::ids::{RequestId, TrajectoryId};
use crate::kernel::{Actor, ActorId, Ctx, EventId, SimTime};
use crate::metrics::MetricsHub;
use crate::msg::Msg;
use crate::workload::{decode_step_time, prefill_time, HardwareProfile, ModelSpec};

/// A single generation call: prefill `context_tokens`, then decode exactly
/// `max_new_tokens` (the simulator draws per-turn response lengths up front,
/// so the stop condition is the drawn length).
#[derive(Debug, Clone)]
pub struct GenerationRequest {
    pub request_id: RequestId,
    pub trajectory_id: TrajectoryId,
    /// Affinity routing tag.
    pub tag: String,
    pub context_tokens: u64,
    pub max_new_tokens: u64,
    /// Actor that receives the completion callback.
    pub callback: ActorId,
}

impl GenerationRequest {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.context_tokens == 0 || self.max_new_tokens == 0 {
            return Err(SimError::contract(format!(
                "request {}: context_tokens and max_new_tokens must be >= 1",
                self.request_id
            )));
        }
        Ok(())
    }
}

/// Control messages driving the engine loop.
#[derive(Debug, Clone)]
pub enum Command {
    Add(Box<GenerationRequest>),
    Abort(RequestId),
    Suspend,
    Resume,
}

impl Command {
    pub fn kind(&self) -> &'static str {
        match self {
            Command::Add(_) => "ADD",
            Command::Abort(_) => "ABORT",
            Command::Suspend => "SUSPEND",
            Command::Resume => "RESUME",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GenerationStatus {
    Completed,
    Aborted,
    Failed(String),
}

/// Terminal callback for a generation request; exactly one per request.
#[derive(Debug, Clone)]
pub struct GenerationOutcome {
    pub request_id: RequestId,
    pub trajectory_id: TrajectoryId,
    pub status: GenerationStatus,
    pub response_tokens: u64,
    pub worker: Option<usize>,
}

/// Engine tunables from the scenario.
#[derive(Debug, Clone)]
pub struct EngineParams {
    /// Prefill chunk size in tokens per engine step.
    pub chunk_tokens: u64,
    /// Cap on resident requests.
    pub max_concurrent: u64,
    /// KV budget in bytes (already reduced by resident weights).
    pub kv_budget_bytes: f64,
    /// Scalar discount on fresh-context prefill cost (prefix caching);
    /// 1.0 = no discount. KV recomputation is always charged at full cost.
    pub prefix_discount: f64,
}

/// Live occupancy of one worker, readable by the routing layer.
#[derive(Debug, Clone, Serialize)]
pub struct LoadGauge {
    pub pool: String,
    pub alive: bool,
    pub suspended: bool,
    /// Resident + waiting requests.
    pub outstanding: u64,
    /// KV bytes claimed by resident and waiting requests.
    pub kv_claimed: f64,
    pub kv_budget: f64,
    pub max_concurrent: u64,
}

impl LoadGauge {
    /// Whether this worker can take `need` more KV bytes without queueing
    /// behind its budget.
    pub fn can_admit(&self, need: f64) -> bool {
        self.alive
            && self.outstanding < self.max_concurrent
            && self.kv_claimed + need <= self.kv_budget
    }
}

/// Shared read view of all workers' occupancy; written only by the workers
/// themselves (and the distribution bookkeeping), read by the router.
#[derive(Debug, Default)]
pub struct LoadBoard {
    pub gauges: Vec<LoadGauge>,
    /// Latest fully distributed policy version.
    pub distributed_version: u64,
}

pub type SharedLoadBoard = Rc<RefCell<LoadBoard>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Prefill,
    Decode,
}

#[derive(Debug)]
struct Resident {
    req: GenerationRequest,
    /// Fresh context tokens prefilled so far.
    prefilled: u64,
    /// Tokens that must be re-prefilled after a resume before anything else.
    recompute_pending: u64,
    /// Total recompute tokens charged (reported separately from context).
    recompute_done: u64,
    decoded: u64,
}

impl Resident {
    fn kv_tokens(&self) -> u64 {
        self.prefilled + self.decoded
    }
}

#[derive(Debug)]
enum StepPlan {
    Prefill {
        request: RequestId,
        tokens: u64,
        recompute: bool,
    },
    Decode,
}

pub struct InferenceWorker {
    pub worker_index: usize,
    pub name: String,
    pool_label: String,
    proxy: ActorId,
    hw: HardwareProfile,
    model: ModelSpec,
    params: EngineParams,
    version: u64,
    alive: bool,
    suspended: bool,
    pending_suspend_ack: bool,
    resident: Vec<Resident>,
    waiting: VecDeque<GenerationRequest>,
    cmd_queue: VecDeque<Command>,
    in_flight: Option<(StepPlan, SimTime, EventId)>,
    kv_reserved: f64,
    restart_delay: SimTime,
    board: SharedLoadBoard,
    metrics: Rc<RefCell<MetricsHub>>,
    resources: Rc<RefCell<crate::resources::ResourceManager>>,
}

impl InferenceWorker {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        worker_index: usize,
        name: String,
        pool_label: String,
        proxy: ActorId,
        hw: HardwareProfile,
        model: ModelSpec,
        params: EngineParams,
        restart_delay: SimTime,
        board: SharedLoadBoard,
        metrics: Rc<RefCell<MetricsHub>>,
        resources: Rc<RefCell<crate::resources::ResourceManager>>,
    ) -> InferenceWorker {
        InferenceWorker {
            worker_index,
            name,
            pool_label,
            proxy,
            hw,
            model,
            params,
            version: 0,
            alive: true,
            suspended: false,
            pending_suspend_ack: false,
            resident: Vec::new(),
            waiting: VecDeque::new(),
            cmd_queue: VecDeque::new(),
            in_flight: None,
            kv_reserved: 0.0,
            restart_delay,
            board,
            metrics,
            resources,
        }
    }

    pub fn initial_gauge(&self) -> LoadGauge {
        LoadGauge {
            pool: self.pool_label.clone(),
            alive: true,
            suspended: false,
            outstanding: 0,
            kv_claimed: 0.0,
            kv_budget: self.params.kv_budget_bytes,
            max_concurrent: self.params.max_concurrent,
        }
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn resident_count(&self) -> usize {
        self.resident.len()
    }

    pub fn waiting_count(&self) -> usize {
        self.waiting.len()
    }

    pub fn kv_used_bytes(&self) -> f64 {
        self.resident
            .iter()
            .map(|r| r.kv_tokens() as f64 * self.model.kv_bytes_per_token)
            .sum()
    }

    fn kv_need(&self, req: &GenerationRequest) -> f64 {
        (req.context_tokens + req.max_new_tokens) as f64 * self.model.kv_bytes_per_token
    }

    fn publish_gauge(&self) {
        let mut board = self.board.borrow_mut();
        let waiting_claim: f64 = self.waiting.iter().map(|r| self.kv_need(r)).sum();
        let g = &mut board.gauges[self.worker_index];
        g.alive = self.alive;
        g.suspended = self.suspended;
        g.outstanding = (self.resident.len() + self.waiting.len()) as u64;
        g.kv_claimed = self.kv_reserved + waiting_claim;
    }

    fn finish(
        &mut self,
        ctx: &mut Ctx,
        req: &GenerationRequest,
        status: GenerationStatus,
        response_tokens: u64,
    ) -> Result<(), SimError> {
        let outcome = GenerationOutcome {
            request_id: req.request_id,
            trajectory_id: req.trajectory_id,
            status,
            response_tokens,
            worker: Some(self.worker_index),
        };
        ctx.send(req.callback, Msg::GenerationDone(outcome))?;
        Ok(())
    }

    fn drain_commands(&mut self, ctx: &mut Ctx) -> Result<(), SimError> {
        while let Some(cmd) = self.cmd_queue.pop_front() {
            match cmd {
                Command::Add(req) => {
                    let duplicate = self
                        .resident
                        .iter()
                        .any(|r| r.req.request_id == req.request_id)
                        || self.waiting.iter().any(|w| w.request_id == req.request_id);
                    if duplicate {
                        self.finish(
                            ctx,
                            &req,
                            GenerationStatus::Failed("duplicate request id".into()),
                            0,
                        )?;
                        continue;
                    }
                    if self.kv_need(&req) > self.params.kv_budget_bytes {
                        self.finish(
                            ctx,
                            &req,
                            GenerationStatus::Failed(format!(
                                "request exceeds worker KV budget ({} bytes)",
                                self.params.kv_budget_bytes
                            )),
                            0,
                        )?;
                        continue;
                    }
                    self.waiting.push_back(*req);
                }
                Command::Abort(id) => {
                    if let Some(pos) = self.resident.iter().position(|r| r.req.request_id == id) {
                        let r = self.resident.remove(pos);
                        self.kv_reserved -= self.kv_need(&r.req);
                        self.finish(ctx, &r.req.clone(), GenerationStatus::Aborted, r.decoded)?;
                    } else if let Some(pos) = self.waiting.iter().position(|w| w.request_id == id) {
                        let req = self.waiting.remove(pos).unwrap();
                        self.finish(ctx, &req, GenerationStatus::Aborted, 0)?;
                    }
                    // Unknown id: acknowledged no-op (possibly raced with
                    // completion; the terminal callback already fired).
                }
                Command::Suspend | Command::Resume => {
                    unreachable!("control commands are handled eagerly")
                }
            }
        }
        Ok(())
    }

    fn admit(&mut self) {
        while let Some(front) = self.waiting.front() {
            let need = self.kv_need(front);
            if self.resident.len() as u64 >= self.params.max_concurrent
                || self.kv_reserved + need > self.params.kv_budget_bytes
            {
                break;
            }
            let req = self.waiting.pop_front().unwrap();
            self.kv_reserved += need;
            self.resident.push(Resident {
                req,
                prefilled: 0,
                recompute_pending: 0,
                recompute_done: 0,
                decoded: 0,
            });
        }
    }

    fn choose_step(&self) -> Option<StepPlan> {
        for r in &self.resident {
            if r.recompute_pending > 0 {
                return Some(StepPlan::Prefill {
                    request: r.req.request_id,
                    tokens: r.recompute_pending.min(self.params.chunk_tokens),
                    recompute: true,
                });
            }
            if r.prefilled < r.req.context_tokens {
                return Some(StepPlan::Prefill {
                    request: r.req.request_id,
                    tokens: (r.req.context_tokens - r.prefilled).min(self.params.chunk_tokens),
                    recompute: false,
                });
            }
        }
        if self.resident.is_empty() {
            None
        } else {
            Some(StepPlan::Decode)
        }
    }

    /// Engine loop body: drain commands, admit, start one step if work exists.
    fn kick(&mut self, ctx: &mut Ctx) -> Result<(), SimError> {
        if !self.alive || self.in_flight.is_some() {
            return Ok(());
        }
        if self.suspended {
            self.publish_gauge();
            return Ok(());
        }
        self.drain_commands(ctx)?;
        self.admit();
        if let Some(plan) = self.choose_step() {
            let duration = match &plan {
                StepPlan::Prefill {
                    tokens, recompute, ..
                } => {
                    let base = prefill_time(*tokens, &self.model, &self.hw);
                    if *recompute {
                        base
                    } else {
                        base.scale(self.params.prefix_discount)
                    }
                }
                StepPlan::Decode => {
                    decode_step_time(self.resident.len() as u64, &self.model, &self.hw)
                }
            };
            let ev = ctx.schedule_self(duration, Msg::StepDone);
            self.in_flight = Some((plan, ctx.now(), ev));
        }
        self.publish_gauge();
        Ok(())
    }

    fn apply_step(&mut self, ctx: &mut Ctx) -> Result<(), SimError> {
        let (plan, started, _) = self.in_flight.take().expect("step completion without plan");
        let (kind, batch, tokens) = match plan {
            StepPlan::Prefill {
                request,
                tokens,
                recompute,
            } => {
                let r = self
                    .resident
                    .iter_mut()
                    .find(|r| r.req.request_id == request)
                    .expect("prefill target resident");
                if recompute {
                    r.recompute_pending -= tokens;
                    r.recompute_done += tokens;
                } else {
                    r.prefilled += tokens;
                }
                (StepKind::Prefill, 1u64, tokens)
            }
            StepPlan::Decode => {
                let batch = self.resident.len() as u64;
                for r in &mut self.resident {
                    r.decoded += 1;
                }
                // Resident order is admission order, so draining completed
                // requests front to back fires callbacks in admission order;
                // seq breaks the same-timestamp tie deterministically.
                let mut i = 0;
                while i < self.resident.len() {
                    if self.resident[i].decoded >= self.resident[i].req.max_new_tokens {
                        let r = self.resident.remove(i);
                        self.kv_reserved -= self.kv_need(&r.req);
                        self.finish(ctx, &r.req.clone(), GenerationStatus::Completed, r.decoded)?;
                    } else {
                        i += 1;
                    }
                }
                (StepKind::Decode, batch, batch)
            }
        };
        self.metrics.borrow_mut().engine_step(
            &self.name,
            &self.pool_label,
            started,
            ctx.now(),
            kind,
            batch,
            tokens,
            self.kv_used_bytes(),
        );
        if self.suspended && self.pending_suspend_ack {
            self.pending_suspend_ack = false;
            ctx.send(
                self.proxy,
                Msg::WorkerSuspended {
                    worker: self.worker_index,
                },
            )?;
        }
        self.kick(ctx)
    }

    fn on_suspend(&mut self, ctx: &mut Ctx) -> Result<(), SimError> {
        if self.suspended {
            // suspend of a suspended worker: ack again, no state change
            ctx.send(
                self.proxy,
                Msg::WorkerSuspended {
                    worker: self.worker_index,
                },
            )?;
            return Ok(());
        }
        self.suspended = true;
        if self.in_flight.is_some() {
            // in-flight step completes first; ack at step completion
            self.pending_suspend_ack = true;
        } else {
            ctx.send(
                self.proxy,
                Msg::WorkerSuspended {
                    worker: self.worker_index,
                },
            )?;
        }
        self.publish_gauge();
        Ok(())
    }

    fn on_resume(&mut self, ctx: &mut Ctx, version: u64) -> Result<(), SimError> {
        if self.suspended {
            self.suspended = false;
            // Resumed requests are re-prefixed under the new weights: charge
            // one KV recomputation per resident request, equal to re-reading
            // everything currently in its KV (context progress + generated
            // tokens). Progress counters are preserved; decoding continues
            // where it stopped once the recompute chunks are done.
            for r in &mut self.resident {
                r.recompute_pending = r.kv_tokens();
            }
        }
        self.version = version;
        ctx.send(
            self.proxy,
            Msg::WorkerResumed {
                worker: self.worker_index,
            },
        )?;
        self.kick(ctx)
    }

    fn on_fault(&mut self, ctx: &mut Ctx) -> Result<(), SimError> {
        let status = self
            .resources
            .borrow_mut()
            .mark_failed(ctx.now(), &self.name)?;
        self.alive = false;
        if let Some((_, _, ev)) = self.in_flight.take() {
            ctx.cancel(ev);
        }
        let mut doomed: Vec<GenerationRequest> =
            self.resident.drain(..).map(|r| r.req).collect();
        doomed.extend(self.waiting.drain(..));
        self.kv_reserved = 0.0;
        for req in doomed {
            self.finish(
                ctx,
                &req,
                GenerationStatus::Failed("worker failure".into()),
                0,
            )?;
        }
        if status == crate::resources::WorkerStatus::Restarting {
            ctx.schedule_self(self.restart_delay, Msg::WorkerRevive);
        }
        self.publish_gauge();
        Ok(())
    }

    fn on_revive(&mut self, ctx: &mut Ctx) -> Result<(), SimError> {
        self.resources.borrow_mut().restart(ctx.now(), &self.name)?;
        self.alive = true;
        self.suspended = false;
        self.version = self.board.borrow().distributed_version;
        self.publish_gauge();
        self.kick(ctx)
    }
}

impl Actor for InferenceWorker {
    fn handle(&mut self, msg: Msg, ctx: &mut Ctx) -> Result<(), SimError> {
        match msg {
            Msg::Command(Command::Suspend) => self.on_suspend(ctx),
            Msg::Command(Command::Resume) => {
                let version = self.board.borrow().distributed_version;
                self.on_resume(ctx, version)
            }
            Msg::Command(cmd) => {
                if !self.alive {
                    // worker down: fail ADDs immediately, ignore aborts
                    if let Command::Add(req) = cmd {
                        self.finish(
                            ctx,
                            &req,
                            GenerationStatus::Failed("worker down".into()),
                            0,
                        )?;
                    }
                    return Ok(());
                }
                self.cmd_queue.push_back(cmd);
                if self.suspended {
                    // buffered; drained on resume in arrival order
                    self.publish_gauge();
                    return Ok(());
                }
                self.kick(ctx)
            }
            Msg::StepDone => self.apply_step(ctx),
            Msg::WorkerFault => self.on_fault(ctx),
            Msg::WorkerRevive => self.on_revive(ctx),
            other => Err(SimError::contract(format!(
                "engine worker received unexpected message {}",
                other.kind()
            ))),
        }
    }
}
