//! Gateway between rollout clients and the inference workers.
//!
//! Routes each generation request to a worker through the cluster's affinity
//! table, forwards aborts, and runs the suspend/resume broadcast used by the
//! weight-synchronization protocol. Submissions arriving while the fleet is
//! suspended are held at the proxy and delivered after resume in arrival
//! order.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::rc::Rc;

use crate::cluster::ClusterCore;
use crate::engine::{Command, GenerationOutcome, GenerationRequest, GenerationStatus};
use crate::error::SimError;
use crate::ids::RequestId;
use crate::kernel::{Actor, ActorId, Ctx};
use crate::msg::Msg;
use crate::workload::ModelSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ControlKind {
    Suspend,
    Resume,
}

struct ControlGather {
    kind: ControlKind,
    pending: BTreeSet<usize>,
    reply_to: ActorId,
}

pub struct LlmProxy {
    cluster: Rc<RefCell<ClusterCore>>,
    model: ModelSpec,
    suspended: bool,
    held: VecDeque<GenerationRequest>,
    request_route: BTreeMap<RequestId, usize>,
    gather: Option<ControlGather>,
    /// Count of requests served outside their preferred pool.
    pub fallback_count: u64,
}

impl LlmProxy {
    pub fn new(cluster: Rc<RefCell<ClusterCore>>, model: ModelSpec) -> LlmProxy {
        LlmProxy {
            cluster,
            model,
            suspended: false,
            held: VecDeque::new(),
            request_route: BTreeMap::new(),
            gather: None,
            fallback_count: 0,
        }
    }

    fn kv_need(&self, req: &GenerationRequest) -> f64 {
        (req.context_tokens + req.max_new_tokens) as f64 * self.model.kv_bytes_per_token
    }

    fn fail(
        &self,
        ctx: &mut Ctx,
        req: &GenerationRequest,
        reason: String,
    ) -> Result<(), SimError> {
        ctx.send(
            req.callback,
            Msg::GenerationDone(GenerationOutcome {
                request_id: req.request_id,
                trajectory_id: req.trajectory_id,
                status: GenerationStatus::Failed(reason),
                response_tokens: 0,
                worker: None,
            }),
        )?;
        Ok(())
    }

    fn route(&mut self, ctx: &mut Ctx, req: GenerationRequest) -> Result<(), SimError> {
        if let Err(e) = req.validate() {
            return self.fail(ctx, &req, e.to_string());
        }
        if self.request_route.contains_key(&req.request_id) {
            return self.fail(ctx, &req, "duplicate request id".into());
        }
        let need = self.kv_need(&req);
        let decision = self
            .cluster
            .borrow()
            .route_by_affinity("generate", &req.tag, need);
        match decision {
            Ok(route) => {
                if route.fallback {
                    self.fallback_count += 1;
                    ctx.note(
                        "affinity_fallback",
                        format!(
                            "request {} tag '{}' served by worker {}",
                            req.request_id, req.tag, route.worker_index
                        ),
                    );
                }
                let target = self.cluster.borrow().actor_of(route.worker_index);
                self.request_route.insert(req.request_id, route.worker_index);
                ctx.send(target, Msg::Command(Command::Add(Box::new(req))))?;
                Ok(())
            }
            Err(e) => self.fail(ctx, &req, e.to_string()),
        }
    }

    fn finish_gather(&mut self, ctx: &mut Ctx) -> Result<(), SimError> {
        let done = self
            .gather
            .as_ref()
            .map(|g| g.pending.is_empty())
            .unwrap_or(false);
        if !done {
            return Ok(());
        }
        let g = self.gather.take().unwrap();
        match g.kind {
            ControlKind::Suspend => {
                ctx.send(g.reply_to, Msg::AllSuspended)?;
            }
            ControlKind::Resume => {
                self.suspended = false;
                // deliver generation requests held during the suspend window
                while let Some(req) = self.held.pop_front() {
                    self.route(ctx, req)?;
                }
                ctx.send(g.reply_to, Msg::AllResumed)?;
            }
        }
        Ok(())
    }

    fn broadcast_control(
        &mut self,
        ctx: &mut Ctx,
        kind: ControlKind,
        reply_to: ActorId,
    ) -> Result<(), SimError> {
        debug_assert!(self.gather.is_none(), "control broadcasts never overlap");
        let alive = self.cluster.borrow().alive_members();
        let cmd = match kind {
            ControlKind::Suspend => Command::Suspend,
            ControlKind::Resume => Command::Resume,
        };
        for &w in &alive {
            let target = self.cluster.borrow().actor_of(w);
            ctx.send(target, Msg::Command(cmd.clone()))?;
        }
        self.gather = Some(ControlGather {
            kind,
            pending: alive.into_iter().collect(),
            reply_to,
        });
        self.finish_gather(ctx)
    }
}

impl Actor for LlmProxy {
    fn handle(&mut self, msg: Msg, ctx: &mut Ctx) -> Result<(), SimError> {
        match msg {
            Msg::Submit(req) => {
                if self.suspended {
                    self.held.push_back(*req);
                    Ok(())
                } else {
                    self.route(ctx, *req)
                }
            }
            Msg::AbortGeneration { request_id } => {
                if let Some(&w) = self.request_route.get(&request_id) {
                    let target = self.cluster.borrow().actor_of(w);
                    ctx.send(target, Msg::Command(Command::Abort(request_id)))?;
                }
                // unknown id: acknowledged no-op
                Ok(())
            }
            Msg::SuspendAll { reply_to } => {
                self.suspended = true;
                self.broadcast_control(ctx, ControlKind::Suspend, reply_to)
            }
            Msg::ResumeAll { reply_to, version } => {
                // Publish the freshly distributed version before the workers
                // resume; engines read it when they restart stepping.
                self.cluster.borrow().board.borrow_mut().distributed_version = version;
                self.broadcast_control(ctx, ControlKind::Resume, reply_to)
            }
            Msg::WorkerSuspended { worker } => {
                if let Some(g) = self.gather.as_mut() {
                    if g.kind == ControlKind::Suspend {
                        g.pending.remove(&worker);
                    }
                }
                self.finish_gather(ctx)
            }
            Msg::WorkerResumed { worker } => {
                if let Some(g) = self.gather.as_mut() {
                    if g.kind == ControlKind::Resume {
                        g.pending.remove(&worker);
                    }
                }
                self.finish_gather(ctx)
            }
            other => Err(SimError::contract(format!(
                "proxy received unexpected message {}",
                other.kind()
            ))),
        }
    }
}
