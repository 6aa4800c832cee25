//! The `Cluster` abstraction: a proxy over a collection of workers.
//!
//! A cluster instantiates workers for one role, binds each method to exactly
//! one execution mode (broadcast, affinity-routed, or serverless), and keeps
//! the shared occupancy board that routing decisions read. Broadcasts are
//! linearized per cluster: two `execute_all` calls never interleave replies.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::rc::Rc;

use crate::engine::SharedLoadBoard;
use crate::error::SimError;
use crate::kernel::{Actor, ActorId, Ctx};
use crate::msg::Msg;
use crate::resources::WorkerRole;

/// Workload-tag to pool-label routing table; a `"default"` entry is required.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityTable {
    map: BTreeMap<String, String>,
}

impl AffinityTable {
    pub fn new(map: BTreeMap<String, String>) -> Result<AffinityTable, SimError> {
        if !map.contains_key("default") {
            return Err(SimError::config(
                "affinity table requires a \"default\" entry",
            ));
        }
        Ok(AffinityTable { map })
    }

    pub fn pool_for(&self, tag: &str) -> &str {
        self.map
            .get(tag)
            .unwrap_or_else(|| &self.map["default"])
    }

    pub fn default_pool(&self) -> &str {
        &self.map["default"]
    }

    pub fn labels(&self) -> impl Iterator<Item = &String> {
        self.map.values()
    }
}

/// Execution mode of a bound method.
#[derive(Debug, Clone)]
pub enum ExecMode {
    ExecuteAll,
    HwMapping(AffinityTable),
    Serverless { endpoint: String, service: ActorId },
}

/// Minimal value type for generic cluster method calls.
#[derive(Debug, Clone, PartialEq)]
pub enum CallValue {
    None,
    Int(i64),
    Text(String),
}

#[derive(Debug, Clone)]
pub struct ClusterMember {
    pub worker_index: usize,
    /// Resource-manager worker id.
    pub name: String,
    pub pool_label: String,
    pub actor: ActorId,
}

/// Shared cluster state: membership, method table, occupancy board.
pub struct ClusterCore {
    pub role: WorkerRole,
    pub members: Vec<ClusterMember>,
    methods: BTreeMap<String, ExecMode>,
    pub board: SharedLoadBoard,
}

/// Outcome of a routing decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Route {
    pub worker_index: usize,
    /// True when the preferred pool was saturated and the default pool
    /// served the request instead.
    pub fallback: bool,
}

impl ClusterCore {
    pub fn new(role: WorkerRole, members: Vec<ClusterMember>, board: SharedLoadBoard) -> Self {
        ClusterCore {
            role,
            members,
            methods: BTreeMap::new(),
            board,
        }
    }

    /// Declare a method binding. Bindings are fixed at construction time;
    /// only serverless rebinding is allowed afterwards.
    pub fn bind_method(&mut self, name: impl Into<String>, mode: ExecMode) {
        self.methods.insert(name.into(), mode);
    }

    pub fn method(&self, name: &str) -> Option<&ExecMode> {
        self.methods.get(name)
    }

    /// Rebind a method to a serverless endpoint. Replaces any prior local or
    /// serverless binding.
    pub fn register_serverless(
        &mut self,
        method: impl Into<String>,
        endpoint: &str,
        service: ActorId,
    ) -> Result<(), SimError> {
        if !(endpoint.starts_with("fc://")
            || endpoint.starts_with("http://")
            || endpoint.starts_with("https://"))
        {
            return Err(SimError::config(format!(
                "malformed serverless endpoint '{endpoint}': expected fc:// or http(s):// scheme"
            )));
        }
        self.methods.insert(
            method.into(),
            ExecMode::Serverless {
                endpoint: endpoint.to_string(),
                service,
            },
        );
        Ok(())
    }

    /// Resolve the service actor behind a serverless-bound method.
    pub fn serverless_binding(&self, method: &str) -> Result<(String, ActorId), SimError> {
        match self.methods.get(method) {
            Some(ExecMode::Serverless { endpoint, service }) => {
                Ok((endpoint.clone(), *service))
            }
            Some(_) => Err(SimError::Dispatch(format!(
                "method '{method}' is not serverless-bound"
            ))),
            None => Err(SimError::Dispatch(format!(
                "method '{method}' is not registered"
            ))),
        }
    }

    fn pick_least_loaded(
        &self,
        pool: &str,
        need_bytes: f64,
        require_admission: bool,
    ) -> Option<usize> {
        let board = self.board.borrow();
        self.members
            .iter()
            .filter(|m| m.pool_label == pool)
            .filter(|m| {
                let g = &board.gauges[m.worker_index];
                g.alive && (!require_admission || g.can_admit(need_bytes))
            })
            .min_by_key(|m| {
                (
                    board.gauges[m.worker_index].outstanding,
                    m.worker_index,
                )
            })
            .map(|m| m.worker_index)
    }

    /// Affinity routing: prefer the tag's pool while it has admission
    /// capacity; otherwise fall back to the default pool. Saturation on both
    /// sides queues on the preferred pool (preference, not exclusivity).
    pub fn route_by_affinity(
        &self,
        method: &str,
        tag: &str,
        need_bytes: f64,
    ) -> Result<Route, SimError> {
        let table = match self.methods.get(method) {
            Some(ExecMode::HwMapping(t)) => t,
            Some(_) => {
                return Err(SimError::Routing(format!(
                    "method '{method}' is not bound with a hardware mapping"
                )))
            }
            None => {
                return Err(SimError::Routing(format!(
                    "method '{method}' is not registered"
                )))
            }
        };
        let preferred = table.pool_for(tag);
        let default = table.default_pool();
        if let Some(w) = self.pick_least_loaded(preferred, need_bytes, true) {
            return Ok(Route {
                worker_index: w,
                fallback: false,
            });
        }
        if default != preferred {
            if let Some(w) = self.pick_least_loaded(default, need_bytes, true) {
                return Ok(Route {
                    worker_index: w,
                    fallback: true,
                });
            }
        }
        // both saturated: queue on the preferred pool if it is alive at all
        if let Some(w) = self.pick_least_loaded(preferred, 0.0, false) {
            return Ok(Route {
                worker_index: w,
                fallback: false,
            });
        }
        if default != preferred {
            if let Some(w) = self.pick_least_loaded(default, 0.0, false) {
                return Ok(Route {
                    worker_index: w,
                    fallback: true,
                });
            }
        }
        Err(SimError::Routing(format!(
            "no alive workers in pool '{preferred}' or '{default}'"
        )))
    }

    pub fn alive_members(&self) -> Vec<usize> {
        let board = self.board.borrow();
        self.members
            .iter()
            .filter(|m| board.gauges[m.worker_index].alive)
            .map(|m| m.worker_index)
            .collect()
    }

    pub fn actor_of(&self, worker_index: usize) -> ActorId {
        self.members
            .iter()
            .find(|m| m.worker_index == worker_index)
            .expect("worker index in cluster")
            .actor
    }

    pub fn member_name(&self, worker_index: usize) -> &str {
        &self
            .members
            .iter()
            .find(|m| m.worker_index == worker_index)
            .expect("worker index in cluster")
            .name
    }
}

/// Result of one broadcast; per-worker results in worker order.
#[derive(Debug, Clone)]
pub struct BroadcastResult {
    pub call_id: u64,
    pub method: String,
    pub results: Vec<(usize, Result<CallValue, String>)>,
}

impl BroadcastResult {
    /// Aggregate error naming every failed worker, or Ok. Successful workers'
    /// results stay available in `results` either way.
    pub fn aggregate(&self) -> Result<(), SimError> {
        let failed: Vec<String> = self
            .results
            .iter()
            .filter_map(|(w, r)| r.as_ref().err().map(|e| format!("worker {w}: {e}")))
            .collect();
        if failed.is_empty() {
            Ok(())
        } else {
            Err(SimError::Dispatch(format!(
                "broadcast '{}' failed on {}",
                self.method,
                failed.join("; ")
            )))
        }
    }
}

struct Gather {
    call_id: u64,
    method: String,
    reply_to: ActorId,
    pending: BTreeSet<usize>,
    results: BTreeMap<usize, Result<CallValue, String>>,
}

/// Actor face of a cluster: serializes `execute_all` broadcasts.
pub struct ClusterActor {
    core: Rc<std::cell::RefCell<ClusterCore>>,
    next_call: u64,
    active: Option<Gather>,
    queued: VecDeque<(String, CallValue, ActorId)>,
}

impl ClusterActor {
    pub fn new(core: Rc<std::cell::RefCell<ClusterCore>>) -> ClusterActor {
        ClusterActor {
            core,
            next_call: 0,
            active: None,
            queued: VecDeque::new(),
        }
    }

    fn start_broadcast(
        &mut self,
        ctx: &mut Ctx,
        method: String,
        arg: CallValue,
        reply_to: ActorId,
    ) -> Result<(), SimError> {
        let core = self.core.borrow();
        match core.method(&method) {
            Some(ExecMode::ExecuteAll) => {}
            Some(_) => {
                return Err(SimError::Dispatch(format!(
                    "method '{method}' is not bound as execute_all"
                )))
            }
            None => {
                return Err(SimError::Dispatch(format!(
                    "method '{method}' is not registered"
                )))
            }
        }
        let call_id = self.next_call;
        self.next_call += 1;
        let alive = core.alive_members();
        if alive.is_empty() {
            // vacuous broadcast
            drop(core);
            ctx.send(
                reply_to,
                Msg::BroadcastDone(BroadcastResult {
                    call_id,
                    method,
                    results: Vec::new(),
                }),
            )?;
            return Ok(());
        }
        for &w in &alive {
            ctx.send(
                core.actor_of(w),
                Msg::MemberInvoke {
                    call_id,
                    method: method.clone(),
                    arg: arg.clone(),
                },
            )?;
        }
        drop(core);
        self.active = Some(Gather {
            call_id,
            method,
            reply_to,
            pending: alive.into_iter().collect(),
            results: BTreeMap::new(),
        });
        Ok(())
    }

    fn finish_if_done(&mut self, ctx: &mut Ctx) -> Result<(), SimError> {
        let done = self
            .active
            .as_ref()
            .map(|g| g.pending.is_empty())
            .unwrap_or(false);
        if done {
            let g = self.active.take().unwrap();
            ctx.send(
                g.reply_to,
                Msg::BroadcastDone(BroadcastResult {
                    call_id: g.call_id,
                    method: g.method,
                    results: g.results.into_iter().collect(),
                }),
            )?;
            if let Some((method, arg, reply_to)) = self.queued.pop_front() {
                self.start_broadcast(ctx, method, arg, reply_to)?;
            }
        }
        Ok(())
    }
}

impl Actor for ClusterActor {
    fn handle(&mut self, msg: Msg, ctx: &mut Ctx) -> Result<(), SimError> {
        match msg {
            Msg::ExecuteAll {
                method,
                arg,
                reply_to,
            } => {
                if self.active.is_some() {
                    // linearize: one broadcast at a time per cluster
                    self.queued.push_back((method, arg, reply_to));
                    Ok(())
                } else {
                    self.start_broadcast(ctx, method, arg, reply_to)
                }
            }
            Msg::MemberReply {
                call_id,
                worker,
                result,
            } => {
                if let Some(g) = self.active.as_mut() {
                    if g.call_id == call_id && g.pending.remove(&worker) {
                        g.results.insert(worker, result);
                    }
                }
                self.finish_if_done(ctx)
            }
            other => Err(SimError::contract(format!(
                "cluster actor received unexpected message {}",
                other.kind()
            ))),
        }
    }
}

/// Dispatch a serverless-bound method call as a fire-and-forget invocation
/// with a completion callback delivered to `reward.reply_to`.
pub fn dispatch_serverless(
    core: &ClusterCore,
    ctx: &mut Ctx,
    method: &str,
    mut request: crate::reward::RewardRequest,
) -> Result<(), SimError> {
    let (endpoint, service) = core.serverless_binding(method)?;
    request.endpoint = endpoint;
    ctx.send(service, Msg::RewardInvoke(Box::new(request)))?;
    Ok(())
}

/// Gauge for non-engine members (scripted workers in tests, logical slots):
/// always admitting, never saturated.
pub fn blank_gauge(pool: &str) -> crate::engine::LoadGauge {
    crate::engine::LoadGauge {
        pool: pool.to_string(),
        alive: true,
        suspended: false,
        outstanding: 0,
        kv_claimed: 0.0,
        kv_budget: f64::MAX,
        max_concurrent: u64::MAX,
    }
}
