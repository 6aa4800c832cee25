//! Heterogeneous resource pools and worker bindings.
//!
//! The manager owns every labeled device pool, hands capacity to workers,
//! and keeps an append-only journal of allocations and status transitions —
//! the in-process metadata view that the rest of the runtime queries.
//!
//! Failure policy for workers: a first failure holds the worker's devices
//! and restarts it in place; a second failure before a successful restart
//! removes the worker and returns its devices to the pool.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::kernel::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkerRole {
    Train,
    Inference,
    Environment,
    Reward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkerStatus {
    Alive,
    Restarting,
    Removed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerBinding {
    pub worker_id: String,
    pub role: WorkerRole,
    pub pool_label: String,
    pub device_count: u64,
    pub status: WorkerStatus,
    /// Consecutive failures without a completed restart.
    pub strikes: u8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Pool {
    pub label: String,
    pub capacity: u64,
    pub allocated: BTreeMap<String, u64>,
}

impl Pool {
    pub fn used(&self) -> u64 {
        self.allocated.values().sum()
    }

    pub fn free(&self) -> u64 {
        self.capacity - self.used()
    }
}

/// Journal entry; timestamps are filled in by the owning actor when known.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Transition {
    pub at: SimTime,
    pub worker_id: String,
    pub kind: String,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResourceSnapshot {
    pub pools: Vec<Pool>,
    pub bindings: Vec<WorkerBinding>,
    pub transitions: Vec<Transition>,
}

#[derive(Debug, Default)]
pub struct ResourceManager {
    pools: BTreeMap<String, Pool>,
    workers: BTreeMap<String, WorkerBinding>,
    journal: Vec<Transition>,
}

impl ResourceManager {
    /// Build a manager from `(label, device count)` pairs. Duplicate labels
    /// are rejected.
    pub fn create_pools(spec: &[(String, u64)]) -> Result<ResourceManager, SimError> {
        let mut pools = BTreeMap::new();
        for (label, capacity) in spec {
            if pools
                .insert(
                    label.clone(),
                    Pool {
                        label: label.clone(),
                        capacity: *capacity,
                        allocated: BTreeMap::new(),
                    },
                )
                .is_some()
            {
                return Err(SimError::DuplicatePool(label.clone()));
            }
        }
        Ok(ResourceManager {
            pools,
            workers: BTreeMap::new(),
            journal: Vec::new(),
        })
    }

    pub fn pool(&self, label: &str) -> Option<&Pool> {
        self.pools.get(label)
    }

    pub fn free_capacity(&self, label: &str) -> Result<u64, SimError> {
        self.pools
            .get(label)
            .map(Pool::free)
            .ok_or_else(|| SimError::UnknownPool(label.to_string()))
    }

    pub fn binding(&self, worker_id: &str) -> Option<&WorkerBinding> {
        self.workers.get(worker_id)
    }

    /// Bind `n` devices of `pool_label` to a new worker. A zero-device
    /// binding is valid (a purely logical worker).
    pub fn allocate(
        &mut self,
        at: SimTime,
        worker_id: impl Into<String>,
        role: WorkerRole,
        pool_label: &str,
        n: u64,
    ) -> Result<WorkerBinding, SimError> {
        let worker_id = worker_id.into();
        if self.workers.contains_key(&worker_id) {
            return Err(SimError::config(format!(
                "worker '{worker_id}' is already bound"
            )));
        }
        let pool = self
            .pools
            .get_mut(pool_label)
            .ok_or_else(|| SimError::UnknownPool(pool_label.to_string()))?;
        let free = pool.free();
        if n > free {
            return Err(SimError::Capacity {
                pool: pool_label.to_string(),
                requested: n,
                free,
            });
        }
        if n > 0 {
            pool.allocated.insert(worker_id.clone(), n);
        }
        let binding = WorkerBinding {
            worker_id: worker_id.clone(),
            role,
            pool_label: pool_label.to_string(),
            device_count: n,
            status: WorkerStatus::Alive,
            strikes: 0,
        };
        self.workers.insert(worker_id.clone(), binding.clone());
        self.journal.push(Transition {
            at,
            worker_id,
            kind: "allocate".into(),
            detail: format!("{n} x {pool_label}"),
        });
        Ok(binding)
    }

    /// First failure: restart in place, devices retained. Second consecutive
    /// failure: worker removed, devices returned to the pool.
    pub fn mark_failed(&mut self, at: SimTime, worker_id: &str) -> Result<WorkerStatus, SimError> {
        let w = self
            .workers
            .get_mut(worker_id)
            .ok_or_else(|| SimError::UnknownWorker(worker_id.to_string()))?;
        if w.status == WorkerStatus::Removed {
            return Ok(WorkerStatus::Removed);
        }
        w.strikes += 1;
        let status = if w.strikes >= 2 {
            w.status = WorkerStatus::Removed;
            if let Some(pool) = self.pools.get_mut(&w.pool_label) {
                pool.allocated.remove(worker_id);
            }
            WorkerStatus::Removed
        } else {
            w.status = WorkerStatus::Restarting;
            WorkerStatus::Restarting
        };
        self.journal.push(Transition {
            at,
            worker_id: worker_id.to_string(),
            kind: "failed".into(),
            detail: format!("{status:?}"),
        });
        Ok(status)
    }

    /// Complete a restart: `restarting -> alive`, strike counter cleared.
    /// Restarting an alive worker is a no-op.
    pub fn restart(&mut self, at: SimTime, worker_id: &str) -> Result<WorkerStatus, SimError> {
        let w = self
            .workers
            .get_mut(worker_id)
            .ok_or_else(|| SimError::UnknownWorker(worker_id.to_string()))?;
        match w.status {
            WorkerStatus::Alive => Ok(WorkerStatus::Alive),
            WorkerStatus::Removed => Err(SimError::contract(format!(
                "worker '{worker_id}' was removed and cannot restart"
            ))),
            WorkerStatus::Restarting => {
                w.status = WorkerStatus::Alive;
                w.strikes = 0;
                self.journal.push(Transition {
                    at,
                    worker_id: worker_id.to_string(),
                    kind: "restarted".into(),
                    detail: "alive".into(),
                });
                Ok(WorkerStatus::Alive)
            }
        }
    }

    /// Return a worker's devices without a failure (orderly shutdown).
    pub fn release(&mut self, at: SimTime, worker_id: &str) -> Result<(), SimError> {
        let w = self
            .workers
            .get_mut(worker_id)
            .ok_or_else(|| SimError::UnknownWorker(worker_id.to_string()))?;
        if let Some(pool) = self.pools.get_mut(&w.pool_label) {
            pool.allocated.remove(worker_id);
        }
        w.status = WorkerStatus::Removed;
        self.journal.push(Transition {
            at,
            worker_id: worker_id.to_string(),
            kind: "released".into(),
            detail: String::new(),
        });
        Ok(())
    }

    pub fn snapshot(&self) -> ResourceSnapshot {
        ResourceSnapshot {
            pools: self.pools.values().cloned().collect(),
            bindings: self.workers.values().cloned().collect(),
            transitions: self.journal.clone(),
        }
    }

    pub fn snapshot_json(&self) -> String {
        serde_json::to_string_pretty(&self.snapshot()).expect("snapshot serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t0() -> SimTime {
        SimTime::ZERO
    }

    fn pools(spec: &[(&str, u64)]) -> ResourceManager {
        let spec: Vec<(String, u64)> = spec.iter().map(|(l, n)| (l.to_string(), *n)).collect();
        ResourceManager::create_pools(&spec).unwrap()
    }

    #[test]
    fn create_pools_basic() {
        let rm = pools(&[("H800", 8), ("H20", 24)]);
        assert_eq!(rm.pool("H800").unwrap().capacity, 8);
        assert_eq!(rm.pool("H20").unwrap().capacity, 24);

        let empty = ResourceManager::create_pools(&[]).unwrap();
        assert!(empty.pool("H800").is_none());

        let dup = ResourceManager::create_pools(&[
            ("H800".to_string(), 8),
            ("H800".to_string(), 4),
        ]);
        assert_eq!(dup.unwrap_err(), SimError::DuplicatePool("H800".into()));
    }

    #[test]
    fn allocate_until_exhausted() {
        let mut rm = pools(&[("H800", 8)]);
        rm.allocate(t0(), "w0", WorkerRole::Train, "H800", 4).unwrap();
        rm.allocate(t0(), "w1", WorkerRole::Train, "H800", 4).unwrap();
        let err = rm
            .allocate(t0(), "w2", WorkerRole::Train, "H800", 1)
            .unwrap_err();
        assert_eq!(
            err,
            SimError::Capacity {
                pool: "H800".into(),
                requested: 1,
                free: 0
            }
        );
    }

    #[test]
    fn zero_device_binding_is_valid() {
        let mut rm = pools(&[("CPU", 4)]);
        let b = rm
            .allocate(t0(), "logical", WorkerRole::Environment, "CPU", 0)
            .unwrap();
        assert_eq!(b.device_count, 0);
        assert_eq!(rm.free_capacity("CPU").unwrap(), 4);
    }

    #[test]
    fn unknown_pool_is_an_error() {
        let mut rm = pools(&[("H800", 8)]);
        assert!(matches!(
            rm.allocate(t0(), "w", WorkerRole::Train, "H900", 1),
            Err(SimError::UnknownPool(_))
        ));
    }

    #[test]
    fn first_failure_restarts_in_place() {
        let mut rm = pools(&[("H20", 4)]);
        rm.allocate(t0(), "w", WorkerRole::Inference, "H20", 2).unwrap();
        assert_eq!(rm.mark_failed(t0(), "w").unwrap(), WorkerStatus::Restarting);
        // devices still held during restart
        assert_eq!(rm.free_capacity("H20").unwrap(), 2);
        assert_eq!(rm.restart(t0(), "w").unwrap(), WorkerStatus::Alive);
        assert_eq!(rm.binding("w").unwrap().strikes, 0);
    }

    #[test]
    fn second_consecutive_failure_removes_worker() {
        let mut rm = pools(&[("H20", 4)]);
        rm.allocate(t0(), "w", WorkerRole::Inference, "H20", 2).unwrap();
        rm.mark_failed(t0(), "w").unwrap();
        assert_eq!(rm.mark_failed(t0(), "w").unwrap(), WorkerStatus::Removed);
        // capacity returned to the pool
        assert_eq!(rm.free_capacity("H20").unwrap(), 4);
        assert!(rm.restart(t0(), "w").is_err());
    }

    #[test]
    fn restart_of_alive_worker_is_noop() {
        let mut rm = pools(&[("H20", 4)]);
        rm.allocate(t0(), "w", WorkerRole::Inference, "H20", 1).unwrap();
        assert_eq!(rm.restart(t0(), "w").unwrap(), WorkerStatus::Alive);
        assert!(rm.mark_failed(t0(), "nope").is_err());
    }

    #[test]
    fn snapshot_contains_journal() {
        let mut rm = pools(&[("H800", 8)]);
        rm.allocate(t0(), "w", WorkerRole::Train, "H800", 8).unwrap();
        rm.mark_failed(t0(), "w").unwrap();
        let snap = rm.snapshot();
        assert_eq!(snap.transitions.len(), 2);
        assert_eq!(snap.pools.len(), 1);
        let json = rm.snapshot_json();
        assert!(json.contains("\"allocate\""));
    }
}

#[cfg(test)]
mod conservation {
    use super::*;
    use proptest::prelude::*;

    #[derive(Debug, Clone)]
    enum Op {
        Allocate(u8, u64),
        Fail(u8),
        Restart(u8),
        Release(u8),
    }

    fn op_strategy() -> impl Strategy<Value = Op> {
        prop_oneof![
            (0u8..20, 0u64..6).prop_map(|(w, n)| Op::Allocate(w, n)),
            (0u8..20).prop_map(Op::Fail),
            (0u8..20).prop_map(Op::Restart),
            (0u8..20).prop_map(Op::Release),
        ]
    }

    proptest! {
        /// allocated + free == capacity after any op sequence, including
        /// failure and restart chains.
        #[test]
        fn capacity_is_conserved(ops in proptest::collection::vec(op_strategy(), 1..80)) {
            let mut rm = ResourceManager::create_pools(&[("P".to_string(), 16)]).unwrap();
            for op in ops {
                let _ = match op {
                    Op::Allocate(w, n) => rm
                        .allocate(SimTime::ZERO, format!("w{w}"), WorkerRole::Inference, "P", n)
                        .map(|_| ()),
                    Op::Fail(w) => rm.mark_failed(SimTime::ZERO, &format!("w{w}")).map(|_| ()),
                    Op::Restart(w) => rm.restart(SimTime::ZERO, &format!("w{w}")).map(|_| ()),
                    Op::Release(w) => rm.release(SimTime::ZERO, &format!("w{w}")),
                };
                let pool = rm.pool("P").unwrap();
                prop_assert_eq!(pool.used() + pool.free(), pool.capacity);
                // no binding ever references devices beyond pool capacity
                prop_assert!(pool.used() <= pool.capacity);
            }
        }
    }
}
