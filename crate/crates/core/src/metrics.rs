//! Uniform measurement: per-step reports, pool utilization, engine step
//! traces, trajectory records, buffer occupancy, and the consumption audit.
//!
//! The hub is a passive collector owned by the runner and shared with the
//! actors through `Rc<RefCell<_>>`; everything here is written during the
//! run and read when exporting artifacts.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::buffer::ConsumptionRecord;
use crate::engine::StepKind;
use crate::error::SimError;
use crate::ids::{GroupId, PolicyVersion, TrajectoryId};
use crate::kernel::SimTime;
use crate::rollout::{BatchRecord, Trajectory};

/// Per-phase durations of one training iteration. The identity
/// `step_time = get_batch_stall + suspend_window + train_compute`
/// holds exactly; `transfer_residual`/`broadcast` break down the window and
/// `resume_to_first_token` overlaps training (informational).
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct StepPhases {
    pub get_batch_stall: SimTime,
    pub suspend_window: SimTime,
    pub transfer_residual: SimTime,
    pub broadcast: SimTime,
    pub train_compute: SimTime,
    pub resume_to_first_token: SimTime,
}

#[derive(Debug, Clone, Serialize)]
pub struct StepReport {
    pub step: u64,
    pub started: SimTime,
    pub ended: SimTime,
    pub step_time: SimTime,
    pub prompt_tokens: u64,
    pub response_tokens: u64,
    /// (prompt + response tokens) / step_time, exactly.
    pub throughput: f64,
    pub phases: StepPhases,
    pub version: PolicyVersion,
    /// Cumulative counters sampled at step end.
    pub stale_aborts: u64,
    pub surplus_aborts: u64,
    pub wasted_tokens: u64,
}

/// Exact throughput ratio; zero step time is an error.
pub fn throughput(prompt_tokens: u64, response_tokens: u64, step_time: SimTime) -> Result<f64, SimError> {
    if step_time.secs() <= 0.0 {
        return Err(SimError::contract("throughput requires step_time > 0"));
    }
    Ok((prompt_tokens + response_tokens) as f64 / step_time.secs())
}

#[derive(Debug, Clone, Serialize)]
pub struct EngineStepRecord {
    pub started: SimTime,
    pub ended: SimTime,
    pub worker: String,
    pub pool: String,
    pub step_kind: StepKind,
    pub batch_size: u64,
    pub tokens: u64,
    pub kv_used: f64,
}

#[derive(Debug, Default)]
struct PoolActivity {
    /// Concurrent modeled activities resident on the pool.
    count: u64,
    busy_since: SimTime,
    /// Union of busy intervals (count > 0).
    spans: Vec<(SimTime, SimTime)>,
    /// Integral of `count` over time (device-seconds when one activity maps
    /// to one device).
    activity_seconds: f64,
    last_change: SimTime,
}

#[derive(Debug, Default)]
pub struct MetricsHub {
    pools: BTreeMap<String, PoolActivity>,
    pub engine_steps: Vec<EngineStepRecord>,
    pub steps: Vec<StepReport>,
    pub batches: Vec<BatchRecord>,
    pub occupancy: Vec<(SimTime, u64)>,
    pub consumptions: Vec<ConsumptionRecord>,
    trajectories: BTreeMap<TrajectoryId, Trajectory>,
    /// Aggregate rollout phase attribution over finished trajectories.
    pub rollout_gen_time: f64,
    pub rollout_env_time: f64,
    pub rollout_reset_time: f64,
    pub stale_aborts: u64,
    pub surplus_aborts: u64,
    pub wasted_prompt_tokens: u64,
    pub wasted_response_tokens: u64,
}

impl MetricsHub {
    pub fn new() -> MetricsHub {
        MetricsHub::default()
    }

    // -- pool activity ----------------------------------------------------

    pub fn activity_begin(&mut self, pool: &str, now: SimTime) {
        let a = self.pools.entry(pool.to_string()).or_default();
        a.activity_seconds += a.count as f64 * (now.secs() - a.last_change.secs());
        a.last_change = now;
        if a.count == 0 {
            a.busy_since = now;
        }
        a.count += 1;
    }

    pub fn activity_end(&mut self, pool: &str, now: SimTime) {
        let a = self.pools.get_mut(pool).expect("activity_end without begin");
        debug_assert!(a.count > 0);
        a.activity_seconds += a.count as f64 * (now.secs() - a.last_change.secs());
        a.last_change = now;
        a.count -= 1;
        if a.count == 0 {
            a.spans.push((a.busy_since, now));
        }
    }

    /// Busy fraction of `pool` within `[from, to]`: busy means at least one
    /// modeled activity resident.
    pub fn utilization(&self, pool: &str, from: SimTime, to: SimTime) -> Result<f64, SimError> {
        if to <= from {
            return Err(SimError::contract("utilization window must be non-empty"));
        }
        let Some(a) = self.pools.get(pool) else {
            return Ok(0.0);
        };
        let mut busy = 0.0;
        for &(s, e) in &a.spans {
            let lo = s.max(from).secs();
            let hi = e.min(to).secs();
            if hi > lo {
                busy += hi - lo;
            }
        }
        // an open interval still busy at `to`
        if a.count > 0 {
            let lo = a.busy_since.max(from).secs();
            let hi = to.secs();
            if hi > lo {
                busy += hi - lo;
            }
        }
        Ok(busy / (to.secs() - from.secs()))
    }

    pub fn pool_labels(&self) -> Vec<String> {
        self.pools.keys().cloned().collect()
    }

    // -- engine ------------------------------------------------------------

    #[allow(clippy::too_many_arguments)]
    pub fn engine_step(
        &mut self,
        worker: &str,
        pool: &str,
        started: SimTime,
        ended: SimTime,
        kind: StepKind,
        batch_size: u64,
        tokens: u64,
        kv_used: f64,
    ) {
        self.activity_begin(pool, started);
        self.activity_end(pool, ended);
        self.engine_steps.push(EngineStepRecord {
            started,
            ended,
            worker: worker.to_string(),
            pool: pool.to_string(),
            step_kind: kind,
            batch_size,
            tokens,
            kv_used,
        });
    }

    /// Earliest engine step completion at or after `t`.
    pub fn first_engine_completion_after(&self, t: SimTime) -> Option<SimTime> {
        self.engine_steps
            .iter()
            .rev()
            .take_while(|r| r.ended >= t)
            .map(|r| r.ended)
            .min()
    }

    // -- rollout -----------------------------------------------------------

    /// Phase attribution for a trajectory that finished generation.
    pub fn trajectory_phase(&mut self, traj: &Trajectory) {
        self.rollout_gen_time += traj.gen_time.secs();
        self.rollout_env_time += traj.env_time.secs();
        self.rollout_reset_time += traj.reset_time.secs();
    }

    /// Record a terminal trajectory (completed or aborted); replaces any
    /// earlier record for the same id.
    pub fn trajectory_terminal(&mut self, traj: &Trajectory) {
        self.trajectories.insert(traj.trajectory_id, traj.clone());
    }

    pub fn trajectory_consumed(&mut self, id: TrajectoryId, group: GroupId) {
        if let Some(t) = self.trajectories.get_mut(&id) {
            t.group_id = Some(group);
        }
    }

    pub fn trajectories(&self) -> impl Iterator<Item = &Trajectory> {
        self.trajectories.values()
    }

    pub fn batch_record(&mut self, rec: BatchRecord) {
        self.batches.push(rec);
    }

    pub fn stale_abort(&mut self, traj: &Trajectory) {
        self.stale_aborts += 1;
        self.wasted_prompt_tokens += traj.prompt_tokens;
        self.wasted_response_tokens += traj.response_tokens;
        self.trajectory_terminal(traj);
    }

    // -- buffer / trainer ---------------------------------------------------

    pub fn buffer_occupancy(&mut self, now: SimTime, len: u64) {
        self.occupancy.push((now, len));
    }

    pub fn consumption(&mut self, rec: ConsumptionRecord) {
        self.trajectory_consumed(rec.trajectory_id, rec.group_id);
        self.consumptions.push(rec);
    }

    #[allow(clippy::too_many_arguments)]
    pub fn step_report(
        &mut self,
        step: u64,
        started: SimTime,
        ended: SimTime,
        step_time: SimTime,
        prompt_tokens: u64,
        response_tokens: u64,
        phases: StepPhases,
        version: PolicyVersion,
    ) {
        let throughput = throughput(prompt_tokens, response_tokens, step_time).unwrap_or(0.0);
        self.steps.push(StepReport {
            step,
            started,
            ended,
            step_time,
            prompt_tokens,
            response_tokens,
            throughput,
            phases,
            version,
            stale_aborts: self.stale_aborts,
            surplus_aborts: self.surplus_aborts,
            wasted_tokens: self.wasted_prompt_tokens + self.wasted_response_tokens,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(secs: f64) -> SimTime {
        SimTime::from_secs(secs).unwrap()
    }

    #[test]
    fn throughput_is_exact_ratio() {
        assert_eq!(throughput(1000, 3000, t(10.0)).unwrap(), 400.0);
        // doubling both token counts at fixed time doubles throughput
        assert_eq!(throughput(2000, 6000, t(10.0)).unwrap(), 800.0);
        assert!(throughput(1, 1, SimTime::ZERO).is_err());
    }

    #[test]
    fn utilization_unions_overlapping_activities() {
        let mut hub = MetricsHub::new();
        hub.activity_begin("P", t(1.0));
        hub.activity_begin("P", t(2.0));
        hub.activity_end("P", t(3.0));
        hub.activity_end("P", t(4.0));
        // busy [1, 4] within window [0, 10]
        let u = hub.utilization("P", t(0.0), t(10.0)).unwrap();
        assert!((u - 0.3).abs() < 1e-12);
        // idle pool reads zero; always-busy reads one
        assert_eq!(hub.utilization("Q", t(0.0), t(10.0)).unwrap(), 0.0);
        let full = hub.utilization("P", t(1.0), t(4.0)).unwrap();
        assert!((full - 1.0).abs() < 1e-12);
        assert!(hub.utilization("P", t(5.0), t(5.0)).is_err());
    }
}
