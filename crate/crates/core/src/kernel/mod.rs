//! Deterministic discrete-event kernel.
//!
//! All simulation dynamics run on this substrate: a virtual clock, an event
//! queue with strict `(time, seq)` ordering, label-derived random streams and
//! actor mailboxes. One event executes at a time; actors interact only by
//! scheduling messages at each other (zero-delay messages are ordinary events
//! that preserve insertion order).
//!
//! Determinism contract: for a fixed `(scenario, root_seed)` the sequence of
//! dispatched events, every random draw and every exported artifact are
//! identical across runs.

pub mod rng;
pub mod time;
pub mod trace;

use std::cell::RefCell;
use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeSet, BinaryHeap};
use std::rc::Rc;

use rand_chacha::ChaCha12Rng;

use crate::error::SimError;
use crate::msg::Msg;
pub use rng::StreamRegistry;
pub use time::SimTime;
pub use trace::TraceRecord;

pub type ActorId = usize;

/// Cancellable handle for a scheduled event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct EventId(u64);

/// A mailbox-driven simulation component.
pub trait Actor {
    fn handle(&mut self, msg: Msg, ctx: &mut Ctx) -> Result<(), SimError>;
}

struct Scheduled {
    time: SimTime,
    seq: u64,
    target: ActorId,
    msg: Msg,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> Ordering {
        // Dequeue order is strict lexicographic (time, seq); seq is unique.
        self.time
            .cmp(&other.time)
            .then_with(|| self.seq.cmp(&other.seq))
    }
}

/// Mutable kernel state visible to actors through [`Ctx`].
pub struct KernelCore {
    now: SimTime,
    next_seq: u64,
    queue: BinaryHeap<Reverse<Scheduled>>,
    cancelled: BTreeSet<u64>,
    streams: StreamRegistry,
    actor_names: Vec<String>,
    trace_on: bool,
    trace: Vec<TraceRecord>,
    processed: u64,
}

impl KernelCore {
    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn schedule(
        &mut self,
        delay: SimTime,
        target: ActorId,
        msg: Msg,
    ) -> Result<EventId, SimError> {
        if target >= self.actor_names.len() {
            return Err(SimError::UnknownActor(target));
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Reverse(Scheduled {
            time: self.now + delay,
            seq,
            target,
            msg,
        }));
        Ok(EventId(seq))
    }

    pub fn cancel(&mut self, id: EventId) {
        self.cancelled.insert(id.0);
    }

    pub fn rng(&mut self, label: &str) -> &mut ChaCha12Rng {
        self.streams.stream(label)
    }

    pub fn root_seed(&self) -> u64 {
        self.streams.root_seed()
    }

    fn push_trace(&mut self, actor: ActorId, kind: &str, summary: String) {
        if self.trace_on {
            let seq = self.next_seq;
            self.next_seq += 1;
            self.trace.push(TraceRecord {
                time: self.now,
                seq,
                actor: self.actor_names[actor].clone(),
                event_kind: kind.to_string(),
                payload_summary: summary,
            });
        }
    }
}

/// Per-dispatch execution context handed to actors.
pub struct Ctx<'a> {
    core: &'a mut KernelCore,
    self_id: ActorId,
}

impl<'a> Ctx<'a> {
    pub fn now(&self) -> SimTime {
        self.core.now
    }

    pub fn self_id(&self) -> ActorId {
        self.self_id
    }

    pub fn schedule(
        &mut self,
        delay: SimTime,
        target: ActorId,
        msg: Msg,
    ) -> Result<EventId, SimError> {
        self.core.schedule(delay, target, msg)
    }

    /// Schedule a message to this actor itself; cannot fail.
    pub fn schedule_self(&mut self, delay: SimTime, msg: Msg) -> EventId {
        let id = self.self_id;
        self.core.schedule(delay, id, msg).expect("self is registered")
    }

    /// Zero-delay send; delivery order among same-time events follows seq.
    pub fn send(&mut self, target: ActorId, msg: Msg) -> Result<EventId, SimError> {
        self.core.schedule(SimTime::ZERO, target, msg)
    }

    pub fn cancel(&mut self, id: EventId) {
        self.core.cancel(id)
    }

    pub fn rng(&mut self, label: &str) -> &mut ChaCha12Rng {
        self.core.rng(label)
    }

    /// Add an annotation record to the event trace (e.g. routing decisions).
    pub fn note(&mut self, kind: &str, summary: String) {
        self.core.push_trace(self.self_id, kind, summary);
    }
}

/// Stop condition for [`Kernel::run_until`].
#[derive(Debug, Clone, Copy)]
pub enum Until {
    Time(SimTime),
    Quiescent,
}

/// A run abort: the failing actor's error plus the tail of the event trace.
#[derive(Debug)]
pub struct RunAborted {
    pub error: SimError,
    pub at: SimTime,
    pub actor: String,
    pub trace_tail: Vec<TraceRecord>,
}

impl std::fmt::Display for RunAborted {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "run aborted at t={} in actor '{}': {}",
            self.at, self.actor, self.error
        )?;
        writeln!(f, "last {} trace records:", self.trace_tail.len())?;
        for r in &self.trace_tail {
            writeln!(f, "  [{} #{}] {} {} {}", r.time, r.seq, r.actor, r.event_kind, r.payload_summary)?;
        }
        Ok(())
    }
}

impl std::error::Error for RunAborted {}

pub struct Kernel {
    core: KernelCore,
    actors: Vec<Rc<RefCell<dyn Actor>>>,
    event_limit: u64,
}

impl Kernel {
    pub fn new(root_seed: u64) -> Kernel {
        Kernel {
            core: KernelCore {
                now: SimTime::ZERO,
                next_seq: 0,
                queue: BinaryHeap::new(),
                cancelled: BTreeSet::new(),
                streams: StreamRegistry::new(root_seed),
                actor_names: Vec::new(),
                trace_on: false,
                trace: Vec::new(),
                processed: 0,
            },
            actors: Vec::new(),
            event_limit: 500_000_000,
        }
    }

    pub fn set_trace(&mut self, on: bool) {
        self.core.trace_on = on;
    }

    pub fn set_event_limit(&mut self, limit: u64) {
        self.event_limit = limit;
    }

    pub fn register(&mut self, name: impl Into<String>, actor: Rc<RefCell<dyn Actor>>) -> ActorId {
        let id = self.actors.len();
        self.actors.push(actor);
        self.core.actor_names.push(name.into());
        id
    }

    pub fn core_mut(&mut self) -> &mut KernelCore {
        &mut self.core
    }

    pub fn now(&self) -> SimTime {
        self.core.now
    }

    pub fn processed_events(&self) -> u64 {
        self.core.processed
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.core.trace
    }

    pub fn take_trace(&mut self) -> Vec<TraceRecord> {
        std::mem::take(&mut self.core.trace)
    }

    /// Process events in `(time, seq)` order until the stop condition.
    /// Returns the clock at stop.
    pub fn run_until(&mut self, until: Until) -> Result<SimTime, RunAborted> {
        self.run_inner(until, None)
    }

    /// Wall-clock paced run: sleeps `scale` real seconds per virtual second
    /// between events. Actor code is unchanged; only the dispatch loop waits.
    #[cfg(not(target_arch = "wasm32"))]
    pub fn run_paced(&mut self, until: Until, scale: f64) -> Result<SimTime, RunAborted> {
        self.run_inner(until, Some(scale))
    }

    fn run_inner(&mut self, until: Until, pace: Option<f64>) -> Result<SimTime, RunAborted> {
        loop {
            let fire_at = match self.core.queue.peek() {
                None => return Ok(self.core.now),
                Some(Reverse(ev)) => ev.time,
            };
            if let Until::Time(limit) = until {
                if fire_at > limit {
                    return Ok(self.core.now);
                }
            }
            let Reverse(ev) = self.core.queue.pop().expect("peeked");
            if self.core.cancelled.remove(&ev.seq) {
                continue;
            }
            debug_assert!(ev.time >= self.core.now, "clock must be monotonic");
            #[cfg(not(target_arch = "wasm32"))]
            if let Some(scale) = pace {
                let dt = ev.time.saturating_sub(self.core.now).secs() * scale;
                if dt > 0.0 {
                    std::thread::sleep(std::time::Duration::from_secs_f64(dt));
                }
            }
            #[cfg(target_arch = "wasm32")]
            let _ = pace;
            self.core.now = ev.time;
            self.core.processed += 1;
            if self.core.trace_on {
                self.core.trace.push(TraceRecord {
                    time: ev.time,
                    seq: ev.seq,
                    actor: self.core.actor_names[ev.target].clone(),
                    event_kind: ev.msg.kind().to_string(),
                    payload_summary: ev.msg.summary(),
                });
            }
            if self.core.processed > self.event_limit {
                return Err(self.abort(
                    ev.target,
                    SimError::Deadlock(format!(
                        "event limit {} exceeded; possible livelock",
                        self.event_limit
                    )),
                ));
            }
            let actor = self.actors[ev.target].clone();
            let target = ev.target;
            let mut ctx = Ctx {
                core: &mut self.core,
                self_id: target,
            };
            if let Err(error) = actor.borrow_mut().handle(ev.msg, &mut ctx) {
                return Err(self.abort(target, error));
            }
        }
    }

    fn abort(&self, actor: ActorId, error: SimError) -> RunAborted {
        let tail_len = self.core.trace.len().min(32);
        RunAborted {
            error,
            at: self.core.now,
            actor: self.core.actor_names[actor].clone(),
            trace_tail: self.core.trace[self.core.trace.len() - tail_len..].to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Records every delivered payload with its timestamp.
    struct Recorder {
        seen: Vec<(SimTime, u64)>,
    }

    impl Actor for Recorder {
        fn handle(&mut self, msg: Msg, ctx: &mut Ctx) -> Result<(), SimError> {
            if let Msg::Tick(n) = msg {
                self.seen.push((ctx.now(), n));
            }
            Ok(())
        }
    }

    fn recorder(kernel: &mut Kernel, name: &str) -> (ActorId, Rc<RefCell<Recorder>>) {
        let actor = Rc::new(RefCell::new(Recorder { seen: Vec::new() }));
        let id = kernel.register(name, actor.clone());
        (id, actor)
    }

    fn t(secs: f64) -> SimTime {
        SimTime::from_secs(secs).unwrap()
    }

    #[test]
    fn same_time_events_fire_in_insertion_order() {
        let mut k = Kernel::new(0);
        let (a, ra) = recorder(&mut k, "a");
        let (b, rb) = recorder(&mut k, "b");
        k.core_mut().schedule(SimTime::ZERO, a, Msg::Tick(1)).unwrap();
        k.core_mut().schedule(SimTime::ZERO, b, Msg::Tick(2)).unwrap();
        k.run_until(Until::Quiescent).unwrap();
        // a was scheduled first, so a's event carries the lower seq.
        assert_eq!(ra.borrow().seen, vec![(SimTime::ZERO, 1)]);
        assert_eq!(rb.borrow().seen, vec![(SimTime::ZERO, 2)]);
    }

    #[test]
    fn delay_is_relative_to_current_clock() {
        let mut k = Kernel::new(0);
        let (a, ra) = recorder(&mut k, "a");
        k.core_mut().schedule(t(2.0), a, Msg::Tick(0)).unwrap();
        k.run_until(Until::Quiescent).unwrap();
        // now = 2.0; delay 5.0 fires at 7.0
        k.core_mut().schedule(t(5.0), a, Msg::Tick(1)).unwrap();
        k.run_until(Until::Quiescent).unwrap();
        assert_eq!(ra.borrow().seen, vec![(t(2.0), 0), (t(7.0), 1)]);
    }

    #[test]
    fn cancelled_event_is_never_delivered() {
        let mut k = Kernel::new(0);
        let (a, ra) = recorder(&mut k, "a");
        let id = k.core_mut().schedule(t(1.0), a, Msg::Tick(9)).unwrap();
        k.core_mut().cancel(id);
        let end = k.run_until(Until::Quiescent).unwrap();
        assert!(ra.borrow().seen.is_empty());
        // The cancelled event still does not advance the clock.
        assert_eq!(end, SimTime::ZERO);
    }

    #[test]
    fn schedule_to_unknown_target_is_rejected() {
        let mut k = Kernel::new(0);
        let err = k.core_mut().schedule(SimTime::ZERO, 3, Msg::Tick(0));
        assert_eq!(err.unwrap_err(), SimError::UnknownActor(3));
    }

    #[test]
    fn empty_queue_returns_current_time() {
        let mut k = Kernel::new(0);
        assert_eq!(k.run_until(Until::Time(t(10.0))).unwrap(), SimTime::ZERO);
    }

    #[test]
    fn run_until_limit_processes_inclusive_prefix() {
        let mut k = Kernel::new(0);
        let (a, ra) = recorder(&mut k, "a");
        for (i, secs) in [1.0, 2.0, 3.0].into_iter().enumerate() {
            k.core_mut().schedule(t(secs), a, Msg::Tick(i as u64)).unwrap();
        }
        let stop = k.run_until(Until::Time(t(2.0))).unwrap();
        assert_eq!(ra.borrow().seen.len(), 2);
        assert_eq!(stop, t(2.0));
        k.run_until(Until::Quiescent).unwrap();
        assert_eq!(ra.borrow().seen.len(), 3);
    }

    #[test]
    fn identical_seeds_give_identical_traces() {
        let run = || {
            let mut k = Kernel::new(11);
            k.set_trace(true);
            let (a, _ra) = recorder(&mut k, "a");
            let (b, _rb) = recorder(&mut k, "b");
            for i in 0..50u64 {
                use rand::Rng;
                let dt = k.core_mut().rng("jitter").gen_range(0.0..5.0);
                let target = if i % 3 == 0 { a } else { b };
                k.core_mut().schedule(t(dt), target, Msg::Tick(i)).unwrap();
            }
            k.run_until(Until::Quiescent).unwrap();
            trace::to_jsonl(k.trace())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn actor_error_aborts_with_trace_tail() {
        struct Failing;
        impl Actor for Failing {
            fn handle(&mut self, _msg: Msg, _ctx: &mut Ctx) -> Result<(), SimError> {
                Err(SimError::contract("boom"))
            }
        }
        let mut k = Kernel::new(0);
        k.set_trace(true);
        let f = Rc::new(RefCell::new(Failing));
        let id = k.register("failing", f);
        k.core_mut().schedule(t(1.0), id, Msg::Tick(0)).unwrap();
        let err = k.run_until(Until::Quiescent).unwrap_err();
        assert_eq!(err.actor, "failing");
        assert_eq!(err.trace_tail.len(), 1);
        assert!(matches!(err.error, SimError::Contract(_)));
    }

    #[test]
    fn paced_run_delivers_same_results() {
        let mut k = Kernel::new(0);
        let (a, ra) = recorder(&mut k, "a");
        k.core_mut().schedule(t(100.0), a, Msg::Tick(5)).unwrap();
        // 1e-9 real seconds per virtual second: effectively instant.
        k.run_paced(Until::Quiescent, 1e-9).unwrap();
        assert_eq!(ra.borrow().seen, vec![(t(100.0), 5)]);
    }
}
