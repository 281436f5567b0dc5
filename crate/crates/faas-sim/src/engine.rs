//! Discrete-event kernel: virtual clock, time-ordered event queue, and
//! dispatch of events to registered per-kind handlers.
//!
//! Events are totally ordered by `(time, seq)`, where `seq` is assigned at
//! enqueue time. Simultaneous events therefore dispatch in FIFO order, which
//! keeps every run reproducible. Cancellation is lazy: a cancelled event
//! stays in the heap and is skipped when it surfaces.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};

use thiserror::Error;

/// Handle returned by [`EngineCore::schedule`], usable for cancellation.
pub type EventId = u64;

/// Identifies which handler an event is dispatched to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventKind {
    RequestArrival,
    ContainerReady,
    RequestCompletion,
    IdleTimeout,
    ScalingTick,
    RetryScheduling,
    SimulationEnd,
}

pub const EVENT_KIND_COUNT: usize = 7;

impl EventKind {
    pub(crate) fn index(self) -> usize {
        match self {
            EventKind::RequestArrival => 0,
            EventKind::ContainerReady => 1,
            EventKind::RequestCompletion => 2,
            EventKind::IdleTimeout => 3,
            EventKind::ScalingTick => 4,
            EventKind::RetryScheduling => 5,
            EventKind::SimulationEnd => 6,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EventKind::RequestArrival => "request_arrival",
            EventKind::ContainerReady => "container_ready",
            EventKind::RequestCompletion => "request_completion",
            EventKind::IdleTimeout => "idle_timeout",
            EventKind::ScalingTick => "scaling_tick",
            EventKind::RetryScheduling => "retry_scheduling",
            EventKind::SimulationEnd => "simulation_end",
        }
    }
}

/// Identifier references carried by an event; unused slots stay `None`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EventPayload {
    pub request: Option<u64>,
    pub container: Option<u64>,
    pub vm: Option<u32>,
}

impl EventPayload {
    pub fn request(id: u64) -> Self {
        EventPayload {
            request: Some(id),
            ..Default::default()
        }
    }

    pub fn container(id: u64) -> Self {
        EventPayload {
            container: Some(id),
            ..Default::default()
        }
    }

    pub fn request_on_container(request: u64, container: u64) -> Self {
        EventPayload {
            request: Some(request),
            container: Some(container),
            vm: None,
        }
    }
}

/// One simulation event. `seq` is assigned by the engine at enqueue.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimEvent {
    pub time: f64,
    pub seq: EventId,
    pub kind: EventKind,
    pub payload: EventPayload,
}

/// Virtual clock in seconds. Advances only when the queue head is dispatched.
#[derive(Debug, Clone, Copy, Default)]
pub struct Clock {
    now: f64,
}

impl Clock {
    pub fn now(&self) -> f64 {
        self.now
    }

    fn advance_to(&mut self, t: f64) {
        debug_assert!(t >= self.now, "clock must be non-decreasing");
        self.now = t;
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum EngineError {
    #[error("cannot schedule event at t={event_time} in the past (clock at t={now})")]
    PastEvent { event_time: f64, now: f64 },
    #[error("no handler registered for event kind `{0}`")]
    NoHandler(&'static str),
}

#[derive(Debug)]
struct QueuedEvent(SimEvent);

impl PartialEq for QueuedEvent {
    fn eq(&self, other: &Self) -> bool {
        self.0.seq == other.0.seq
    }
}

impl Eq for QueuedEvent {}

impl Ord for QueuedEvent {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed: BinaryHeap is a max-heap, we need the earliest (time, seq) first.
        other
            .0
            .time
            .total_cmp(&self.0.time)
            .then_with(|| other.0.seq.cmp(&self.0.seq))
    }
}

impl PartialOrd for QueuedEvent {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Clock, queue, and dispatch log. Split from [`Engine`] so handlers can
/// schedule and cancel events while a dispatch is in progress.
#[derive(Debug, Default)]
pub struct EngineCore {
    clock: Clock,
    queue: BinaryHeap<QueuedEvent>,
    pending: HashSet<EventId>,
    next_seq: EventId,
    log: Option<Vec<SimEvent>>,
}

impl EngineCore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Record every dispatched event for later inspection or diffing.
    pub fn enable_logging(&mut self) {
        self.log = Some(Vec::new());
    }

    pub fn now(&self) -> f64 {
        self.clock.now()
    }

    pub fn pending_count(&self) -> usize {
        self.pending.len()
    }

    /// Enqueue an event; assigns the next sequence number and returns it.
    pub fn schedule(
        &mut self,
        time: f64,
        kind: EventKind,
        payload: EventPayload,
    ) -> Result<EventId, EngineError> {
        if time < self.clock.now() {
            return Err(EngineError::PastEvent {
                event_time: time,
                now: self.clock.now(),
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.pending.insert(seq);
        self.queue.push(QueuedEvent(SimEvent {
            time,
            seq,
            kind,
            payload,
        }));
        Ok(seq)
    }

    /// Remove a pending event. Returns true if it had not yet dispatched or
    /// been cancelled; idempotent otherwise.
    pub fn cancel(&mut self, id: EventId) -> bool {
        self.pending.remove(&id)
    }

    /// Pop the next live event with `time <= bound`, skipping cancelled ones.
    fn pop_due(&mut self, bound: f64) -> Option<SimEvent> {
        while let Some(head) = self.queue.peek() {
            if head.0.time > bound {
                return None;
            }
            let ev = self.queue.pop().expect("peeked").0;
            if self.pending.remove(&ev.seq) {
                return Some(ev);
            }
            // cancelled: drop the tombstone and keep scanning
        }
        None
    }

    /// Pop, clock-advance, and record the next live event with `time <= bound`.
    /// `run_until` is built on this; tests use it to drive handlers manually.
    pub(crate) fn step_due(&mut self, bound: f64) -> Option<SimEvent> {
        let ev = self.pop_due(bound)?;
        self.clock.advance_to(ev.time);
        self.record(&ev);
        Some(ev)
    }

    fn record(&mut self, ev: &SimEvent) {
        if let Some(log) = self.log.as_mut() {
            log.push(*ev);
        }
    }

    pub fn dispatch_log(&self) -> Option<&[SimEvent]> {
        self.log.as_deref()
    }
}

type Handler<W> = Box<dyn FnMut(&mut W, &mut EngineCore, &SimEvent)>;

/// Event engine parameterized over the world state `W` that handlers mutate.
pub struct Engine<W> {
    core: EngineCore,
    handlers: [Option<Handler<W>>; EVENT_KIND_COUNT],
}

impl<W> Default for Engine<W> {
    fn default() -> Self {
        Self::new()
    }
}

impl<W> Engine<W> {
    pub fn new() -> Self {
        Engine {
            core: EngineCore::new(),
            handlers: Default::default(),
        }
    }

    pub fn core(&self) -> &EngineCore {
        &self.core
    }

    pub fn core_mut(&mut self) -> &mut EngineCore {
        &mut self.core
    }

    pub fn now(&self) -> f64 {
        self.core.now()
    }

    pub fn register(
        &mut self,
        kind: EventKind,
        handler: impl FnMut(&mut W, &mut EngineCore, &SimEvent) + 'static,
    ) {
        self.handlers[kind.index()] = Some(Box::new(handler));
    }

    pub fn schedule(
        &mut self,
        time: f64,
        kind: EventKind,
        payload: EventPayload,
    ) -> Result<EventId, EngineError> {
        self.core.schedule(time, kind, payload)
    }

    pub fn cancel(&mut self, id: EventId) -> bool {
        self.core.cancel(id)
    }

    /// Dispatch all events with `time <= end` in `(time, seq)` order, then
    /// advance the clock to `end`. Returns the number of events dispatched.
    pub fn run_until(&mut self, world: &mut W, end: f64) -> Result<u64, EngineError> {
        let count = self.run_bounded(world, end)?;
        if end > self.core.clock.now() {
            self.core.clock.advance_to(end);
        }
        Ok(count)
    }

    /// Dispatch every remaining event; the clock stops at the last one.
    pub fn run_to_completion(&mut self, world: &mut W) -> Result<u64, EngineError> {
        self.run_bounded(world, f64::INFINITY)
    }

    /// Dispatch at most one event with `time <= bound`; returns it, or `None`
    /// when nothing is due.
    pub fn step(&mut self, world: &mut W, bound: f64) -> Result<Option<SimEvent>, EngineError> {
        let Some(ev) = self.core.step_due(bound) else {
            return Ok(None);
        };
        let idx = ev.kind.index();
        let mut handler = self.handlers[idx]
            .take()
            .ok_or(EngineError::NoHandler(ev.kind.name()))?;
        handler(world, &mut self.core, &ev);
        self.handlers[idx] = Some(handler);
        Ok(Some(ev))
    }

    fn run_bounded(&mut self, world: &mut W, bound: f64) -> Result<u64, EngineError> {
        let mut count = 0;
        while self.step(world, bound)?.is_some() {
            count += 1;
        }
        Ok(count)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recording_engine() -> Engine<Vec<(f64, EventKind, EventPayload)>> {
        let mut engine = Engine::new();
        for kind in [
            EventKind::RequestArrival,
            EventKind::ContainerReady,
            EventKind::RequestCompletion,
            EventKind::IdleTimeout,
            EventKind::ScalingTick,
            EventKind::RetryScheduling,
            EventKind::SimulationEnd,
        ] {
            engine.register(kind, |world: &mut Vec<_>, _core, ev: &SimEvent| {
                world.push((ev.time, ev.kind, ev.payload));
            });
        }
        engine
    }

    #[test]
    fn first_event_gets_seq_zero() {
        let mut engine = recording_engine();
        let id = engine
            .schedule(0.0, EventKind::RequestArrival, EventPayload::request(1))
            .unwrap();
        assert_eq!(id, 0);
    }

    #[test]
    fn simultaneous_events_dispatch_fifo() {
        let mut engine = recording_engine();
        engine
            .schedule(5.0, EventKind::RequestArrival, EventPayload::request(1))
            .unwrap();
        engine
            .schedule(5.0, EventKind::RequestArrival, EventPayload::request(2))
            .unwrap();
        let mut log = Vec::new();
        engine.run_until(&mut log, 10.0).unwrap();
        assert_eq!(log[0].2.request, Some(1));
        assert_eq!(log[1].2.request, Some(2));
    }

    #[test]
    fn scheduling_in_the_past_is_rejected() {
        let mut engine = recording_engine();
        engine
            .schedule(4.0, EventKind::RequestArrival, EventPayload::default())
            .unwrap();
        let mut log = Vec::new();
        engine.run_until(&mut log, 4.0).unwrap();
        let err = engine
            .schedule(3.0, EventKind::RequestArrival, EventPayload::default())
            .unwrap_err();
        assert_eq!(
            err,
            EngineError::PastEvent {
                event_time: 3.0,
                now: 4.0
            }
        );
    }

    #[test]
    fn cancel_is_idempotent_and_prevents_dispatch() {
        let mut engine = recording_engine();
        let id = engine
            .schedule(10.0, EventKind::IdleTimeout, EventPayload::container(7))
            .unwrap();
        assert!(engine.cancel(id));
        assert!(!engine.cancel(id), "second cancel must report false");
        let mut log = Vec::new();
        let n = engine.run_until(&mut log, 20.0).unwrap();
        assert_eq!(n, 0);
        assert!(log.is_empty(), "cancelled event must never fire");
    }

    #[test]
    fn cancel_after_dispatch_returns_false() {
        let mut engine = recording_engine();
        let id = engine
            .schedule(1.0, EventKind::RequestArrival, EventPayload::default())
            .unwrap();
        let mut log = Vec::new();
        engine.run_until(&mut log, 2.0).unwrap();
        assert!(!engine.cancel(id));
    }

    #[test]
    fn run_until_respects_bound_and_advances_clock() {
        let mut engine = recording_engine();
        for t in [1.0, 2.0, 3.0] {
            engine
                .schedule(t, EventKind::RequestArrival, EventPayload::default())
                .unwrap();
        }
        let mut log = Vec::new();
        let n = engine.run_until(&mut log, 2.0).unwrap();
        assert_eq!(n, 2);
        assert_eq!(engine.now(), 2.0);
    }

    #[test]
    fn empty_queue_run_until_advances_clock_to_end() {
        let mut engine = recording_engine();
        let mut log = Vec::new();
        let n = engine.run_until(&mut log, 100.0).unwrap();
        assert_eq!(n, 0);
        assert_eq!(engine.now(), 100.0);
    }

    #[test]
    fn missing_handler_is_an_error() {
        let mut engine: Engine<Vec<(f64, EventKind, EventPayload)>> = Engine::new();
        engine
            .schedule(1.0, EventKind::ScalingTick, EventPayload::default())
            .unwrap();
        let mut log = Vec::new();
        let err = engine.run_until(&mut log, 10.0).unwrap_err();
        assert_eq!(err, EngineError::NoHandler("scaling_tick"));
    }

    #[test]
    fn dispatch_timestamps_are_non_decreasing() {
        let mut engine = recording_engine();
        // deliberately scheduled out of order
        for t in [9.0, 1.0, 5.0, 1.0, 7.0, 3.0] {
            engine
                .schedule(t, EventKind::RequestArrival, EventPayload::default())
                .unwrap();
        }
        let mut log = Vec::new();
        engine.run_until(&mut log, 100.0).unwrap();
        for pair in log.windows(2) {
            assert!(pair[0].0 <= pair[1].0);
        }
    }

    #[test]
    fn identical_schedules_replay_identically() {
        let run = || {
            let mut engine = recording_engine();
            engine.core_mut().enable_logging();
            for (i, t) in [3.0, 1.0, 2.0, 1.0].iter().enumerate() {
                engine
                    .schedule(
                        *t,
                        EventKind::RequestArrival,
                        EventPayload::request(i as u64),
                    )
                    .unwrap();
            }
            let mut log = Vec::new();
            engine.run_until(&mut log, 10.0).unwrap();
            engine.core().dispatch_log().unwrap().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "same schedule must produce an identical event log");
    }
}
