//! Deterministic discrete-event simulator: one event loop over virtual true
//! time, per-node clocks, and a lossy, reordering network.

pub mod clock;
pub mod net;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha1::{Digest, Sha1};

pub use clock::{ClockModel, NodeClock};
pub use net::{Jitter, LinkDelay, NetModel, OwdEstimator, Partition};

use crate::types::{Micros, ReplicaId, ShardId};

#[derive(
    Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum NodeId {
    Coordinator(u32),
    Server { shard: ShardId, replica: ReplicaId },
    ViewManager(u32),
}

impl NodeId {
    pub fn server(shard: ShardId, replica: ReplicaId) -> Self {
        NodeId::Server { shard, replica }
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeId::Coordinator(i) => write!(f, "C{i}"),
            NodeId::Server { shard, replica } => write!(f, "S<{shard},{replica}>"),
            NodeId::ViewManager(i) => write!(f, "VM{i}"),
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SimError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("event queue exhausted at {now}us before the stop condition held")]
    Exhausted { now: Micros },
}

/// Short stable name of a message or timer, used in traces.
pub trait Tag {
    fn tag(&self) -> &'static str;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Fault {
    Crash,
    Restart,
}

#[derive(Clone, Debug)]
pub enum Payload<M, T> {
    Message { from: NodeId, msg: M },
    Timer(T),
    Fault(Fault),
}

#[derive(Clone, Debug)]
pub struct Event<M, T> {
    pub due: Micros,
    pub seq: u64,
    pub target: NodeId,
    pub payload: Payload<M, T>,
}

struct Queued<M, T> {
    due: Micros,
    seq: u64,
    incarnation: u64,
    target: NodeId,
    payload: Payload<M, T>,
}

impl<M, T> PartialEq for Queued<M, T> {
    fn eq(&self, other: &Self) -> bool {
        (self.due, self.seq) == (other.due, other.seq)
    }
}

impl<M, T> Eq for Queued<M, T> {}

impl<M, T> PartialOrd for Queued<M, T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<M, T> Ord for Queued<M, T> {
    // Reversed: the heap pops the earliest (due, seq) first.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.due, other.seq).cmp(&(self.due, self.seq))
    }
}

/// One processed event as recorded in the trace.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub due: Micros,
    pub seq: u64,
    pub target: NodeId,
    pub tag: String,
}

/// Effects a node handler wants applied: sends and local-clock timers.
pub struct Outbox<M, T> {
    now_local: Micros,
    true_now: Micros,
    sends: Vec<(NodeId, M)>,
    timers: Vec<(Micros, T)>,
}

impl<M, T> Outbox<M, T> {
    pub fn new(now_local: Micros, true_now: Micros) -> Self {
        Self {
            now_local,
            true_now,
            sends: Vec::new(),
            timers: Vec::new(),
        }
    }

    /// Local clock reading at the node handling the event.
    pub fn now(&self) -> Micros {
        self.now_local
    }

    /// True time of the event. Instrumentation only; protocol logic must
    /// use [`Outbox::now`].
    pub fn true_now(&self) -> Micros {
        self.true_now
    }

    pub fn send(&mut self, to: NodeId, msg: M) {
        self.sends.push((to, msg));
    }

    /// Fires once the node's local clock reads at least `at`.
    pub fn timer_at(&mut self, at: Micros, timer: T) {
        self.timers.push((at, timer));
    }

    pub fn timer_after(&mut self, delay: Micros, timer: T) {
        self.timers.push((self.now_local + delay, timer));
    }

    pub fn sends(&self) -> &[(NodeId, M)] {
        &self.sends
    }

    pub fn timers(&self) -> &[(Micros, T)] {
        &self.timers
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetCounters {
    pub sent: u64,
    pub lost: u64,
    pub discarded_at_crashed: u64,
}

pub struct Sim<M, T> {
    now: Micros,
    seq: u64,
    queue: BinaryHeap<Queued<M, T>>,
    pub net: NetModel,
    pub clocks: ClockModel,
    rng: ChaCha8Rng,
    crashed: BTreeSet<NodeId>,
    incarnation: BTreeMap<NodeId, u64>,
    digest: Sha1,
    trace: Option<Vec<TraceEntry>>,
    pub counters: NetCounters,
}

impl<M: Tag, T: Tag> Sim<M, T> {
    pub fn new(seed: u64, net: NetModel, clocks: ClockModel) -> Self {
        Self {
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            net,
            clocks,
            rng: ChaCha8Rng::seed_from_u64(seed),
            crashed: BTreeSet::new(),
            incarnation: BTreeMap::new(),
            digest: Sha1::new(),
            trace: None,
            counters: NetCounters::default(),
        }
    }

    /// Keeps the full list of processed events (the digest is always kept).
    pub fn record_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn trace(&self) -> Option<&[TraceEntry]> {
        self.trace.as_deref()
    }

    pub fn trace_digest(&self) -> String {
        self.digest
            .clone()
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn now(&self) -> Micros {
        self.now
    }

    pub fn local_clock(&self, node: NodeId) -> Micros {
        self.clocks.local_clock(node, self.now)
    }

    pub fn is_crashed(&self, node: NodeId) -> bool {
        self.crashed.contains(&node)
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    fn push(&mut self, due: Micros, target: NodeId, payload: Payload<M, T>) -> u64 {
        let seq = self.seq;
        self.seq += 1;
        let incarnation = self.incarnation.get(&target).copied().unwrap_or(0);
        self.queue.push(Queued {
            due,
            seq,
            incarnation,
            target,
            payload,
        });
        seq
    }

    /// Schedules delivery of `msg`; returns the due time, or `None` when the
    /// network loses it or the sender is crashed.
    pub fn send(&mut self, from: NodeId, to: NodeId, msg: M) -> Result<Option<Micros>, SimError> {
        if !self.net.knows(to) {
            return Err(SimError::UnknownNode(to));
        }
        if self.is_crashed(from) {
            return Ok(None);
        }
        self.counters.sent += 1;
        let Some(delay) = self.net.transit(from, to, self.now, &mut self.rng)? else {
            self.counters.lost += 1;
            return Ok(None);
        };
        let due = self.now + delay;
        self.push(due, to, Payload::Message { from, msg });
        Ok(Some(due))
    }

    /// Fires when `node`'s local clock reaches `at_local`, never in the past.
    pub fn set_timer(&mut self, node: NodeId, at_local: Micros, timer: T) -> Micros {
        let due = self.clocks.true_for_local(node, at_local).max(self.now);
        self.push(due, node, Payload::Timer(timer));
        due
    }

    pub fn schedule_fault(&mut self, node: NodeId, at: Micros, fault: Fault) {
        self.push(at.max(self.now), node, Payload::Fault(fault));
    }

    /// Marks `node` crashed; its pending timers are discarded.
    pub fn crash(&mut self, node: NodeId) {
        self.crashed.insert(node);
        *self.incarnation.entry(node).or_insert(0) += 1;
    }

    pub fn restart(&mut self, node: NodeId) {
        self.crashed.remove(&node);
    }

    /// Applies a handler's effects on behalf of `node`.
    pub fn apply(&mut self, node: NodeId, out: Outbox<M, T>) -> Result<(), SimError> {
        for (to, msg) in out.sends {
            self.send(node, to, msg)?;
        }
        for (at, timer) in out.timers {
            self.set_timer(node, at, timer);
        }
        Ok(())
    }

    pub fn outbox(&self, node: NodeId) -> Outbox<M, T> {
        Outbox::new(self.local_clock(node), self.now)
    }

    fn record(&mut self, e: &Queued<M, T>) {
        let tag = match &e.payload {
            Payload::Message { msg, .. } => msg.tag(),
            Payload::Timer(t) => t.tag(),
            Payload::Fault(Fault::Crash) => "crash",
            Payload::Fault(Fault::Restart) => "restart",
        };
        self.digest.update(e.due.to_be_bytes());
        self.digest.update(e.seq.to_be_bytes());
        self.digest.update(e.target.to_string().as_bytes());
        self.digest.update(tag.as_bytes());
        if let Some(trace) = self.trace.as_mut() {
            trace.push(TraceEntry {
                due: e.due,
                seq: e.seq,
                target: e.target,
                tag: tag.to_string(),
            });
        }
    }

    /// Due time of the next event that would be delivered, if any.
    pub fn peek_due(&self) -> Option<Micros> {
        self.queue.peek().map(|e| e.due)
    }

    /// Next deliverable event, advancing the clock to its due time. Events
    /// addressed to crashed nodes, and timers set before a crash, vanish.
    pub fn pop(&mut self) -> Option<Event<M, T>> {
        while let Some(e) = self.queue.pop() {
            self.now = e.due;
            let live_incarnation = self.incarnation.get(&e.target).copied().unwrap_or(0);
            let stale = match &e.payload {
                Payload::Fault(_) => false,
                Payload::Timer(_) => self.is_crashed(e.target) || e.incarnation != live_incarnation,
                Payload::Message { .. } => self.is_crashed(e.target),
            };
            if stale {
                self.counters.discarded_at_crashed += 1;
                continue;
            }
            self.record(&e);
            return Some(Event {
                due: e.due,
                seq: e.seq,
                target: e.target,
                payload: e.payload,
            });
        }
        None
    }

    /// Processes events until `stop` holds; fails if the queue runs dry first.
    pub fn run_until(
        &mut self,
        mut handler: impl FnMut(&mut Self, Event<M, T>),
        mut stop: impl FnMut(&Self) -> bool,
    ) -> Result<(), SimError> {
        while !stop(self) {
            match self.pop() {
                Some(e) => handler(self, e),
                None => return Err(SimError::Exhausted { now: self.now }),
            }
        }
        Ok(())
    }

    /// Processes every event due at or before `until`, then sets the clock
    /// to `until`. Never fails on an empty queue.
    pub fn advance_to(&mut self, until: Micros, mut handler: impl FnMut(&mut Self, Event<M, T>)) {
        while self.peek_due().is_some_and(|d| d <= until) {
            if let Some(e) = self.pop() {
                handler(self, e);
            }
        }
        self.now = self.now.max(until);
    }
}
