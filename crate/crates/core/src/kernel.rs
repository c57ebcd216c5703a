//! Virtual clock, ordered event queue and the network send path.
//!
//! Events are processed in strictly ascending `(at, seq)` order, where `seq`
//! is a global counter assigned at scheduling time. Nothing here reads the
//! wall clock.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Add;

use thiserror::Error;

use crate::fields;
use crate::ids::PeerId;
use crate::network::{Delivery, NetworkError, NetworkModel};
use crate::rng::SimRng;
use crate::trace::{EventKind, Trace};

/// Simulated time in milliseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VirtualTime(pub u64);

impl VirtualTime {
    pub const ZERO: VirtualTime = VirtualTime(0);

    pub fn as_millis(self) -> u64 {
        self.0
    }

    pub fn saturating_sub(self, other: VirtualTime) -> u64 {
        self.0.saturating_sub(other.0)
    }
}

impl Add<u64> for VirtualTime {
    type Output = VirtualTime;

    fn add(self, ms: u64) -> VirtualTime {
        VirtualTime(self.0 + ms)
    }
}

impl fmt::Display for VirtualTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ms", self.0)
    }
}

pub type EventId = u64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Target {
    Kernel,
    Peer(PeerId),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Event<P> {
    pub at: VirtualTime,
    pub seq: EventId,
    pub target: Target,
    pub payload: P,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KernelError {
    #[error("cannot schedule at {at} when the clock reads {now}")]
    SchedulingInPast { at: VirtualTime, now: VirtualTime },
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// What happened to a message handed to [`Kernel::send_message`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SendOutcome {
    Scheduled { id: EventId, at: VirtualTime },
    Dropped,
}

pub struct Kernel<P> {
    now: VirtualTime,
    next_seq: EventId,
    queue: BTreeMap<(VirtualTime, EventId), (Target, P)>,
    pub rng: SimRng,
    pub network: NetworkModel,
    pub trace: Trace,
}

impl<P> Kernel<P> {
    pub fn new(seed: u64, network: NetworkModel) -> Self {
        Self {
            now: VirtualTime::ZERO,
            next_seq: 0,
            queue: BTreeMap::new(),
            rng: SimRng::new(seed),
            network,
            trace: Trace::new(),
        }
    }

    pub fn now(&self) -> VirtualTime {
        self.now
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }

    pub fn schedule_event(
        &mut self,
        at: VirtualTime,
        target: Target,
        payload: P,
    ) -> Result<EventId, KernelError> {
        if at < self.now {
            return Err(KernelError::SchedulingInPast { at, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.insert((at, seq), (target, payload));
        Ok(seq)
    }

    /// Schedules `delay` ms from now; cannot fail.
    pub fn schedule_in(&mut self, delay: u64, target: Target, payload: P) -> EventId {
        let at = self.now + delay;
        self.schedule_event(at, target, payload)
            .expect("a non-negative delay is never in the past")
    }

    /// Removes and returns the next event if it is due at or before `t_end`,
    /// advancing the clock to it.
    pub fn pop_due(&mut self, t_end: VirtualTime) -> Option<Event<P>> {
        let (&(at, seq), _) = self.queue.first_key_value()?;
        if at > t_end {
            return None;
        }
        let (target, payload) = self.queue.remove(&(at, seq)).expect("key just observed");
        self.now = at;
        Some(Event {
            at,
            seq,
            target,
            payload,
        })
    }

    /// Processes every event with `at <= t_end`, including ones scheduled by
    /// the handler along the way. If the queue drains, the clock rests at
    /// `t_end`; otherwise it rests at the last processed event.
    pub fn run_until<F>(&mut self, t_end: VirtualTime, mut handler: F) -> usize
    where
        F: FnMut(&mut Kernel<P>, Event<P>),
    {
        let mut processed = 0;
        while let Some(ev) = self.pop_due(t_end) {
            handler(self, ev);
            processed += 1;
        }
        self.settle(t_end);
        processed
    }

    pub fn settle(&mut self, t_end: VirtualTime) {
        if self.queue.is_empty() && t_end > self.now {
            self.now = t_end;
        }
    }

    /// Offers a message to the network. A delivered message becomes an event
    /// for `to` at `now + latency`; a dropped one leaves a `msg_dropped` record.
    pub fn send_message(
        &mut self,
        from: PeerId,
        to: PeerId,
        payload: P,
    ) -> Result<SendOutcome, KernelError> {
        let decision = self.network.offer(from, to, &mut self.rng)?;
        self.trace.stats.messages_sent += 1;
        match decision {
            Delivery::After(latency) => {
                let at = self.now + latency;
                let id = self.schedule_event(at, Target::Peer(to), payload)?;
                Ok(SendOutcome::Scheduled { id, at })
            }
            Delivery::Dropped(reason) => {
                self.trace.emit(
                    self.now,
                    EventKind::MsgDropped,
                    from,
                    fields! { "to" => to, "reason" => reason.as_str() },
                );
                Ok(SendOutcome::Dropped)
            }
        }
    }
}
