//! Worker service: adaptive admission threshold, query processing with a
//! direct client reply, heartbeats, and survival while the rendezvous is gone.

use std::collections::{BTreeMap, VecDeque};

use thiserror::Error;

use crate::entrypoint::{payload_matches, Query, WorkerReport};
use crate::ids::{GroupId, PeerId, QueryId};
use crate::kernel::VirtualTime;
use crate::monitor::Heartbeat;

/// One window-close threshold step, raw and clamped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ThresholdUpdate {
    pub t_old: u32,
    pub qx: u32,
    pub raw: i64,
    pub clamped: u32,
}

/// The threshold formula before clamping. `qx` above `t_old` is read as
/// `qx == t_old`.
pub fn threshold_raw(t_old: u32, qx: u32) -> i64 {
    let t = i64::from(t_old);
    let q = i64::from(qx.min(t_old));
    let f = (t - 2 * q).abs();
    if q < t {
        f - (t - q)
    } else {
        f - t / 10
    }
}

/// New threshold after a window in which `qx` queries were processed.
pub fn update_threshold(t_old: u32, qx: u32, t_min: u32) -> ThresholdUpdate {
    let raw = threshold_raw(t_old, qx);
    ThresholdUpdate {
        t_old,
        qx,
        raw,
        clamped: raw.max(i64::from(t_min)) as u32,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ThresholdState {
    pub t: u32,
    pub t_min: u32,
    pub window_ms: u64,
    pub q_count: u32,
    window_end: VirtualTime,
}

impl ThresholdState {
    pub fn new(t_initial: u32, t_min: u32, window_secs: u32, now: VirtualTime) -> Self {
        let window_ms = u64::from(window_secs) * 1000;
        Self {
            t: t_initial.max(t_min),
            t_min,
            window_ms,
            q_count: 0,
            window_end: now + window_ms,
        }
    }

    pub fn window_end(&self) -> VirtualTime {
        self.window_end
    }

    pub fn record_processed(&mut self) {
        self.q_count += 1;
    }

    /// Closes the window if `now` reached its end.
    pub fn tick(&mut self, now: VirtualTime) -> Option<ThresholdUpdate> {
        if now < self.window_end {
            return None;
        }
        let u = update_threshold(self.t, self.q_count, self.t_min);
        self.t = u.clamped;
        self.q_count = 0;
        while self.window_end <= now {
            self.window_end = self.window_end + self.window_ms;
        }
        Some(u)
    }
}

/// Protocol messages held back while no rendezvous is reachable.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Outbound {
    Serviced { query_id: QueryId, entry_rv: PeerId },
    Heartbeat(Heartbeat),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OutboxCache<M> {
    held: VecDeque<M>,
}

impl<M> Default for OutboxCache<M> {
    fn default() -> Self {
        Self {
            held: VecDeque::new(),
        }
    }
}

impl<M> OutboxCache<M> {
    pub fn hold(&mut self, m: M) {
        self.held.push_back(m);
    }

    /// Everything held, oldest first.
    pub fn flush(&mut self) -> Vec<M> {
        self.held.drain(..).collect()
    }

    pub fn len(&self) -> usize {
        self.held.len()
    }

    pub fn is_empty(&self) -> bool {
        self.held.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &M> {
        self.held.iter()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WorkerError {
    #[error("query {0} does not match the service query format")]
    MalformedQuery(QueryId),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment {
    pub query: Query,
    pub entry_rv: PeerId,
    pub accepted_at: VirtualTime,
    pub done_at: VirtualTime,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Admission {
    Accepted {
        done_at: VirtualTime,
    },
    Busy,
    /// Already running here; the second copy is ignored.
    Duplicate,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Completion {
    pub query: Query,
    pub entry_rv: PeerId,
    /// The serviced notice and where to send it, or `None` when it was cached.
    pub notify: Option<(PeerId, Outbound)>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct HeartbeatTick {
    pub update: Option<ThresholdUpdate>,
    pub send: Option<(PeerId, Heartbeat)>,
    /// Set on the tick at which the rendezvous is declared lost.
    pub lost_rv: Option<PeerId>,
}

pub struct WorkerService {
    pub peer: PeerId,
    pub service: GroupId,
    query_format: String,
    pub threshold: ThresholdState,
    in_flight: BTreeMap<QueryId, Assignment>,
    outbox: OutboxCache<Outbound>,
    rv: Option<PeerId>,
    last_rv: Option<PeerId>,
    unacked: u32,
    lost_since: Option<VirtualTime>,
    serviced_offline: Vec<QueryId>,
}

impl WorkerService {
    pub fn new(
        peer: PeerId,
        service: GroupId,
        query_format: impl Into<String>,
        threshold: ThresholdState,
    ) -> Self {
        Self {
            peer,
            service,
            query_format: query_format.into(),
            threshold,
            in_flight: BTreeMap::new(),
            outbox: OutboxCache::default(),
            rv: None,
            last_rv: None,
            unacked: 0,
            lost_since: None,
            serviced_offline: Vec::new(),
        }
    }

    pub fn rv(&self) -> Option<PeerId> {
        self.rv
    }

    pub fn last_rv(&self) -> Option<PeerId> {
        self.last_rv
    }

    pub fn lost_since(&self) -> Option<VirtualTime> {
        self.lost_since
    }

    pub fn outbox(&self) -> &OutboxCache<Outbound> {
        &self.outbox
    }

    pub fn in_flight(&self) -> impl Iterator<Item = &Assignment> {
        self.in_flight.values()
    }

    pub fn in_flight_len(&self) -> u32 {
        self.in_flight.len() as u32
    }

    pub fn is_running(&self, id: QueryId) -> bool {
        self.in_flight.contains_key(&id)
    }

    /// Admits the query if fewer than T are in flight.
    pub fn handle_query(
        &mut self,
        query: Query,
        entry_rv: PeerId,
        now: VirtualTime,
        service_ms: u64,
    ) -> Result<Admission, WorkerError> {
        if !payload_matches(&self.query_format, &query.payload) {
            return Err(WorkerError::MalformedQuery(query.query_id));
        }
        if self.in_flight.contains_key(&query.query_id) {
            return Ok(Admission::Duplicate);
        }
        if self.in_flight_len() >= self.threshold.t {
            return Ok(Admission::Busy);
        }
        let done_at = now + service_ms;
        self.in_flight.insert(
            query.query_id,
            Assignment {
                query,
                entry_rv,
                accepted_at: now,
                done_at,
            },
        );
        Ok(Admission::Accepted { done_at })
    }

    /// Finishes a query. `None` when it was cancelled meanwhile.
    pub fn complete_query(&mut self, id: QueryId) -> Option<Completion> {
        let a = self.in_flight.remove(&id)?;
        self.threshold.record_processed();
        let msg = Outbound::Serviced {
            query_id: id,
            entry_rv: a.entry_rv,
        };
        let notify = match self.rv {
            Some(rv) => Some((rv, msg)),
            None => {
                self.outbox.hold(msg);
                self.serviced_offline.push(id);
                None
            }
        };
        Some(Completion {
            query: a.query,
            entry_rv: a.entry_rv,
            notify,
        })
    }

    pub fn cancel(&mut self, id: QueryId) -> bool {
        self.in_flight.remove(&id).is_some()
    }

    /// Periodic tick: closes the threshold window if due, declares the
    /// rendezvous lost after `k` unanswered heartbeats, then heartbeats.
    pub fn heartbeat_tick(&mut self, now: VirtualTime, k: u32) -> HeartbeatTick {
        let mut out = HeartbeatTick {
            update: self.threshold.tick(now),
            ..HeartbeatTick::default()
        };
        if let Some(rv) = self.rv {
            if self.unacked >= k {
                self.rv = None;
                self.lost_since = Some(now);
                out.lost_rv = Some(rv);
            }
        }
        let hb = Heartbeat {
            from: self.peer,
            sent_at: now,
            threshold: self.threshold.t,
        };
        match self.rv {
            Some(rv) => {
                self.unacked += 1;
                out.send = Some((rv, hb));
            }
            None if self.last_rv.is_some() => self.outbox.hold(Outbound::Heartbeat(hb)),
            None => {}
        }
        out
    }

    pub fn on_ack(&mut self, from: PeerId) {
        if self.rv == Some(from) {
            self.unacked = 0;
        }
    }

    /// Attaches to `rv` and returns the held messages in generation order.
    pub fn connect(&mut self, rv: PeerId) -> Vec<Outbound> {
        self.rv = Some(rv);
        self.last_rv = Some(rv);
        self.unacked = 0;
        self.lost_since = None;
        self.serviced_offline.clear();
        self.outbox.flush()
    }

    /// Points work scheduled by `old` at its successor `new`.
    pub fn retarget(&mut self, old: PeerId, new: PeerId) {
        for a in self.in_flight.values_mut() {
            if a.entry_rv == old {
                a.entry_rv = new;
            }
        }
        for m in self.outbox.held.iter_mut() {
            if let Outbound::Serviced { entry_rv, .. } = m {
                if *entry_rv == old {
                    *entry_rv = new;
                }
            }
        }
    }

    /// Detaches without caching anything, e.g. when this worker itself
    /// becomes the rendezvous.
    pub fn disconnect(&mut self) {
        self.rv = None;
    }

    /// What a new rendezvous needs to rebuild its view of this worker.
    pub fn report(&self) -> WorkerReport {
        WorkerReport {
            worker: self.peer,
            in_flight: self
                .in_flight
                .values()
                .map(|a| (a.query.clone(), a.entry_rv))
                .collect(),
            serviced: self.serviced_offline.clone(),
        }
    }
}
