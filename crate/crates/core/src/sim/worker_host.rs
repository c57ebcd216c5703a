//! Worker peers: admission, completion, heartbeats and riding out a
//! rendezvous outage.

use crate::entrypoint::Query;
use crate::fields;
use crate::ids::{GroupId, PeerId, QueryId};
use crate::trace::EventKind;
use crate::worker::{Admission, Outbound, ThresholdState, WorkerService};

use super::{Msg, Simulation, Timer};

pub(crate) struct WorkerHost {
    pub epoch: u64,
    pub idx: usize,
    pub svc: WorkerService,
}

impl Simulation {
    fn worker_host(&mut self, p: PeerId) -> Option<&mut WorkerHost> {
        self.peers.get_mut(&p).and_then(|s| s.worker.as_mut())
    }

    /// Starts the worker service on `p` (unless it already runs) and
    /// connects it to `rv`.
    pub(crate) fn start_worker(&mut self, p: PeerId, idx: usize, service: GroupId, rv: PeerId) {
        if let Some(w) = self.worker_host(p) {
            if w.svc.rv() != Some(rv) {
                self.worker_connect(p, rv);
            }
            return;
        }
        let now = self.now();
        let spec = self.service_spec(idx);
        let threshold = ThresholdState::new(spec.t_initial, spec.t_min, spec.x_secs, now);
        let svc = WorkerService::new(p, service, spec.query_format.clone(), threshold);
        let epoch = self.fresh_epoch();
        self.peers.get_mut(&p).expect("known peer").worker = Some(WorkerHost { epoch, idx, svc });
        let hb = self.params().heartbeat_period;
        self.schedule_timer(p, hb, epoch, Timer::HeartbeatTick);
        self.worker_connect(p, rv);
    }

    /// Registers with `rv`, then flushes whatever the outage left behind in
    /// generation order.
    pub(crate) fn worker_connect(&mut self, p: PeerId, rv: PeerId) {
        let fresh = std::mem::take(&mut self.peers.get_mut(&p).expect("known peer").fresh);
        let Some(w) = self.worker_host(p) else { return };
        let report = w.svc.report();
        let threshold = w.svc.threshold.t;
        let flushed = w.svc.connect(rv);
        if let Some(sub) = self.overlay.subgroup_of(p) {
            self.kernel.network.set_cluster(p, Some(sub));
        }
        self.send(
            p,
            rv,
            Msg::Register {
                report,
                threshold,
                fresh,
            },
        );
        for m in flushed {
            let msg = match m {
                Outbound::Serviced { query_id, entry_rv } => Msg::QueryServiced {
                    query_id,
                    worker: p,
                    entry_rv,
                    forwarded: false,
                },
                Outbound::Heartbeat(hb) => Msg::Heartbeat(hb),
            };
            self.send(p, rv, msg);
        }
    }

    pub(crate) fn worker_on_forward(&mut self, p: PeerId, query: Query, entry_rv: PeerId) {
        let now = self.now();
        let Some(idx) = self.peers[&p].worker.as_ref().map(|w| w.idx) else {
            return;
        };
        let ms = self.draw_service_ms(idx);
        let id = query.query_id;
        let w = self.worker_host(p).expect("checked above");
        let epoch = w.epoch;
        match w.svc.handle_query(query, entry_rv, now, ms) {
            Ok(Admission::Accepted { done_at }) => {
                self.schedule_timer(p, done_at.saturating_sub(now), epoch, Timer::Completion(id));
            }
            Ok(Admission::Busy) => self.send(
                p,
                entry_rv,
                Msg::Busy {
                    query_id: id,
                    worker: p,
                },
            ),
            Ok(Admission::Duplicate) => {}
            Err(_) => self.emit(
                EventKind::MsgDropped,
                p,
                fields! { "to" => p, "reason" => "malformed_query", "query" => id },
            ),
        }
    }

    /// Replies straight to the client's pipe and tells the rendezvous.
    pub(crate) fn worker_complete(&mut self, p: PeerId, id: QueryId) {
        let Some(w) = self.worker_host(p) else { return };
        let Some(c) = w.svc.complete_query(id) else {
            return;
        };
        self.send(
            p,
            c.query.client_pipe.owner,
            Msg::QueryReply {
                query_id: id,
                worker: p,
            },
        );
        if let Some((rv, Outbound::Serviced { query_id, entry_rv })) = c.notify {
            self.send(
                p,
                rv,
                Msg::QueryServiced {
                    query_id,
                    worker: p,
                    entry_rv,
                    forwarded: false,
                },
            );
        }
    }

    pub(crate) fn worker_on_cancel(&mut self, p: PeerId, id: QueryId) {
        if self.worker_host(p).is_some_and(|w| w.svc.cancel(id)) {
            self.emit(
                EventKind::Cancelled,
                p,
                fields! { "query_id" => id, "worker" => p },
            );
        }
    }

    pub(crate) fn worker_heartbeat_tick(&mut self, p: PeerId) {
        let now = self.now();
        let (hb, k, wait) = (
            self.params().heartbeat_period,
            self.params().k,
            self.params().rv_wait_timeout(),
        );
        let w = self
            .worker_host(p)
            .expect("tick is bound to a running worker");
        let epoch = w.epoch;
        let tick = w.svc.heartbeat_tick(now, k);
        if let Some(u) = tick.update {
            self.emit(
                EventKind::ThresholdUpdate,
                p,
                fields! { "t_old" => u.t_old, "qx" => u.qx, "raw" => u.raw, "clamped" => u.clamped },
            );
        }
        if let Some((rv, beat)) = tick.send {
            self.send(p, rv, Msg::Heartbeat(beat));
        }
        if tick.lost_rv.is_some() {
            self.schedule_timer(p, wait, epoch, Timer::RvWaitExpired);
        }
        self.schedule_timer(p, hb, epoch, Timer::HeartbeatTick);
    }

    /// The wait for an announcement ran out: reconnect to whoever runs the
    /// subgroup now, start the election if the rendezvous is dead, or keep
    /// waiting while it is alive but out of reach.
    pub(crate) fn worker_rv_wait_expired(&mut self, p: PeerId) {
        let wait = self.params().rv_wait_timeout();
        let Some(w) = self.worker_host(p) else { return };
        if w.svc.rv().is_some() {
            return;
        }
        let epoch = w.epoch;
        let Some(sub) = self.overlay.subgroup_of(p) else {
            self.place(p);
            return;
        };
        let cur = self.overlay.table(sub).expect("subgroup has a table").rv;
        let reachable =
            |s: &Self, rv: PeerId| s.overlay.is_alive(rv) && s.kernel.network.connected(p, rv);
        if cur == p || reachable(self, cur) {
            self.worker_connect(p, cur);
            return;
        }
        if !self.overlay.is_alive(cur) && self.overlay.begin_election(sub, cur) {
            self.run_election(sub, cur);
        }
        if self.worker_host(p).is_some_and(|w| w.svc.rv().is_none()) {
            self.schedule_timer(p, wait, epoch, Timer::RvWaitExpired);
        }
    }

    /// Retargets work owned by `old`; reconnects when `old` was this
    /// worker's own rendezvous, otherwise reports in-progress work to `new`.
    pub(crate) fn worker_on_announce(
        &mut self,
        p: PeerId,
        _subgroup: GroupId,
        old: PeerId,
        new: PeerId,
    ) {
        let Some(w) = self.worker_host(p) else { return };
        let mine =
            w.svc.rv() == Some(old) || (w.svc.rv().is_none() && w.svc.last_rv() == Some(old));
        w.svc.retarget(old, new);
        if mine {
            self.worker_connect(p, new);
        } else if w.svc.rv() != Some(new) {
            let report = w.svc.report();
            self.send(p, new, Msg::Adopt(report));
        }
    }
}
