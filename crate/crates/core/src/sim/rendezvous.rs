//! Rendezvous peers: the Entry Point and Monitoring services, table exchange
//! inside the EPM group, spawning, consolidation and election.

use std::collections::{BTreeMap, BTreeSet};

use crate::entrypoint::{
    rebuild_schedule, Dispatch, EntryError, EntryPoint, GroupLoadView, Query, ScheduleCache,
    ServicedOutcome, SnapshotEntry, WorkerReport,
};
use crate::fields;
use crate::ids::{GroupId, PeerId, QueryId};
use crate::kernel::{Target, VirtualTime};
use crate::monitor::{spawn_replacement, ExchangedTable, Heartbeat, MonitorService, ServiceKind};
use crate::trace::EventKind;

use super::{Msg, Payload, Simulation, Timer};

pub(crate) struct RvHost {
    pub epoch: u64,
    pub idx: usize,
    pub service: GroupId,
    pub ep: EntryPoint,
    pub mon: MonitorService,
    /// Workers this rendezvous has seen declared failed.
    pub failed_workers: BTreeSet<PeerId>,
    /// Rendezvous peers known to be gone, by detection or announcement.
    pub dead_rvs: BTreeSet<PeerId>,
    /// Old rendezvous to the peer that took over its schedule.
    pub successors: BTreeMap<PeerId, PeerId>,
    pub low_slots: u32,
}

impl RvHost {
    fn view(&self) -> GroupLoadView {
        self.mon.load_view(self.ep.cache(), &self.failed_workers)
    }

    fn resolve(&self, mut rv: PeerId) -> PeerId {
        for _ in 0..self.successors.len() {
            match self.successors.get(&rv) {
                Some(next) => rv = *next,
                None => break,
            }
        }
        rv
    }
}

impl Simulation {
    pub(crate) fn rv_host(&mut self, p: PeerId) -> Option<&mut RvHost> {
        self.peers.get_mut(&p).and_then(|s| s.rv.as_mut())
    }

    /// Launches the Entry Point and Monitoring services on `p` for `sub`.
    pub(crate) fn start_rv(
        &mut self,
        p: PeerId,
        idx: usize,
        service: GroupId,
        sub: GroupId,
        cache: Option<ScheduleCache>,
    ) {
        let epoch = self.fresh_epoch();
        let now = self.now();
        let fmt = self.service_spec(idx).query_format.clone();
        let mut ep = EntryPoint::new(p, service, fmt);
        if let Some(c) = cache {
            ep = ep.with_cache(c);
        }
        let mut mon = MonitorService::new(p, sub);
        for m in self.epm_peers(service, p) {
            mon.rv_liveness.watch(m, now);
        }
        self.kernel.network.set_cluster(p, Some(sub));
        self.peers.get_mut(&p).expect("known peer").rv = Some(RvHost {
            epoch,
            idx,
            service,
            ep,
            mon,
            failed_workers: BTreeSet::new(),
            dead_rvs: BTreeSet::new(),
            successors: BTreeMap::new(),
            low_slots: 0,
        });
        let hb = self.params().heartbeat_period;
        let e = self.params().exchange_interval;
        self.schedule_timer(p, hb, epoch, Timer::RvTick);
        self.schedule_timer(p, e - now.as_millis() % e, epoch, Timer::ExchangeTick);
    }

    /// Runs an entry point operation against a fresh load view and carries
    /// out the resulting dispatches.
    fn rv_route(
        &mut self,
        p: PeerId,
        f: impl FnOnce(&mut EntryPoint, &mut GroupLoadView, VirtualTime) -> Vec<Dispatch>,
    ) {
        let now = self.now();
        let Some(h) = self.rv_host(p) else { return };
        let mut view = h.view();
        let ds = f(&mut h.ep, &mut view, now);
        for d in ds {
            self.apply_dispatch(p, d);
        }
    }

    fn apply_dispatch(&mut self, p: PeerId, d: Dispatch) {
        let kind = |reassigned| {
            if reassigned {
                EventKind::QueryRescheduled
            } else {
                EventKind::QueryScheduled
            }
        };
        match d {
            Dispatch::Scheduled {
                query,
                worker,
                scheduled,
                threshold,
                reassigned,
            } => {
                self.emit(
                    kind(reassigned),
                    p,
                    fields! {
                        "query_id" => query.query_id,
                        "worker" => worker,
                        "scheduled" => scheduled,
                        "threshold" => threshold,
                    },
                );
                self.send(p, worker, Msg::QueryForward { query, entry_rv: p });
            }
            Dispatch::Enqueued {
                query_id,
                depth,
                reassigned,
            } => self.emit(
                kind(reassigned),
                p,
                fields! { "query_id" => query_id, "to" => "pending", "depth" => depth as u64 },
            ),
        }
    }

    fn rv_dispatch_pending(&mut self, p: PeerId) {
        if self
            .rv_host(p)
            .is_some_and(|h| h.ep.cache().pending_len() > 0)
        {
            self.rv_route(p, |ep, v, now| ep.dispatch_pending(v, now));
        }
    }

    // ---- entry point ----------------------------------------------------

    pub(crate) fn rv_on_submit(&mut self, p: PeerId, q: Query) {
        let now = self.now();
        let id = q.query_id;
        let Some(h) = self.rv_host(p) else {
            self.emit(
                EventKind::MsgDropped,
                p,
                fields! { "to" => p, "reason" => "no_entry_point", "query" => id },
            );
            return;
        };
        let mut view = h.view();
        match h.ep.handle_query(q, &mut view, now) {
            Ok(d) => self.apply_dispatch(p, d),
            Err(e) => {
                let reason = match e {
                    EntryError::DuplicateQueryId(_) => "duplicate_query",
                    EntryError::MalformedQuery(_) => "malformed_query",
                    EntryError::WrongService(_) => "wrong_service",
                    EntryError::NoWorkersAlive | EntryError::AllSaturated => "no_capacity",
                };
                self.emit(
                    EventKind::MsgDropped,
                    p,
                    fields! { "to" => p, "reason" => reason, "query" => id },
                );
            }
        }
    }

    pub(crate) fn rv_on_serviced(
        &mut self,
        p: PeerId,
        query_id: QueryId,
        worker: PeerId,
        entry_rv: PeerId,
        _forwarded: bool,
    ) {
        let Some(h) = self.rv_host(p) else { return };
        let target = h.resolve(entry_rv);
        if target != p {
            self.send(
                p,
                target,
                Msg::QueryServiced {
                    query_id,
                    worker,
                    entry_rv: target,
                    forwarded: true,
                },
            );
            return;
        }
        match h.ep.handle_query_serviced(query_id, worker) {
            ServicedOutcome::Removed { cancel } => {
                for c in cancel {
                    self.emit(
                        EventKind::QueryCancelled,
                        p,
                        fields! { "query_id" => query_id, "worker" => c },
                    );
                    self.send(p, c, Msg::QueryCancel { query_id });
                }
                self.rv_dispatch_pending(p);
            }
            ServicedOutcome::Unknown => self.emit(
                EventKind::LateServicedIgnored,
                p,
                fields! { "query_id" => query_id, "worker" => worker },
            ),
        }
    }

    pub(crate) fn rv_on_busy(&mut self, p: PeerId, query_id: QueryId, worker: PeerId) {
        self.rv_route(p, |ep, v, now| {
            ep.handle_busy(query_id, worker, v, now)
                .into_iter()
                .collect()
        });
    }

    // ---- monitoring -----------------------------------------------------

    pub(crate) fn rv_on_register(
        &mut self,
        p: PeerId,
        from: PeerId,
        report: WorkerReport,
        threshold: u32,
        fresh: bool,
    ) {
        let now = self.now();
        let Some(h) = self.rv_host(p) else { return };
        h.mon.table.remove(from);
        h.mon.table.admit(from, threshold, now);
        h.failed_workers.remove(&from);
        let dead = h.dead_rvs.clone();
        h.ep.absorb_report(&report, |rv| dead.contains(&rv), now);
        if fresh {
            self.rv_route(p, |ep, v, now| ep.handle_worker_failure(from, v, now));
        }
        self.send(p, from, Msg::HeartbeatAck);
        self.rv_dispatch_pending(p);
    }

    pub(crate) fn rv_on_adopt(&mut self, p: PeerId, report: WorkerReport) {
        let now = self.now();
        let Some(h) = self.rv_host(p) else { return };
        let dead = h.dead_rvs.clone();
        h.ep.absorb_report(&report, |rv| dead.contains(&rv), now);
    }

    pub(crate) fn rv_on_heartbeat(&mut self, p: PeerId, hb: Heartbeat) {
        let now = self.now();
        let Some(h) = self.rv_host(p) else { return };
        match h.mon.table.record_heartbeat(&hb, now, h.ep.cache()) {
            Ok(row) => {
                self.emit(
                    EventKind::Heartbeat,
                    p,
                    fields! { "from" => hb.from, "threshold" => hb.threshold, "delay" => row.network_delay },
                );
                self.send(p, hb.from, Msg::HeartbeatAck);
                self.rv_dispatch_pending(p);
            }
            Err(_) => self.emit(
                EventKind::Heartbeat,
                p,
                fields! { "from" => hb.from, "threshold" => hb.threshold, "status" => "unregistered" },
            ),
        }
    }

    pub(crate) fn rv_on_rv_heartbeat(&mut self, p: PeerId, from: PeerId) {
        let now = self.now();
        if let Some(h) = self.rv_host(p) {
            if !h.successors.contains_key(&from) {
                h.dead_rvs.remove(&from);
                h.mon.rv_liveness.heard(from, now);
            }
        }
    }

    pub(crate) fn rv_on_exchange(&mut self, p: PeerId, from: PeerId, t: ExchangedTable) {
        let now = self.now();
        let Some(h) = self.rv_host(p) else { return };
        if h.successors.contains_key(&from) {
            return;
        }
        h.mon.merged.merge(t);
        h.mon.rv_liveness.heard(from, now);
        self.rv_dispatch_pending(p);
    }

    pub(crate) fn rv_on_worker_failed(&mut self, p: PeerId, peer: PeerId) {
        let Some(h) = self.rv_host(p) else { return };
        h.failed_workers.insert(peer);
        self.rv_route(p, |ep, v, now| ep.handle_worker_failure(peer, v, now));
    }

    pub(crate) fn rv_on_moved(&mut self, p: PeerId, worker: PeerId) {
        if let Some(h) = self.rv_host(p) {
            h.mon.table.remove(worker);
        }
    }

    pub(crate) fn rv_on_handover(&mut self, p: PeerId, cache: ScheduleCache) {
        let Some(h) = self.rv_host(p) else { return };
        h.ep.absorb(cache);
        self.rv_dispatch_pending(p);
    }

    /// Heartbeats the EPM group and runs both failure detectors.
    pub(crate) fn rv_tick(&mut self, p: PeerId) {
        let now = self.now();
        let (hb, k) = (self.params().heartbeat_period, self.params().k);
        let h = self
            .rv_host(p)
            .expect("tick is bound to a running rendezvous");
        let (epoch, service, sub) = (h.epoch, h.service, h.mon.table.subgroup);
        let failed_workers: Vec<PeerId> = h
            .mon
            .table
            .detect_failures(now, hb, k)
            .into_iter()
            .filter(|w| *w != p)
            .collect();
        let failed_rvs = h.mon.rv_liveness.detect_failures(now, hb, k);
        h.dead_rvs.extend(failed_rvs.iter().copied());
        h.failed_workers.extend(failed_workers.iter().copied());

        let epm = self.epm_peers(service, p);
        for m in &epm {
            self.send(p, *m, Msg::RvHeartbeat);
        }
        for w in failed_workers {
            self.emit(
                EventKind::FailureDetected,
                p,
                fields! { "peer" => w, "kind" => "worker", "group" => sub },
            );
            self.overlay.remove_worker(w);
            self.rv_route(p, |ep, v, now| ep.handle_worker_failure(w, v, now));
            for m in &epm {
                self.send(p, *m, Msg::WorkerFailed { peer: w });
            }
        }
        for r in failed_rvs {
            let led = self.overlay.subgroup_led_by(r);
            let mut d = fields! { "peer" => r, "kind" => "rendezvous" };
            if let Some(g) = led {
                d.insert("group".into(), g.into());
            }
            self.emit(EventKind::FailureDetected, p, d);
            if let Some(g) = led {
                if self.overlay.begin_election(g, r) {
                    let delay = self.params().election_delay;
                    self.kernel.schedule_in(
                        delay,
                        Target::Kernel,
                        Payload::Election {
                            subgroup: g,
                            failed: r,
                        },
                    );
                }
            }
        }
        self.schedule_timer(p, hb, epoch, Timer::RvTick);
    }

    /// One table-exchange slot: broadcast, then the coordinator (lowest live
    /// EPM member) decides on spawning.
    pub(crate) fn rv_exchange_tick(&mut self, p: PeerId) {
        let now = self.now();
        let e = self.params().exchange_interval;
        let s = self.params().spawn_after_slots;
        let slot = now.as_millis() / e;
        let h = self
            .rv_host(p)
            .expect("tick is bound to a running rendezvous");
        let (epoch, idx, service) = (h.epoch, h.idx, h.service);
        let snapshot = h.ep.snapshot();
        let table = h.mon.exchange(slot, snapshot);
        let view = h.view();
        let pending = h.ep.cache().pending_len();
        let coordinator = h.mon.rv_liveness.watched().chain([p]).min() == Some(p);
        let spawn_due = coordinator && h.mon.note_slot(view.saturated(), s);
        self.emit(
            EventKind::TableExchange,
            p,
            fields! {
                "rv" => p,
                "group" => table.table.subgroup,
                "slot" => slot,
                "rows" => table.table.rows.len() as u64,
                "entries" => table.schedule.len() as u64,
                "pending" => pending as u64,
            },
        );
        for m in self.epm_peers(service, p) {
            self.send(p, m, Msg::TableExchange(table.clone()));
        }
        if spawn_due {
            self.rv_spawn_worker(p, idx, service);
        }
        if self.params().consolidation {
            self.rv_consider_consolidation(p);
        }
        if self.rv_host(p).is_some() {
            self.rv_dispatch_pending(p);
            self.schedule_timer(p, e, epoch, Timer::ExchangeTick);
        }
    }

    fn rv_spawn_worker(&mut self, p: PeerId, idx: usize, service: GroupId) {
        let pool: BTreeSet<PeerId> = self
            .peers
            .iter()
            .filter(|(_, s)| s.spare)
            .map(|(id, _)| *id)
            .collect();
        let chosen = spawn_replacement(&pool, |h| {
            let st = &self.peers[&h];
            self.overlay.is_alive(h)
                && self.kernel.network.connected(p, h)
                && st.service.is_none()
                && st.worker.is_none()
                && st.rv.is_none()
        });
        match chosen {
            Ok(h) => {
                self.emit(
                    EventKind::Spawn,
                    p,
                    fields! {
                        "kind" => ServiceKind::WorkerService.as_str(),
                        "host" => h,
                        "service" => service,
                        "reason" => "saturation",
                    },
                );
                self.send(p, h, Msg::SpawnOrder { service: idx });
            }
            Err(_) => self.emit(
                EventKind::Spawn,
                p,
                fields! {
                    "kind" => ServiceKind::WorkerService.as_str(),
                    "service" => service,
                    "reason" => "saturation",
                    "result" => "no_eligible_host",
                },
            ),
        }
    }

    /// A subgroup that stays below R_min workers for three slots folds into
    /// the lowest-id sibling with room for it.
    fn rv_consider_consolidation(&mut self, p: PeerId) {
        const LOW_SLOTS: u32 = 3;
        let r_min = self.params().r_min as usize;
        let r_max = self.overlay.r_max();
        let Some(h) = self.rv_host(p) else { return };
        let (sub, service, idx) = (h.mon.table.subgroup, h.service, h.idx);
        let Some(table) = self.overlay.table(sub) else {
            return;
        };
        let mine = table.registered.len() + usize::from(!table.registered.contains(&p));
        let low = table.registered.len() < r_min;
        let h = self.rv_host(p).expect("checked above");
        h.low_slots = if low { h.low_slots + 1 } else { 0 };
        if h.low_slots < LOW_SLOTS {
            return;
        }
        let target = self.overlay.subgroups_of(service).into_iter().find(|g| {
            *g != sub
                && self.overlay.table(*g).is_some_and(|t| {
                    self.overlay.is_alive(t.rv)
                        && self.kernel.network.connected(p, t.rv)
                        && t.registered.len() + mine <= r_max
                })
        });
        let Some(into) = target else { return };
        let into_rv = self.overlay.table(into).expect("found above").rv;
        let movers = self.with_overlay(|o, c| o.consolidate(c, sub, into));
        let mut host = self
            .peers
            .get_mut(&p)
            .and_then(|s| s.rv.take())
            .expect("checked above");
        let cache = host.ep.take_cache();
        self.send(p, into_rv, Msg::Handover(Box::new(cache)));
        let announce = Msg::RvAnnounce {
            subgroup: into,
            old: p,
            new: into_rv,
        };
        for m in movers.iter().filter(|m| **m != p) {
            self.send(p, *m, announce.clone());
        }
        for m in self.epm_peers(service, p) {
            self.send(p, m, announce.clone());
        }
        if self.peers[&p].worker.is_some() {
            self.worker_on_announce(p, into, p, into_rv);
        } else {
            self.start_worker(p, idx, service, into_rv);
        }
    }

    /// Handles a takeover announcement: as rendezvous (bookkeeping plus a
    /// relay to this subgroup's workers) and as worker.
    pub(crate) fn on_rv_announce(
        &mut self,
        p: PeerId,
        subgroup: GroupId,
        old: PeerId,
        new: PeerId,
    ) {
        let now = self.now();
        let mut relay = Vec::new();
        if let Some(h) = self.rv_host(p).filter(|_| p == new) {
            // Absorbed a retiring rendezvous: stop expecting its heartbeats.
            h.mon.rv_liveness.forget(old);
            h.mon.merged.drop_rv(old);
        } else if let Some(h) = self.rv_host(p) {
            h.successors.insert(old, new);
            h.dead_rvs.insert(old);
            h.mon.rv_liveness.forget(old);
            h.mon.rv_liveness.watch(new, now);
            h.mon.merged.drop_rv(old);
            let own = h.mon.table.subgroup;
            if own != subgroup {
                if let Some(t) = self.overlay.table(own) {
                    relay = t.registered.iter().copied().filter(|w| *w != p).collect();
                }
            }
        }
        for w in relay {
            self.send(p, w, Msg::RvAnnounce { subgroup, old, new });
        }
        self.worker_on_announce(p, subgroup, old, new);
    }

    // ---- election -------------------------------------------------------

    /// The lowest alive registered worker of the subgroup takes over, then
    /// rebuilds the failed rendezvous' schedule from the EPM members' last
    /// exchanged tables and its own in-progress work.
    pub(crate) fn run_election(&mut self, sub: GroupId, failed: PeerId) {
        if !self.overlay.election_pending(sub) {
            return;
        }
        if self.alive(failed) && self.peers[&failed].rv.is_some() {
            self.overlay.abandon_election(sub);
            return;
        }
        let now = self.now();
        let Some(service) = self.overlay.service_of(sub) else {
            return;
        };
        let Ok(winner) = self.with_overlay(|o, c| o.elect_rendezvous(c, sub)) else {
            return;
        };
        let idx = self.service_specs[&service];

        let mut tables: Vec<(u64, Vec<SnapshotEntry>)> = Vec::new();
        let mut thresholds: BTreeMap<PeerId, u32> = BTreeMap::new();
        let mut known_dead: BTreeSet<PeerId> = BTreeSet::new();
        let mut others: Vec<ExchangedTable> = Vec::new();
        for m in self.epm_peers(service, winner) {
            let Some(h) = self
                .peers
                .get(&m)
                .filter(|s| s.alive)
                .and_then(|s| s.rv.as_ref())
            else {
                continue;
            };
            if let Some(t) = h.mon.merged.get(failed) {
                tables.push((t.table.slot, t.schedule.clone()));
                thresholds.extend(t.table.rows.values().map(|r| (r.peer, r.threshold)));
            }
            known_dead.extend(h.failed_workers.iter().copied());
            others.extend(
                h.mon
                    .merged
                    .tables()
                    .filter(|t| t.from != failed && t.from != winner)
                    .cloned(),
            );
        }
        tables.sort_by_key(|(slot, _)| *slot);
        let reports: Vec<WorkerReport> = self.peers[&winner]
            .worker
            .as_ref()
            .map(|w| w.svc.report())
            .into_iter()
            .collect();
        let snapshots: Vec<Vec<SnapshotEntry>> = tables.into_iter().map(|(_, t)| t).collect();
        let rebuilt = rebuild_schedule(
            failed,
            &snapshots,
            &reports,
            |w| known_dead.contains(&w),
            now,
        );

        self.start_rv(winner, idx, service, sub, Some(rebuilt.cache));
        let registered: Vec<PeerId> = self
            .overlay
            .table(sub)
            .map(|t| t.registered.iter().copied().collect())
            .unwrap_or_default();
        let t_initial = self.service_spec(idx).t_initial;
        let h = self.rv_host(winner).expect("just started");
        for w in &registered {
            h.mon
                .table
                .admit(*w, thresholds.get(w).copied().unwrap_or(t_initial), now);
        }
        for t in others {
            h.mon.merged.merge(t);
        }
        h.failed_workers = known_dead;
        h.dead_rvs.insert(failed);
        h.successors.insert(failed, winner);
        for kind in [ServiceKind::EntryPoint, ServiceKind::Monitoring] {
            self.emit(
                EventKind::Spawn,
                winner,
                fields! { "kind" => kind.as_str(), "host" => winner, "group" => sub, "reason" => "election" },
            );
        }
        for q in rebuilt.reschedule {
            self.rv_route(winner, |ep, v, now| vec![ep.reroute(q, v, now)]);
        }
        let announce = Msg::RvAnnounce {
            subgroup: sub,
            old: failed,
            new: winner,
        };
        for w in registered.iter().filter(|w| **w != winner) {
            self.send(winner, *w, announce.clone());
        }
        for m in self.epm_peers(service, winner) {
            self.send(winner, m, announce.clone());
        }
        self.worker_on_announce(winner, sub, failed, winner);
    }
}
