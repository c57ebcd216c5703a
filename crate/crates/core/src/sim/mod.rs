//! The simulated world: every peer's services wired to the kernel, the
//! overlay registry and the scenario timeline.
//!
//! Peers never share mutable state at run time; they talk through kernel
//! messages. The overlay is the exception: it plays the advertisement
//! registry that every peer can query, and its state transitions happen
//! synchronously inside the handler of the peer that triggers them.

mod client;
mod rendezvous;
mod worker_host;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::entrypoint::{Query, WorkerReport};
use crate::ids::{GroupId, PeerId, QueryId};
use crate::kernel::{Event, Kernel, Target, VirtualTime};
use crate::metrics::{summarize, MetricsError, MetricsReport};
use crate::monitor::{ExchangedTable, Heartbeat};
use crate::network::NetworkModel;
use crate::overlay::{Ctx, HostRole, Overlay, Registration};
use crate::scenario::{validate_scenario, Action, RoleHint, Scenario, ServiceTime};
use crate::trace::{Actor, EventKind, Fields, Trace};

use client::ClientHost;
use rendezvous::RvHost;
use worker_host::WorkerHost;

/// Pipe id clients receive replies on.
pub const CLIENT_PIPE: u32 = 2;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {}", .0.join("; "))]
    Invalid(Vec<String>),
}

#[derive(Clone, Debug)]
pub(crate) enum Msg {
    QuerySubmit(Query),
    QueryForward {
        query: Query,
        entry_rv: PeerId,
    },
    QueryReply {
        query_id: QueryId,
        worker: PeerId,
    },
    QueryServiced {
        query_id: QueryId,
        worker: PeerId,
        entry_rv: PeerId,
        forwarded: bool,
    },
    QueryCancel {
        query_id: QueryId,
    },
    Busy {
        query_id: QueryId,
        worker: PeerId,
    },
    Heartbeat(Heartbeat),
    HeartbeatAck,
    RvHeartbeat,
    TableExchange(ExchangedTable),
    WorkerFailed {
        peer: PeerId,
    },
    SpawnOrder {
        service: usize,
    },
    RvAnnounce {
        subgroup: GroupId,
        old: PeerId,
        new: PeerId,
    },
    Register {
        report: WorkerReport,
        threshold: u32,
        fresh: bool,
    },
    Moved {
        worker: PeerId,
    },
    /// A worker's in-progress work, sent to a rendezvous that took over.
    Adopt(WorkerReport),
    Handover(Box<crate::entrypoint::ScheduleCache>),
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Timer {
    Bootstrap,
    BootstrapCreate,
    Place,
    HeartbeatTick,
    Completion(QueryId),
    RvWaitExpired,
    RvTick,
    ExchangeTick,
    Arrival { workload: usize, n: u32 },
    QueryTimeout { query_id: QueryId, attempt: u32 },
}

#[derive(Clone, Debug)]
pub(crate) enum Payload {
    Msg { from: PeerId, msg: Msg },
    Timer { epoch: u64, timer: Timer },
    Timeline(usize),
    Election { subgroup: GroupId, failed: PeerId },
}

pub(crate) struct PeerState {
    pub role: RoleHint,
    pub spare: bool,
    /// Scenario service this peer is declared for.
    pub service: Option<usize>,
    pub alive: bool,
    /// Changes on revive so timers from an earlier life are ignored.
    pub incarnation: u64,
    /// Set by a revive; the next registration tells the rendezvous this
    /// peer lost its in-flight work.
    pub fresh: bool,
    pub worker: Option<WorkerHost>,
    pub rv: Option<RvHost>,
    pub client: Option<ClientHost>,
    pub workloads_started: bool,
}

pub struct Simulation {
    scenario: Scenario,
    pub(crate) kernel: Kernel<Payload>,
    pub(crate) overlay: Overlay,
    pub(crate) peers: BTreeMap<PeerId, PeerState>,
    /// Which scenario service each service group was created for.
    pub(crate) service_specs: BTreeMap<GroupId, usize>,
    /// Active load multipliers per service name, with their end time.
    pub(crate) boost: BTreeMap<String, (u32, VirtualTime)>,
    next_query: u64,
    next_epoch: u64,
}

impl Simulation {
    /// Validates the scenario and schedules its timeline and bootstraps.
    pub fn new(scenario: &Scenario) -> Result<Self, SimError> {
        Self::with_seed(scenario, scenario.seed)
    }

    pub fn with_seed(scenario: &Scenario, seed: u64) -> Result<Self, SimError> {
        validate_scenario(scenario).map_err(SimError::Invalid)?;
        let p = &scenario.params;
        let mut net = NetworkModel::new(
            scenario.networks.iter().map(|n| n.latencies()).collect(),
            p.loss_prob.0,
            p.jitter_max,
        );
        let mut peers = BTreeMap::new();
        for spec in &scenario.peers {
            let idx = scenario
                .networks
                .iter()
                .position(|n| n.name == spec.network)
                .expect("validated reference");
            net.attach(spec.id, idx);
            let service = scenario
                .services
                .iter()
                .position(|s| s.workers.contains(&spec.id) || s.rendezvous == Some(spec.id));
            peers.insert(
                spec.id,
                PeerState {
                    role: spec.role,
                    spare: spec.spare,
                    service,
                    alive: true,
                    incarnation: 0,
                    fresh: false,
                    worker: None,
                    rv: None,
                    client: None,
                    workloads_started: false,
                },
            );
        }
        let mut overlay = Overlay::new(p.r_max as usize);
        for id in peers.keys() {
            overlay.set_alive(*id, true);
        }
        let mut sim = Simulation {
            scenario: scenario.clone(),
            kernel: Kernel::new(seed, net),
            overlay,
            peers,
            service_specs: BTreeMap::new(),
            boost: BTreeMap::new(),
            next_query: 1,
            next_epoch: 1,
        };
        for (i, e) in scenario.timeline.iter().enumerate() {
            sim.kernel
                .schedule_event(VirtualTime(e.at), Target::Kernel, Payload::Timeline(i))
                .expect("timeline starts at or after zero");
        }
        let order = |r: RoleHint| match r {
            RoleHint::Rendezvous => 0,
            RoleHint::Worker => 1,
            RoleHint::Client => 2,
        };
        let mut boot: Vec<(u8, PeerId)> = sim
            .peers
            .iter()
            .map(|(id, s)| (order(s.role), *id))
            .collect();
        boot.sort();
        for (_, id) in boot {
            sim.schedule_peer_timer(id, 0, Timer::Bootstrap);
        }
        Ok(sim)
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn now(&self) -> VirtualTime {
        self.kernel.now()
    }

    pub fn trace(&self) -> &Trace {
        &self.kernel.trace
    }

    pub fn into_trace(self) -> Trace {
        self.kernel.trace
    }

    pub fn overlay(&self) -> &Overlay {
        &self.overlay
    }

    pub fn metrics(&self) -> Result<MetricsReport, MetricsError> {
        summarize(&self.kernel.trace)
    }

    /// Current admission threshold and in-flight count of a worker.
    pub fn worker_load(&self, peer: PeerId) -> Option<(u32, u32)> {
        let w = self.peers.get(&peer)?.worker.as_ref()?;
        Some((w.svc.threshold.t, w.svc.in_flight_len()))
    }

    /// Peers currently running an entry point.
    pub fn rendezvous_peers(&self) -> Vec<PeerId> {
        self.peers
            .iter()
            .filter(|(_, s)| s.rv.is_some())
            .map(|(id, _)| *id)
            .collect()
    }

    pub fn is_alive(&self, peer: PeerId) -> bool {
        self.peers.get(&peer).is_some_and(|p| p.alive)
    }

    /// Processes the next event if it is due by `t_end`. Returns false when
    /// nothing is left to do before `t_end`.
    pub fn step(&mut self, t_end: VirtualTime) -> bool {
        match self.kernel.pop_due(t_end) {
            Some(ev) => {
                self.handle(ev);
                true
            }
            None => {
                self.kernel.settle(t_end);
                false
            }
        }
    }

    pub fn run_until(&mut self, t_end: VirtualTime) -> usize {
        let mut n = 0;
        while self.step(t_end) {
            n += 1;
        }
        n
    }

    /// Runs to the scenario's end.
    pub fn run(&mut self) -> usize {
        self.run_until(VirtualTime(self.scenario.duration_ms))
    }

    // ---- plumbing -------------------------------------------------------

    pub(crate) fn params(&self) -> &crate::scenario::Params {
        &self.scenario.params
    }

    pub(crate) fn service_spec(&self, idx: usize) -> &crate::scenario::ServiceSpec {
        &self.scenario.services[idx]
    }

    pub(crate) fn emit(&mut self, ev: EventKind, actor: impl Into<Actor>, d: Fields) {
        let now = self.kernel.now();
        self.kernel.trace.emit(now, ev, actor, d);
    }

    pub(crate) fn with_overlay<R>(&mut self, f: impl FnOnce(&mut Overlay, &mut Ctx<'_>) -> R) -> R {
        let now = self.kernel.now();
        let k = &mut self.kernel;
        let mut ctx = Ctx {
            now,
            trace: &mut k.trace,
            net: &k.network,
        };
        f(&mut self.overlay, &mut ctx)
    }

    pub(crate) fn alive(&self, p: PeerId) -> bool {
        self.peers.get(&p).is_some_and(|s| s.alive)
    }

    pub(crate) fn send(&mut self, from: PeerId, to: PeerId, msg: Msg) {
        if !self.alive(from) {
            return;
        }
        if from == to {
            // Services co-located on one peer talk without the network.
            self.kernel
                .schedule_in(0, Target::Peer(to), Payload::Msg { from, msg });
            return;
        }
        self.kernel
            .send_message(from, to, Payload::Msg { from, msg })
            .expect("every scenario peer is attached to the network");
    }

    pub(crate) fn fresh_epoch(&mut self) -> u64 {
        let e = self.next_epoch;
        self.next_epoch += 1;
        e
    }

    pub(crate) fn next_query_id(&mut self) -> QueryId {
        let q = QueryId(self.next_query);
        self.next_query += 1;
        q
    }

    pub(crate) fn schedule_timer(&mut self, peer: PeerId, delay: u64, epoch: u64, timer: Timer) {
        self.kernel
            .schedule_in(delay, Target::Peer(peer), Payload::Timer { epoch, timer });
    }

    /// A timer bound to the peer's current life.
    pub(crate) fn schedule_peer_timer(&mut self, peer: PeerId, delay: u64, timer: Timer) {
        let epoch = self.peers[&peer].incarnation;
        self.schedule_timer(peer, delay, epoch, timer);
    }

    pub(crate) fn draw_service_ms(&mut self, idx: usize) -> u64 {
        match self.scenario.services[idx].service_time {
            ServiceTime::Constant { ms } => ms,
            ServiceTime::Uniform { lo, hi } => self.kernel.rng.range_inclusive(lo, hi),
        }
    }

    // ---- dispatch -------------------------------------------------------

    fn handle(&mut self, ev: Event<Payload>) {
        match (ev.target, ev.payload) {
            (Target::Kernel, Payload::Timeline(i)) => self.apply_timeline_event(i),
            (Target::Kernel, Payload::Election { subgroup, failed }) => {
                self.run_election(subgroup, failed)
            }
            (
                Target::Peer(p),
                Payload::Timer {
                    timer: Timer::Arrival { workload, n },
                    ..
                },
            ) => self.client_arrival(p, workload, n),
            (Target::Peer(p), payload) => {
                if !self.alive(p) {
                    return;
                }
                match payload {
                    Payload::Msg { from, msg } => self.on_message(p, from, msg),
                    Payload::Timer { epoch, timer } => self.on_timer(p, epoch, timer),
                    _ => unreachable!("kernel payload addressed to a peer"),
                }
            }
            (Target::Kernel, _) => unreachable!("peer payload addressed to the kernel"),
        }
    }

    fn on_message(&mut self, p: PeerId, from: PeerId, msg: Msg) {
        match msg {
            Msg::QuerySubmit(q) => self.rv_on_submit(p, q),
            Msg::QueryForward { query, entry_rv } => self.worker_on_forward(p, query, entry_rv),
            Msg::QueryReply { query_id, worker } => self.client_on_reply(p, query_id, worker),
            Msg::QueryServiced {
                query_id,
                worker,
                entry_rv,
                forwarded,
            } => self.rv_on_serviced(p, query_id, worker, entry_rv, forwarded),
            Msg::QueryCancel { query_id } => self.worker_on_cancel(p, query_id),
            Msg::Busy { query_id, worker } => self.rv_on_busy(p, query_id, worker),
            Msg::Heartbeat(hb) => self.rv_on_heartbeat(p, hb),
            Msg::HeartbeatAck => {
                if let Some(w) = self.peers.get_mut(&p).and_then(|s| s.worker.as_mut()) {
                    w.svc.on_ack(from);
                }
            }
            Msg::RvHeartbeat => self.rv_on_rv_heartbeat(p, from),
            Msg::TableExchange(t) => self.rv_on_exchange(p, from, t),
            Msg::WorkerFailed { peer } => self.rv_on_worker_failed(p, peer),
            Msg::SpawnOrder { service } => self.on_spawn_order(p, service),
            Msg::RvAnnounce { subgroup, old, new } => self.on_rv_announce(p, subgroup, old, new),
            Msg::Register {
                report,
                threshold,
                fresh,
            } => self.rv_on_register(p, from, report, threshold, fresh),
            Msg::Moved { worker } => self.rv_on_moved(p, worker),
            Msg::Adopt(report) => self.rv_on_adopt(p, report),
            Msg::Handover(cache) => self.rv_on_handover(p, *cache),
        }
    }

    fn on_timer(&mut self, p: PeerId, epoch: u64, timer: Timer) {
        let st = &self.peers[&p];
        let current = match timer {
            Timer::Bootstrap
            | Timer::BootstrapCreate
            | Timer::Place
            | Timer::QueryTimeout { .. } => st.incarnation == epoch,
            Timer::Arrival { .. } => true,
            Timer::HeartbeatTick | Timer::Completion(_) | Timer::RvWaitExpired => {
                st.worker.as_ref().is_some_and(|w| w.epoch == epoch)
            }
            Timer::RvTick | Timer::ExchangeTick => st.rv.as_ref().is_some_and(|r| r.epoch == epoch),
        };
        if !current {
            return;
        }
        match timer {
            Timer::Bootstrap => self.on_bootstrap(p, false),
            Timer::BootstrapCreate => self.on_bootstrap(p, true),
            Timer::Place => self.place(p),
            Timer::HeartbeatTick => self.worker_heartbeat_tick(p),
            Timer::Completion(q) => self.worker_complete(p, q),
            Timer::RvWaitExpired => self.worker_rv_wait_expired(p),
            Timer::RvTick => self.rv_tick(p),
            Timer::ExchangeTick => self.rv_exchange_tick(p),
            Timer::Arrival { workload, n } => self.client_arrival(p, workload, n),
            Timer::QueryTimeout { query_id, attempt } => self.client_timeout(p, query_id, attempt),
        }
    }

    // ---- bootstrap and placement ---------------------------------------

    fn on_bootstrap(&mut self, p: PeerId, create: bool) {
        if !create
            && self
                .with_overlay(|o, c| o.find_visible_root(c, p))
                .is_none()
        {
            let wait = self.params().discovery_timeout;
            self.schedule_peer_timer(p, wait, Timer::BootstrapCreate);
            return;
        }
        self.with_overlay(|o, c| o.bootstrap_peer(c, p));
        let st = &self.peers[&p];
        match (st.role, st.service) {
            (RoleHint::Rendezvous | RoleHint::Worker, Some(_)) => self.place(p),
            (RoleHint::Client, _) => self.client_start(p),
            _ => {}
        }
    }

    /// Attaches a peer to its service: as dedicated rendezvous or as worker.
    pub(crate) fn place(&mut self, p: PeerId) {
        let Some(idx) = self.peers[&p].service else {
            return;
        };
        if let Some(sub) = self.overlay.subgroup_led_by(p) {
            // A revived rendezvous nobody replaced resumes its subgroup.
            let service = self
                .overlay
                .service_of(sub)
                .expect("subgroup has a service");
            if self.peers[&p].rv.is_none() {
                self.start_rv(p, idx, service, sub, None);
            }
            if self
                .overlay
                .table(sub)
                .is_some_and(|t| t.registered.contains(&p))
            {
                self.start_worker(p, idx, service, p);
            }
            return;
        }
        let spec = self.service_spec(idx).clone();
        let role = if spec.rendezvous == Some(p) {
            HostRole::Rendezvous
        } else {
            HostRole::Worker
        };
        let res = self.with_overlay(|o, c| {
            o.ensure_group_path(c, p, &spec.path, &spec.name, &spec.query_format, role)
        });
        let retry = self.params().discovery_timeout;
        let placement = match res {
            Ok(pl) => pl,
            Err(_) => {
                self.schedule_peer_timer(p, retry, Timer::Place);
                return;
            }
        };
        self.service_specs.entry(placement.service).or_insert(idx);
        let Some(reg) = placement.registration else {
            self.schedule_peer_timer(p, retry, Timer::Place);
            return;
        };
        let service = placement.service;
        let sub = reg.subgroup();
        if role == HostRole::Rendezvous {
            if self.peers[&p].rv.is_none() {
                self.start_rv(p, idx, service, sub, None);
            }
            return;
        }
        if let Registration::Redirected {
            from_subgroup,
            subgroup,
            new_rv,
            moved: Some(m),
        } = reg
        {
            let old_rv = self.overlay.table(from_subgroup).map(|t| t.rv);
            self.start_rv(m, idx, service, subgroup, None);
            if let Some(old) = old_rv {
                self.send(m, old, Msg::Moved { worker: m });
            }
            if self.peers[&m].worker.is_some() {
                self.worker_connect(m, new_rv);
            }
        }
        let rv = reg.rv();
        if rv == p && self.peers[&p].rv.is_none() {
            self.start_rv(p, idx, service, sub, None);
        }
        self.start_worker(p, idx, service, rv);
    }

    fn on_spawn_order(&mut self, p: PeerId, service: usize) {
        let st = self.peers.get_mut(&p).expect("known peer");
        if st.worker.is_some() || st.rv.is_some() {
            return;
        }
        st.service = Some(service);
        self.place(p);
    }

    // ---- timeline -------------------------------------------------------

    fn apply_timeline_event(&mut self, i: usize) {
        let action = self.scenario.timeline[i].action.clone();
        match action {
            Action::KillPeer(p) => self.kill(p),
            Action::RevivePeer(p) => self.revive(p),
            Action::Partition(sets) => {
                self.kernel
                    .network
                    .set_partition(sets)
                    .expect("validated: sets are disjoint and declared");
                self.with_overlay(|o, c| {
                    o.recompute_visibility(c, crate::overlay::ComponentChange::Split)
                });
            }
            Action::Heal => {
                self.kernel
                    .network
                    .set_partition(Vec::new())
                    .expect("empty partition");
                self.with_overlay(|o, c| {
                    o.recompute_visibility(c, crate::overlay::ComponentChange::Heal)
                });
            }
            Action::InjectLoad {
                service,
                multiplier,
                duration_ms,
            } => {
                let until = self.kernel.now() + duration_ms;
                self.boost.insert(service, (multiplier, until));
            }
        }
    }

    /// Fail-stop: the peer goes silent and loses all volatile state.
    fn kill(&mut self, p: PeerId) {
        let st = self.peers.get_mut(&p).expect("validated reference");
        if !st.alive {
            return;
        }
        st.alive = false;
        st.worker = None;
        st.rv = None;
        st.client = None;
        self.overlay.set_alive(p, false);
    }

    fn revive(&mut self, p: PeerId) {
        let epoch = self.fresh_epoch();
        let st = self.peers.get_mut(&p).expect("validated reference");
        if st.alive {
            return;
        }
        st.alive = true;
        st.incarnation = epoch;
        st.fresh = st.role == RoleHint::Worker;
        self.overlay.set_alive(p, true);
        self.schedule_peer_timer(p, 0, Timer::Bootstrap);
    }

    /// Alive EPM members of a service group other than `except`.
    pub(crate) fn epm_peers(&self, service: GroupId, except: PeerId) -> Vec<PeerId> {
        self.overlay
            .epm_members(service)
            .into_iter()
            .filter(|m| *m != except)
            .collect()
    }
}
