//! Entry Point service: two-step worker selection, the schedule cache, and
//! rescheduling when workers fail.
//!
//! All load comparisons are exact: `a/b < c/d` is evaluated as `a·d < c·b`.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, VecDeque};

use thiserror::Error;

use crate::ids::{GroupId, PeerId, PipeRef, QueryId};
use crate::kernel::VirtualTime;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Query {
    pub query_id: QueryId,
    pub client_pipe: PipeRef,
    pub service_group: GroupId,
    pub payload: String,
    pub submitted_at: VirtualTime,
}

/// A query format is a comma-separated list of field names; a conforming
/// payload lists `name=value` pairs for exactly those fields, in order,
/// separated by `;`.
pub fn payload_matches(format: &str, payload: &str) -> bool {
    let fields: Vec<&str> = format
        .split(',')
        .map(str::trim)
        .filter(|f| !f.is_empty())
        .collect();
    let parts: Vec<&str> = if payload.is_empty() {
        Vec::new()
    } else {
        payload.split(';').collect()
    };
    fields.len() == parts.len()
        && fields
            .iter()
            .zip(&parts)
            .all(|(f, p)| match p.split_once('=') {
                Some((k, v)) => k == *f && !v.is_empty(),
                None => false,
            })
}

/// Builds a conforming payload, every field set to `value`.
pub fn render_payload(format: &str, value: &str) -> String {
    format
        .split(',')
        .map(str::trim)
        .filter(|f| !f.is_empty())
        .map(|f| format!("{f}={value}"))
        .collect::<Vec<_>>()
        .join(";")
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EntryError {
    #[error("query {0} is already known")]
    DuplicateQueryId(QueryId),
    #[error("query {0} does not match the service query format")]
    MalformedQuery(QueryId),
    #[error("query {0} is addressed to another service group")]
    WrongService(QueryId),
    #[error("no alive workers")]
    NoWorkersAlive,
    #[error("every worker is at its threshold")]
    AllSaturated,
}

/// One worker as the scheduler sees it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WorkerLoad {
    pub peer: PeerId,
    pub scheduled: u32,
    pub threshold: u32,
    pub network_delay: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubgroupLoad {
    pub subgroup: GroupId,
    pub workers: Vec<WorkerLoad>,
}

impl SubgroupLoad {
    fn totals(&self) -> (u64, u64) {
        self.workers.iter().fold((0, 0), |(s, t), w| {
            (s + w.scheduled as u64, t + w.threshold as u64)
        })
    }
}

/// Per-subgroup load derived from the merged monitor tables.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GroupLoadView {
    pub subgroups: Vec<SubgroupLoad>,
}

impl GroupLoadView {
    pub fn worker_mut(&mut self, peer: PeerId) -> Option<&mut WorkerLoad> {
        self.subgroups
            .iter_mut()
            .flat_map(|s| s.workers.iter_mut())
            .find(|w| w.peer == peer)
    }

    pub fn remove_worker(&mut self, peer: PeerId) {
        for s in &mut self.subgroups {
            s.workers.retain(|w| w.peer != peer);
        }
    }

    pub fn workers(&self) -> impl Iterator<Item = &WorkerLoad> {
        self.subgroups.iter().flat_map(|s| s.workers.iter())
    }

    /// True when there is at least one worker and all of them are at or over
    /// their threshold.
    pub fn saturated(&self) -> bool {
        let mut any = false;
        for w in self.workers() {
            any = true;
            if w.scheduled < w.threshold {
                return false;
            }
        }
        any
    }
}

/// Compares `a_num/a_den` with `b_num/b_den` without division. Zero
/// denominators sort last.
fn cmp_ratio(a_num: u64, a_den: u64, b_num: u64, b_den: u64) -> Ordering {
    match (a_den, b_den) {
        (0, 0) => Ordering::Equal,
        (0, _) => Ordering::Greater,
        (_, 0) => Ordering::Less,
        _ => (a_num * b_den).cmp(&(b_num * a_den)),
    }
}

/// First step: the subgroup with the smallest aggregate scheduled/threshold
/// ratio, ties to the lowest group id.
pub fn select_worker_group(view: &GroupLoadView) -> Result<GroupId, EntryError> {
    view.subgroups
        .iter()
        .filter(|s| !s.workers.is_empty())
        .min_by(|a, b| {
            let (sa, ta) = a.totals();
            let (sb, tb) = b.totals();
            cmp_ratio(sa, ta, sb, tb).then(a.subgroup.cmp(&b.subgroup))
        })
        .map(|s| s.subgroup)
        .ok_or(EntryError::NoWorkersAlive)
}

/// Second step: among workers below threshold, the smallest
/// scheduled/threshold ratio, then the lowest network delay, then the
/// lowest peer id.
pub fn select_worker(rows: &[WorkerLoad]) -> Result<PeerId, EntryError> {
    rows.iter()
        .filter(|w| w.scheduled < w.threshold)
        .min_by(|a, b| {
            cmp_ratio(
                a.scheduled as u64,
                a.threshold as u64,
                b.scheduled as u64,
                b.threshold as u64,
            )
            .then(a.network_delay.cmp(&b.network_delay))
            .then(a.peer.cmp(&b.peer))
        })
        .map(|w| w.peer)
        .ok_or(EntryError::AllSaturated)
}

/// Both steps. When the chosen subgroup has no room the remaining
/// subgroups are tried in the same order before giving up.
pub fn select(view: &GroupLoadView) -> Result<WorkerLoad, EntryError> {
    let mut remaining = view.clone();
    loop {
        let sg = select_worker_group(&remaining).map_err(|e| match (e, view.workers().next()) {
            (EntryError::NoWorkersAlive, Some(_)) => EntryError::AllSaturated,
            (e, _) => e,
        })?;
        let idx = remaining
            .subgroups
            .iter()
            .position(|s| s.subgroup == sg)
            .expect("selected from this view");
        match select_worker(&remaining.subgroups[idx].workers) {
            Ok(peer) => {
                return Ok(*remaining
                    .workers()
                    .find(|w| w.peer == peer)
                    .expect("selected from this view"));
            }
            Err(_) => {
                remaining.subgroups.remove(idx);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryState {
    Scheduled,
    Serviced,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScheduleEntry {
    pub query: Query,
    pub assigned_worker: PeerId,
    pub state: EntryState,
    pub assigned_at: VirtualTime,
    /// Earlier assignees that may still be working on it.
    pub previous: Vec<PeerId>,
    /// Taken over from a failed rendezvous during a rebuild.
    pub adopted: bool,
}

/// In-flight queries and the FIFO of queries waiting for capacity. A query is
/// in `entries` or `pending`, never both.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ScheduleCache {
    entries: BTreeMap<QueryId, ScheduleEntry>,
    pending: VecDeque<Query>,
    serviced: BTreeSet<QueryId>,
    assigned_before: BTreeSet<QueryId>,
}

impl ScheduleCache {
    pub fn entries(&self) -> impl Iterator<Item = &ScheduleEntry> {
        self.entries.values()
    }

    pub fn entry(&self, id: QueryId) -> Option<&ScheduleEntry> {
        self.entries.get(&id)
    }

    pub fn pending(&self) -> impl Iterator<Item = &Query> {
        self.pending.iter()
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty() && self.pending.is_empty()
    }

    pub fn knows(&self, id: QueryId) -> bool {
        self.entries.contains_key(&id)
            || self.serviced.contains(&id)
            || self.pending.iter().any(|q| q.query_id == id)
    }

    pub fn was_serviced(&self, id: QueryId) -> bool {
        self.serviced.contains(&id)
    }

    /// Scheduled entries per worker.
    pub fn scheduled_on(&self, worker: PeerId) -> u32 {
        self.entries
            .values()
            .filter(|e| e.assigned_worker == worker && e.state == EntryState::Scheduled)
            .count() as u32
    }

    /// Takes over another cache's entries and queue; the queue is appended
    /// after this one's.
    pub fn absorb(&mut self, other: ScheduleCache) {
        for (id, mut e) in other.entries {
            if !self.entries.contains_key(&id) && !self.serviced.contains(&id) {
                e.adopted = true;
                self.entries.insert(id, e);
            }
        }
        for q in other.pending {
            if !self.knows(q.query_id) {
                self.pending.push_back(q);
            }
        }
        self.serviced.extend(other.serviced);
        self.assigned_before.extend(other.assigned_before);
    }

    fn assign(&mut self, query: Query, worker: PeerId, now: VirtualTime, adopted: bool) {
        self.assigned_before.insert(query.query_id);
        let previous = match self.entries.remove(&query.query_id) {
            Some(mut old) => {
                old.previous.push(old.assigned_worker);
                old.previous
            }
            None => Vec::new(),
        };
        self.entries.insert(
            query.query_id,
            ScheduleEntry {
                query,
                assigned_worker: worker,
                state: EntryState::Scheduled,
                assigned_at: now,
                previous,
                adopted,
            },
        );
    }
}

/// Result of routing one query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Dispatch {
    Scheduled {
        query: Query,
        worker: PeerId,
        /// The worker's scheduled count and threshold in the view the
        /// decision was made on.
        scheduled: u32,
        threshold: u32,
        /// True when this is not the query's first assignment here.
        reassigned: bool,
    },
    Enqueued {
        query_id: QueryId,
        depth: usize,
        reassigned: bool,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ServicedOutcome {
    /// Entry removed; `cancel` lists other assignees to stop.
    Removed {
        cancel: Vec<PeerId>,
    },
    Unknown,
}

/// A schedule entry as carried in table exchanges.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SnapshotEntry {
    pub query: Query,
    pub worker: PeerId,
    pub entry_rv: PeerId,
}

/// What a worker tells a new rendezvous when it (re-)registers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WorkerReport {
    pub worker: PeerId,
    /// In-progress queries and the rendezvous that scheduled each.
    pub in_flight: Vec<(Query, PeerId)>,
    /// Queries finished while no rendezvous was reachable.
    pub serviced: Vec<QueryId>,
}

pub struct EntryPoint {
    pub rv: PeerId,
    pub service: GroupId,
    query_format: String,
    cache: ScheduleCache,
}

impl EntryPoint {
    pub fn new(rv: PeerId, service: GroupId, query_format: impl Into<String>) -> Self {
        Self {
            rv,
            service,
            query_format: query_format.into(),
            cache: ScheduleCache::default(),
        }
    }

    pub fn with_cache(mut self, cache: ScheduleCache) -> Self {
        self.cache = cache;
        self
    }

    pub fn cache(&self) -> &ScheduleCache {
        &self.cache
    }

    /// Snapshot of this entry point's in-flight assignments for exchange.
    pub fn snapshot(&self) -> Vec<SnapshotEntry> {
        self.cache
            .entries()
            .map(|e| SnapshotEntry {
                query: e.query.clone(),
                worker: e.assigned_worker,
                entry_rv: self.rv,
            })
            .collect()
    }

    fn route(
        &mut self,
        query: Query,
        view: &mut GroupLoadView,
        now: VirtualTime,
        reassigned: bool,
    ) -> Dispatch {
        match select(view) {
            Ok(w) => {
                if let Some(v) = view.worker_mut(w.peer) {
                    v.scheduled += 1;
                }
                self.cache.assign(query.clone(), w.peer, now, false);
                Dispatch::Scheduled {
                    query,
                    worker: w.peer,
                    scheduled: w.scheduled,
                    threshold: w.threshold,
                    reassigned,
                }
            }
            Err(_) => {
                let query_id = query.query_id;
                self.cache.entries.remove(&query_id);
                self.cache.pending.push_back(query);
                Dispatch::Enqueued {
                    query_id,
                    depth: self.cache.pending.len(),
                    reassigned,
                }
            }
        }
    }

    /// Routes a fresh query: best subgroup, then best worker. With every
    /// worker saturated the query waits in the pending queue.
    pub fn handle_query(
        &mut self,
        query: Query,
        view: &mut GroupLoadView,
        now: VirtualTime,
    ) -> Result<Dispatch, EntryError> {
        if query.service_group != self.service {
            return Err(EntryError::WrongService(query.query_id));
        }
        if self.cache.knows(query.query_id) {
            return Err(EntryError::DuplicateQueryId(query.query_id));
        }
        if !payload_matches(&self.query_format, &query.payload) {
            return Err(EntryError::MalformedQuery(query.query_id));
        }
        Ok(self.route(query, view, now, false))
    }

    /// Dispatches queued queries, oldest first, while capacity lasts.
    pub fn dispatch_pending(
        &mut self,
        view: &mut GroupLoadView,
        now: VirtualTime,
    ) -> Vec<Dispatch> {
        let mut out = Vec::new();
        while let Some(q) = self.cache.pending.front().cloned() {
            if select(view).is_err() {
                break;
            }
            self.cache.pending.pop_front();
            let reassigned = self.cache.assigned_before.contains(&q.query_id);
            out.push(self.route(q, view, now, reassigned));
        }
        out
    }

    /// Routes a query taken over from elsewhere whose worker is gone.
    pub fn reroute(
        &mut self,
        query: Query,
        view: &mut GroupLoadView,
        now: VirtualTime,
    ) -> Dispatch {
        self.cache.assigned_before.insert(query.query_id);
        self.route(query, view, now, true)
    }

    pub fn absorb(&mut self, cache: ScheduleCache) {
        self.cache.absorb(cache);
    }

    /// Hands the whole cache over, leaving this one empty.
    pub fn take_cache(&mut self) -> ScheduleCache {
        std::mem::take(&mut self.cache)
    }

    /// Removes a serviced query. If it had been rescheduled, every other
    /// assignee gets a cancel.
    pub fn handle_query_serviced(&mut self, query_id: QueryId, worker: PeerId) -> ServicedOutcome {
        match self.cache.entries.remove(&query_id) {
            Some(e) => {
                self.cache.serviced.insert(query_id);
                let mut cancel: Vec<PeerId> = e
                    .previous
                    .iter()
                    .copied()
                    .chain([e.assigned_worker])
                    .filter(|p| *p != worker)
                    .collect();
                cancel.sort();
                cancel.dedup();
                ServicedOutcome::Removed { cancel }
            }
            None => ServicedOutcome::Unknown,
        }
    }

    /// Re-runs selection for every query scheduled on `worker`, keeping the
    /// query id. `view` must already exclude the failed worker.
    pub fn handle_worker_failure(
        &mut self,
        worker: PeerId,
        view: &mut GroupLoadView,
        now: VirtualTime,
    ) -> Vec<Dispatch> {
        view.remove_worker(worker);
        let victims: Vec<Query> = self
            .cache
            .entries
            .values()
            .filter(|e| e.assigned_worker == worker && e.state == EntryState::Scheduled)
            .map(|e| e.query.clone())
            .collect();
        victims
            .into_iter()
            .map(|q| self.route(q, view, now, true))
            .collect()
    }

    /// A worker refused a query it had no room for: pick another one.
    pub fn handle_busy(
        &mut self,
        query_id: QueryId,
        worker: PeerId,
        view: &mut GroupLoadView,
        now: VirtualTime,
    ) -> Option<Dispatch> {
        let e = self.cache.entries.get(&query_id)?;
        if e.assigned_worker != worker {
            return None;
        }
        let query = e.query.clone();
        if let Some(w) = view.worker_mut(worker) {
            w.scheduled = w.scheduled.max(w.threshold);
        }
        Some(self.route(query, view, now, true))
    }

    /// Folds a (re-)registering worker's report into an adopted schedule:
    /// adopted entries on that worker it no longer holds are dropped as done,
    /// and in-flight queries whose scheduler is gone are adopted.
    pub fn absorb_report(
        &mut self,
        report: &WorkerReport,
        scheduler_gone: impl Fn(PeerId) -> bool,
        now: VirtualTime,
    ) {
        let held: BTreeSet<QueryId> = report.in_flight.iter().map(|(q, _)| q.query_id).collect();
        self.cache.entries.retain(|id, e| {
            !(e.adopted && e.assigned_worker == report.worker && !held.contains(id))
        });
        for id in &report.serviced {
            if self.cache.entries.remove(id).is_some() {
                self.cache.serviced.insert(*id);
            }
        }
        for (q, entry_rv) in &report.in_flight {
            if self.cache.entries.contains_key(&q.query_id)
                || self.cache.serviced.contains(&q.query_id)
            {
                continue;
            }
            if *entry_rv == self.rv || scheduler_gone(*entry_rv) {
                self.cache.assign(q.clone(), report.worker, now, true);
            }
        }
    }
}

/// Outcome of rebuilding a failed rendezvous' schedule.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Rebuilt {
    pub cache: ScheduleCache,
    /// Queries whose worker is dead and that must be routed again.
    pub reschedule: Vec<Query>,
}

/// Reconstructs the schedule of `failed_rv` from the EPM members' last
/// exchanged tables (oldest first; later tables win) and from worker
/// reports. Only unprocessed queries survive.
pub fn rebuild_schedule(
    failed_rv: PeerId,
    tables: &[Vec<SnapshotEntry>],
    reports: &[WorkerReport],
    is_dead: impl Fn(PeerId) -> bool,
    now: VirtualTime,
) -> Rebuilt {
    let mut found: BTreeMap<QueryId, SnapshotEntry> = BTreeMap::new();
    for table in tables {
        for e in table.iter().filter(|e| e.entry_rv == failed_rv) {
            found.insert(e.query.query_id, e.clone());
        }
    }
    for r in reports {
        for (q, entry_rv) in &r.in_flight {
            if *entry_rv == failed_rv {
                found.insert(
                    q.query_id,
                    SnapshotEntry {
                        query: q.clone(),
                        worker: r.worker,
                        entry_rv: *entry_rv,
                    },
                );
            }
        }
    }
    let done: BTreeSet<QueryId> = reports
        .iter()
        .flat_map(|r| r.serviced.iter().copied())
        .collect();
    let mut out = Rebuilt::default();
    for (id, e) in found {
        if done.contains(&id) {
            out.cache.serviced.insert(id);
            continue;
        }
        if is_dead(e.worker) {
            out.reschedule.push(e.query);
        } else {
            out.cache.assign(e.query, e.worker, now, true);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(id: u64) -> Query {
        Query {
            query_id: QueryId(id),
            client_pipe: PipeRef::new(PeerId(100), 1),
            service_group: GroupId(1),
            payload: "key=1".into(),
            submitted_at: VirtualTime(0),
        }
    }

    fn wl(peer: u32, scheduled: u32, threshold: u32, delay: u64) -> WorkerLoad {
        WorkerLoad {
            peer: PeerId(peer),
            scheduled,
            threshold,
            network_delay: delay,
        }
    }

    fn view(groups: &[(u32, Vec<WorkerLoad>)]) -> GroupLoadView {
        GroupLoadView {
            subgroups: groups
                .iter()
                .map(|(g, w)| SubgroupLoad {
                    subgroup: GroupId(*g),
                    workers: w.clone(),
                })
                .collect(),
        }
    }

    fn ep() -> EntryPoint {
        EntryPoint::new(PeerId(1), GroupId(1), "key")
    }

    #[test]
    fn payload_format() {
        assert!(payload_matches("key", "key=1"));
        assert!(payload_matches("table, key", "table=a;key=2"));
        assert!(!payload_matches("key", "id=1"));
        assert!(!payload_matches("key", "key="));
        assert!(!payload_matches("a,b", "b=1;a=1"));
        assert!(payload_matches("a,b", &render_payload("a,b", "7")));
    }

    #[test]
    fn group_selection_by_aggregate_ratio() {
        let v = view(&[(1, vec![wl(1, 3, 10, 0)]), (2, vec![wl(2, 2, 10, 0)])]);
        assert_eq!(select_worker_group(&v), Ok(GroupId(2)));
        let v = view(&[(1, vec![wl(1, 1, 2, 0)]), (2, vec![wl(2, 5, 10, 0)])]);
        assert_eq!(select_worker_group(&v), Ok(GroupId(1)));
        let v = view(&[(7, vec![wl(1, 4, 5, 0)])]);
        assert_eq!(select_worker_group(&v), Ok(GroupId(7)));
        assert_eq!(
            select_worker_group(&view(&[])),
            Err(EntryError::NoWorkersAlive)
        );
    }

    #[test]
    fn worker_selection_tie_breaks() {
        assert_eq!(
            select_worker(&[wl(1, 2, 10, 0), wl(2, 1, 10, 0)]),
            Ok(PeerId(2))
        );
        assert_eq!(
            select_worker(&[wl(1, 1, 5, 8), wl(2, 2, 10, 3)]),
            Ok(PeerId(2))
        );
        assert_eq!(
            select_worker(&[wl(5, 0, 5, 0), wl(4, 0, 5, 0)]),
            Ok(PeerId(4))
        );
        assert_eq!(
            select_worker(&[wl(1, 5, 5, 0), wl(2, 3, 3, 0)]),
            Err(EntryError::AllSaturated)
        );
    }

    #[test]
    fn fresh_query_goes_to_lowest_id_on_tie() {
        let mut e = ep();
        let mut v = view(&[(1, vec![wl(3, 0, 5, 0), wl(2, 0, 5, 0)])]);
        let d = e.handle_query(q(1), &mut v, VirtualTime(0)).unwrap();
        assert!(matches!(
            d,
            Dispatch::Scheduled {
                worker: PeerId(2),
                scheduled: 0,
                threshold: 5,
                ..
            }
        ));
        assert_eq!(v.worker_mut(PeerId(2)).unwrap().scheduled, 1);
    }

    #[test]
    fn saturated_view_enqueues() {
        let mut e = ep();
        let mut v = view(&[(1, vec![wl(2, 5, 5, 0)])]);
        assert_eq!(
            e.handle_query(q(1), &mut v, VirtualTime(0)),
            Ok(Dispatch::Enqueued {
                query_id: QueryId(1),
                depth: 1,
                reassigned: false
            })
        );
        assert_eq!(e.cache().pending_len(), 1);
        assert_eq!(e.cache().len(), 0);
    }

    #[test]
    fn duplicate_and_malformed() {
        let mut e = ep();
        let mut v = view(&[(1, vec![wl(2, 0, 5, 0)])]);
        e.handle_query(q(1), &mut v, VirtualTime(0)).unwrap();
        assert_eq!(
            e.handle_query(q(1), &mut v, VirtualTime(0)),
            Err(EntryError::DuplicateQueryId(QueryId(1)))
        );
        let mut bad = q(2);
        bad.payload = "nope".into();
        assert_eq!(
            e.handle_query(bad, &mut v, VirtualTime(0)),
            Err(EntryError::MalformedQuery(QueryId(2)))
        );
    }

    #[test]
    fn serviced_frees_capacity_for_pending_head() {
        let mut e = ep();
        let mut v = view(&[(1, vec![wl(2, 0, 1, 0)])]);
        e.handle_query(q(1), &mut v, VirtualTime(0)).unwrap();
        assert!(matches!(
            e.handle_query(q(2), &mut v, VirtualTime(0)),
            Ok(Dispatch::Enqueued { .. })
        ));
        assert_eq!(
            e.handle_query_serviced(QueryId(1), PeerId(2)),
            ServicedOutcome::Removed { cancel: vec![] }
        );
        let mut v = view(&[(1, vec![wl(2, 0, 1, 0)])]);
        let out = e.dispatch_pending(&mut v, VirtualTime(5));
        assert_eq!(out.len(), 1);
        assert!(
            matches!(&out[0], Dispatch::Scheduled { query, worker: PeerId(2), .. } if query.query_id == QueryId(2))
        );
        assert_eq!(e.cache().pending_len(), 0);
    }

    #[test]
    fn unknown_serviced_is_reported() {
        let mut e = ep();
        assert_eq!(
            e.handle_query_serviced(QueryId(9), PeerId(2)),
            ServicedOutcome::Unknown
        );
    }

    #[test]
    fn serviced_after_reschedule_cancels_other_assignee() {
        let mut e = ep();
        let mut v = view(&[(1, vec![wl(2, 0, 5, 0), wl(3, 1, 5, 0)])]);
        e.handle_query(q(1), &mut v, VirtualTime(0)).unwrap();
        let out = e.handle_worker_failure(PeerId(2), &mut v, VirtualTime(10));
        assert!(matches!(
            &out[0],
            Dispatch::Scheduled {
                worker: PeerId(3),
                reassigned: true,
                ..
            }
        ));
        // the first worker was slow, not dead, and answers first
        assert_eq!(
            e.handle_query_serviced(QueryId(1), PeerId(2)),
            ServicedOutcome::Removed {
                cancel: vec![PeerId(3)]
            }
        );
        assert!(e.cache().was_serviced(QueryId(1)));
        let mut v = view(&[(1, vec![wl(3, 0, 5, 0)])]);
        assert_eq!(
            e.handle_query(q(1), &mut v, VirtualTime(20)),
            Err(EntryError::DuplicateQueryId(QueryId(1))),
            "a serviced query is never assigned again"
        );
    }

    #[test]
    fn failure_reschedules_every_entry() {
        let mut e = ep();
        let mut v = view(&[(1, vec![wl(2, 0, 5, 0)]), (2, vec![wl(3, 0, 5, 0)])]);
        for i in 1..=3 {
            e.handle_query(q(i), &mut v, VirtualTime(0)).unwrap();
        }
        let on2 = e.cache().scheduled_on(PeerId(2));
        let out = e.handle_worker_failure(PeerId(2), &mut v, VirtualTime(1));
        assert_eq!(out.len() as u32, on2);
        assert_eq!(e.cache().scheduled_on(PeerId(2)), 0);
        assert_eq!(
            e.handle_worker_failure(PeerId(9), &mut v, VirtualTime(1))
                .len(),
            0
        );
    }

    #[test]
    fn failure_of_only_worker_moves_everything_to_pending() {
        let mut e = ep();
        let mut v = view(&[(1, vec![wl(2, 0, 5, 0)])]);
        for i in 1..=3 {
            e.handle_query(q(i), &mut v, VirtualTime(0)).unwrap();
        }
        let out = e.handle_worker_failure(PeerId(2), &mut v, VirtualTime(1));
        assert!(out.iter().all(|d| matches!(
            d,
            Dispatch::Enqueued {
                reassigned: true,
                ..
            }
        )));
        assert_eq!(e.cache().pending_len(), 3);
        assert_eq!(e.cache().len(), 0);
        let mut v = view(&[(1, vec![wl(3, 0, 5, 0)])]);
        let out = e.dispatch_pending(&mut v, VirtualTime(2));
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|d| matches!(
            d,
            Dispatch::Scheduled {
                reassigned: true,
                ..
            }
        )));
    }

    fn snap(id: u64, worker: u32, rv: u32) -> SnapshotEntry {
        SnapshotEntry {
            query: q(id),
            worker: PeerId(worker),
            entry_rv: PeerId(rv),
        }
    }

    #[test]
    fn rebuild_from_one_surviving_table() {
        let tables = vec![vec![snap(1, 5, 9), snap(2, 6, 9), snap(3, 6, 8)]];
        let r = rebuild_schedule(PeerId(9), &tables, &[], |_| false, VirtualTime(0));
        assert_eq!(r.cache.len(), 2);
        assert!(r.reschedule.is_empty());
        assert!(r.cache.entries().all(|e| e.adopted));
    }

    #[test]
    fn rebuild_drops_queries_serviced_during_outage() {
        let tables = vec![vec![snap(1, 5, 9), snap(2, 5, 9)]];
        let report = WorkerReport {
            worker: PeerId(5),
            in_flight: vec![(q(2), PeerId(9))],
            serviced: vec![QueryId(1)],
        };
        let r = rebuild_schedule(PeerId(9), &tables, &[report], |_| false, VirtualTime(0));
        assert_eq!(
            r.cache
                .entries()
                .map(|e| e.query.query_id)
                .collect::<Vec<_>>(),
            [QueryId(2)]
        );
        assert!(r.cache.was_serviced(QueryId(1)));
    }

    #[test]
    fn rebuild_reschedules_dead_workers_queries() {
        let tables = vec![vec![snap(1, 5, 9), snap(2, 6, 9)]];
        let r = rebuild_schedule(PeerId(9), &tables, &[], |p| p == PeerId(6), VirtualTime(0));
        assert_eq!(r.cache.len(), 1);
        assert_eq!(r.reschedule, [q(2)]);
    }

    #[test]
    fn rebuild_without_sources_is_empty() {
        let r = rebuild_schedule(PeerId(9), &[], &[], |_| false, VirtualTime(0));
        assert!(r.cache.is_empty());
        assert!(r.reschedule.is_empty());
    }

    #[test]
    fn absorb_report_reconciles_adopted_entries() {
        let tables = vec![vec![snap(1, 5, 9), snap(2, 5, 9)]];
        let rebuilt = rebuild_schedule(PeerId(9), &tables, &[], |_| false, VirtualTime(0));
        let mut e = EntryPoint::new(PeerId(5), GroupId(1), "key").with_cache(rebuilt.cache);
        let report = WorkerReport {
            worker: PeerId(5),
            in_flight: vec![(q(2), PeerId(9)), (q(3), PeerId(9)), (q(4), PeerId(7))],
            serviced: vec![],
        };
        e.absorb_report(&report, |p| p == PeerId(9), VirtualTime(1));
        let ids: Vec<_> = e.cache().entries().map(|e| e.query.query_id).collect();
        assert_eq!(ids, [QueryId(2), QueryId(3)]);
    }
}
