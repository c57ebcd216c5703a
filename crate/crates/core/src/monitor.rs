//! Monitoring service: heartbeat ingestion, failure detection, table
//! exchange across the EPM group, and replacement spawning.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::entrypoint::{GroupLoadView, ScheduleCache, SnapshotEntry, SubgroupLoad, WorkerLoad};
use crate::ids::{GroupId, PeerId};
use crate::kernel::VirtualTime;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Heartbeat {
    pub from: PeerId,
    pub sent_at: VirtualTime,
    pub threshold: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MonitorRow {
    pub peer: PeerId,
    /// In-flight queries in the local scheduler's view.
    pub load: u32,
    pub queries_scheduled: u32,
    pub network_delay: u64,
    pub last_heartbeat: VirtualTime,
    pub threshold: u32,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MonitorError {
    #[error("peer {0} is not registered here")]
    UnknownWorker(PeerId),
    #[error("no eligible host")]
    NoEligibleHost,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MonitorTable {
    pub subgroup: GroupId,
    pub rows: BTreeMap<PeerId, MonitorRow>,
    pub slot: u64,
}

impl MonitorTable {
    pub fn new(subgroup: GroupId) -> Self {
        Self {
            subgroup,
            rows: BTreeMap::new(),
            slot: 0,
        }
    }

    /// Adds a row for a newly registered worker; its first heartbeat is
    /// counted from `now`.
    pub fn admit(&mut self, peer: PeerId, threshold: u32, now: VirtualTime) {
        self.rows.entry(peer).or_insert(MonitorRow {
            peer,
            load: 0,
            queries_scheduled: 0,
            network_delay: 0,
            last_heartbeat: now,
            threshold,
        });
    }

    pub fn remove(&mut self, peer: PeerId) -> Option<MonitorRow> {
        self.rows.remove(&peer)
    }

    pub fn record_heartbeat(
        &mut self,
        hb: &Heartbeat,
        now: VirtualTime,
        cache: &ScheduleCache,
    ) -> Result<MonitorRow, MonitorError> {
        let row = self
            .rows
            .get_mut(&hb.from)
            .ok_or(MonitorError::UnknownWorker(hb.from))?;
        row.last_heartbeat = now;
        row.threshold = hb.threshold;
        row.network_delay = now.as_millis().saturating_sub(hb.sent_at.as_millis());
        row.queries_scheduled = cache.scheduled_on(hb.from);
        row.load = row.queries_scheduled;
        Ok(*row)
    }

    /// Rows silent for more than `k * period` are removed and returned.
    pub fn detect_failures(&mut self, now: VirtualTime, period: u64, k: u32) -> Vec<PeerId> {
        let limit = period * u64::from(k);
        let failed: Vec<PeerId> = self
            .rows
            .values()
            .filter(|r| now.as_millis().saturating_sub(r.last_heartbeat.as_millis()) > limit)
            .map(|r| r.peer)
            .collect();
        for p in &failed {
            self.rows.remove(p);
        }
        failed
    }
}

/// Last-seen times of the other rendezvous peers in the EPM group.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PeerLiveness {
    last: BTreeMap<PeerId, VirtualTime>,
}

impl PeerLiveness {
    pub fn watch(&mut self, peer: PeerId, now: VirtualTime) {
        self.last.entry(peer).or_insert(now);
    }

    pub fn heard(&mut self, peer: PeerId, now: VirtualTime) {
        self.last.insert(peer, now);
    }

    pub fn forget(&mut self, peer: PeerId) {
        self.last.remove(&peer);
    }

    pub fn watched(&self) -> impl Iterator<Item = PeerId> + '_ {
        self.last.keys().copied()
    }

    pub fn detect_failures(&mut self, now: VirtualTime, period: u64, k: u32) -> Vec<PeerId> {
        let limit = period * u64::from(k);
        let failed: Vec<PeerId> = self
            .last
            .iter()
            .filter(|(_, t)| now.as_millis().saturating_sub(t.as_millis()) > limit)
            .map(|(p, _)| *p)
            .collect();
        for p in &failed {
            self.last.remove(p);
        }
        failed
    }
}

/// A table as broadcast in an exchange round.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExchangedTable {
    pub from: PeerId,
    pub table: MonitorTable,
    pub schedule: Vec<SnapshotEntry>,
}

/// Every EPM member's last table, keyed by the sending rendezvous.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MergedView {
    tables: BTreeMap<PeerId, ExchangedTable>,
}

impl MergedView {
    /// Newer slots win; an older or equal slot is discarded. Returns
    /// whether the table was taken.
    pub fn merge(&mut self, incoming: ExchangedTable) -> bool {
        match self.tables.get(&incoming.from) {
            Some(have) if have.table.slot >= incoming.table.slot => false,
            _ => {
                self.tables.insert(incoming.from, incoming);
                true
            }
        }
    }

    pub fn drop_rv(&mut self, rv: PeerId) -> Option<ExchangedTable> {
        self.tables.remove(&rv)
    }

    pub fn get(&self, rv: PeerId) -> Option<&ExchangedTable> {
        self.tables.get(&rv)
    }

    pub fn tables(&self) -> impl Iterator<Item = &ExchangedTable> {
        self.tables.values()
    }

    /// Rows keyed by (subgroup, peer) across all tables.
    pub fn rows(&self) -> BTreeMap<(GroupId, PeerId), MonitorRow> {
        let mut out = BTreeMap::new();
        for t in self.tables.values() {
            for r in t.table.rows.values() {
                out.insert((t.table.subgroup, r.peer), *r);
            }
        }
        out
    }
}

/// The monitoring half of a rendezvous peer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MonitorService {
    pub rv: PeerId,
    pub table: MonitorTable,
    pub merged: MergedView,
    pub rv_liveness: PeerLiveness,
    saturated_slots: u32,
}

impl MonitorService {
    pub fn new(rv: PeerId, subgroup: GroupId) -> Self {
        Self {
            rv,
            table: MonitorTable::new(subgroup),
            merged: MergedView::default(),
            rv_liveness: PeerLiveness::default(),
            saturated_slots: 0,
        }
    }

    /// Bumps the slot, stores the outgoing table in the merged view and
    /// returns it for broadcast.
    pub fn exchange(&mut self, slot: u64, schedule: Vec<SnapshotEntry>) -> ExchangedTable {
        self.table.slot = slot;
        let out = ExchangedTable {
            from: self.rv,
            table: self.table.clone(),
            schedule,
        };
        self.merged.merge(out.clone());
        out
    }

    /// The scheduler's view: live rows for the local subgroup, exchanged
    /// rows for the others. Scheduled counts add the local cache to what
    /// other entry points last reported.
    pub fn load_view(&self, cache: &ScheduleCache, dead: &BTreeSet<PeerId>) -> GroupLoadView {
        let remote_scheduled = |w: PeerId| -> u32 {
            self.merged
                .tables()
                .filter(|t| t.from != self.rv)
                .flat_map(|t| t.schedule.iter())
                .filter(|e| e.worker == w)
                .count() as u32
        };
        let mut subgroups: BTreeMap<GroupId, Vec<WorkerLoad>> = BTreeMap::new();
        let mut seen = BTreeSet::new();
        let mut add = |sg: GroupId, r: &MonitorRow| {
            if dead.contains(&r.peer) || !seen.insert(r.peer) {
                return;
            }
            subgroups.entry(sg).or_default().push(WorkerLoad {
                peer: r.peer,
                scheduled: cache.scheduled_on(r.peer) + remote_scheduled(r.peer),
                threshold: r.threshold,
                network_delay: r.network_delay,
            });
        };
        for r in self.table.rows.values() {
            add(self.table.subgroup, r);
        }
        for t in self.merged.tables().filter(|t| t.from != self.rv) {
            for r in t.table.rows.values() {
                add(t.table.subgroup, r);
            }
        }
        GroupLoadView {
            subgroups: subgroups
                .into_iter()
                .map(|(subgroup, workers)| SubgroupLoad { subgroup, workers })
                .collect(),
        }
    }

    /// Counts consecutive saturated exchange slots; true once `s` is
    /// reached, after which the count restarts.
    pub fn note_slot(&mut self, saturated: bool, s: u32) -> bool {
        if !saturated {
            self.saturated_slots = 0;
            return false;
        }
        self.saturated_slots += 1;
        if self.saturated_slots >= s {
            self.saturated_slots = 0;
            true
        } else {
            false
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ServiceKind {
    EntryPoint,
    Monitoring,
    WorkerService,
}

impl ServiceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ServiceKind::EntryPoint => "entry_point",
            ServiceKind::Monitoring => "monitoring",
            ServiceKind::WorkerService => "worker_service",
        }
    }
}

/// Lowest eligible peer in the pool.
pub fn spawn_replacement(
    pool: &BTreeSet<PeerId>,
    eligible: impl Fn(PeerId) -> bool,
) -> Result<PeerId, MonitorError> {
    pool.iter()
        .copied()
        .find(|p| eligible(*p))
        .ok_or(MonitorError::NoEligibleHost)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hb(from: u32, sent: u64, t: u32) -> Heartbeat {
        Heartbeat {
            from: PeerId(from),
            sent_at: VirtualTime(sent),
            threshold: t,
        }
    }

    #[test]
    fn heartbeat_sets_delay() {
        let mut t = MonitorTable::new(GroupId(1));
        t.admit(PeerId(2), 10, VirtualTime(0));
        let r = t
            .record_heartbeat(&hb(2, 100, 8), VirtualTime(103), &ScheduleCache::default())
            .unwrap();
        assert_eq!(r.network_delay, 3);
        assert_eq!(r.threshold, 8);
        assert_eq!(r.last_heartbeat, VirtualTime(103));
    }

    #[test]
    fn heartbeat_from_stranger_is_rejected() {
        let mut t = MonitorTable::new(GroupId(1));
        assert_eq!(
            t.record_heartbeat(&hb(9, 0, 1), VirtualTime(1), &ScheduleCache::default()),
            Err(MonitorError::UnknownWorker(PeerId(9)))
        );
    }

    #[test]
    fn detection_threshold_is_strict() {
        let mut t = MonitorTable::new(GroupId(1));
        t.admit(PeerId(2), 10, VirtualTime(0));
        t.admit(PeerId(3), 10, VirtualTime(200));
        assert!(t.detect_failures(VirtualTime(1500), 500, 3).is_empty());
        assert_eq!(t.detect_failures(VirtualTime(1600), 500, 3), [PeerId(2)]);
        assert!(t.rows.contains_key(&PeerId(3)));
        assert_eq!(t.detect_failures(VirtualTime(1600), 500, 3), []);
    }

    #[test]
    fn two_rvs_converge_on_both_subgroups() {
        let mut a = MonitorService::new(PeerId(1), GroupId(10));
        let mut b = MonitorService::new(PeerId(2), GroupId(11));
        a.table.admit(PeerId(5), 4, VirtualTime(0));
        b.table.admit(PeerId(6), 4, VirtualTime(0));
        let ta = a.exchange(1, vec![]);
        let tb = b.exchange(1, vec![]);
        a.merged.merge(tb);
        b.merged.merge(ta);
        assert_eq!(a.merged, b.merged);
        let keys: Vec<_> = a.merged.rows().into_keys().collect();
        assert_eq!(keys, [(GroupId(10), PeerId(5)), (GroupId(11), PeerId(6))]);
        let v = a.load_view(&ScheduleCache::default(), &BTreeSet::new());
        assert_eq!(v.subgroups.len(), 2);
    }

    #[test]
    fn single_rv_merge_is_identity() {
        let mut a = MonitorService::new(PeerId(1), GroupId(10));
        a.table.admit(PeerId(5), 4, VirtualTime(0));
        let out = a.exchange(1, vec![]);
        assert_eq!(a.merged.tables().collect::<Vec<_>>(), [&out]);
    }

    #[test]
    fn stale_slot_is_discarded() {
        let mut a = MonitorService::new(PeerId(1), GroupId(10));
        let mut b = MonitorService::new(PeerId(2), GroupId(11));
        let old = b.exchange(1, vec![]);
        b.table.admit(PeerId(6), 4, VirtualTime(0));
        let new = b.exchange(2, vec![]);
        assert!(a.merged.merge(new.clone()));
        assert!(!a.merged.merge(old));
        assert_eq!(a.merged.get(PeerId(2)), Some(&new));
    }

    #[test]
    fn sustained_saturation_triggers_after_s_slots() {
        let mut m = MonitorService::new(PeerId(1), GroupId(1));
        assert!(!m.note_slot(true, 3));
        assert!(!m.note_slot(true, 3));
        assert!(m.note_slot(true, 3));
        assert!(!m.note_slot(true, 3));
        assert!(!m.note_slot(false, 3));
    }

    #[test]
    fn spawn_picks_lowest_eligible() {
        let pool: BTreeSet<_> = [PeerId(9), PeerId(4), PeerId(6)].into();
        assert_eq!(spawn_replacement(&pool, |p| p != PeerId(4)), Ok(PeerId(6)));
        assert_eq!(
            spawn_replacement(&BTreeSet::new(), |_| true),
            Err(MonitorError::NoEligibleHost)
        );
    }
}
