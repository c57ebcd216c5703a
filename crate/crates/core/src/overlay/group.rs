use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::ids::{GroupId, PeerId, PipeRef};
use crate::kernel::VirtualTime;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GroupKind {
    Root,
    Category,
    Service,
    WorkerSubgroup,
    Epm,
}

impl GroupKind {
    pub fn as_str(self) -> &'static str {
        match self {
            GroupKind::Root => "root",
            GroupKind::Category => "category",
            GroupKind::Service => "service",
            GroupKind::WorkerSubgroup => "worker_subgroup",
            GroupKind::Epm => "epm",
        }
    }

    /// Whether a group of this kind may sit directly under `parent`.
    pub fn allowed_under(self, parent: Option<GroupKind>) -> bool {
        matches!(
            (self, parent),
            (GroupKind::Root, None)
                | (
                    GroupKind::Category,
                    Some(GroupKind::Root | GroupKind::Category)
                )
                | (GroupKind::Service, Some(GroupKind::Category))
                | (
                    GroupKind::WorkerSubgroup | GroupKind::Epm,
                    Some(GroupKind::Service)
                )
        )
    }

    /// Root and Category groups merge with their same-path counterparts when
    /// isolated networks connect; the other kinds never fuse.
    pub fn merges(self) -> bool {
        matches!(self, GroupKind::Root | GroupKind::Category)
    }
}

impl fmt::Display for GroupKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupRecord {
    pub id: GroupId,
    pub kind: GroupKind,
    pub name: String,
    pub parent: Option<GroupId>,
    pub rv_peers: BTreeSet<PeerId>,
    pub members: BTreeSet<PeerId>,
    /// Only present on Service groups.
    pub query_format: Option<String>,
    pub published_at: VirtualTime,
}

impl GroupRecord {
    pub fn advertisement(&self) -> Advertisement {
        Advertisement {
            group_id: self.id,
            kind: self.kind,
            name: self.name.clone(),
            query_format: self.query_format.clone(),
            published_at: self.published_at,
        }
    }
}

/// Discoverable description of a group.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Advertisement {
    pub group_id: GroupId,
    pub kind: GroupKind,
    pub name: String,
    pub query_format: Option<String>,
    pub published_at: VirtualTime,
}

/// Workers (or root members) registered with one RV, bounded by `capacity`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegistrationTable {
    pub rv: PeerId,
    pub registered: BTreeSet<PeerId>,
    pub pipes: BTreeMap<PeerId, PipeRef>,
    pub capacity: usize,
}

impl RegistrationTable {
    pub fn new(rv: PeerId, capacity: usize) -> Self {
        Self {
            rv,
            registered: BTreeSet::new(),
            pipes: BTreeMap::new(),
            capacity,
        }
    }

    pub fn is_full(&self) -> bool {
        self.registered.len() >= self.capacity
    }

    pub fn insert(&mut self, peer: PeerId, pipe: PipeRef) {
        self.registered.insert(peer);
        self.pipes.insert(peer, pipe);
    }

    pub fn remove(&mut self, peer: PeerId) -> bool {
        self.pipes.remove(&peer);
        self.registered.remove(&peer)
    }
}
