//! Peer and group state: bootstrap, the group tree, scoped discovery, worker
//! registration with capacity splits, rendezvous election and merge
//! visibility across partition components.
//!
//! The overlay is the shared advertisement registry of the simulated world.
//! Every operation is a synchronous state transition; what a peer can see is
//! decided against ground-truth liveness and the network's current partition
//! components. Merging is a visibility overlay only: group ids never unify, so
//! a split is a cheap reversal.

mod group;

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

pub use group::{Advertisement, GroupKind, GroupRecord, RegistrationTable};

use crate::fields;
use crate::ids::{GroupId, PeerId, PipeRef};
use crate::kernel::VirtualTime;
use crate::network::NetworkModel;
use crate::trace::{Actor, EventKind, Trace};

/// Pipe id workers register under.
pub const WORKER_PIPE: u32 = 1;

/// Borrowed view of the kernel an overlay operation runs against.
pub struct Ctx<'a> {
    pub now: VirtualTime,
    pub trace: &'a mut Trace,
    pub net: &'a NetworkModel,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OverlayError {
    #[error("group {0} is not visible from this peer")]
    GroupNotVisible(GroupId),
    #[error("peer has not joined the parent of group {0}")]
    ParentNotJoined(GroupId),
    #[error("peer is not a member of group {0}")]
    NotAMember(GroupId),
    #[error("unknown group {0}")]
    UnknownGroup(GroupId),
    #[error("peer {0} is not the rendezvous of a worker subgroup")]
    NotARendezvous(PeerId),
    #[error("rendezvous {0} is dead")]
    RvDead(PeerId),
    #[error("no alive candidates in subgroup {0}")]
    NoCandidates(GroupId),
    #[error("peer {0} has not joined a root group")]
    NoRoot(PeerId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BootstrapOutcome {
    JoinedRoot { root: GroupId, rv: PeerId },
    CreatedRoot { root: GroupId },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Registration {
    Accepted {
        subgroup: GroupId,
        rv: PeerId,
        pipe: PipeRef,
    },
    /// The subgroup was full; a sibling subgroup was created under
    /// `new_rv` and the registration landed there. `moved` is the already
    /// registered worker promoted to run the new subgroup, if any.
    Redirected {
        from_subgroup: GroupId,
        subgroup: GroupId,
        new_rv: PeerId,
        moved: Option<PeerId>,
    },
}

impl Registration {
    pub fn subgroup(&self) -> GroupId {
        match *self {
            Registration::Accepted { subgroup, .. } | Registration::Redirected { subgroup, .. } => {
                subgroup
            }
        }
    }

    pub fn rv(&self) -> PeerId {
        match *self {
            Registration::Accepted { rv, .. } => rv,
            Registration::Redirected { new_rv, .. } => new_rv,
        }
    }
}

/// How a peer takes part in a service it attaches to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HostRole {
    Worker,
    /// Dedicated rendezvous: runs a worker subgroup without processing queries.
    Rendezvous,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Placement {
    pub service: GroupId,
    /// Subgroup the peer ended up in (as worker or as its RV). `None` when no
    /// subgroup currently has a live rendezvous to register with.
    pub registration: Option<Registration>,
    pub created_service: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ComponentChange {
    Heal,
    Split,
}

/// Discoverable service names per partition component after a change.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VisibilitySummary {
    pub components: Vec<(Vec<PeerId>, BTreeSet<String>)>,
}

pub struct Overlay {
    groups: BTreeMap<GroupId, GroupRecord>,
    next_group: u32,
    subgroup_tables: BTreeMap<GroupId, RegistrationTable>,
    root_tables: BTreeMap<GroupId, BTreeMap<PeerId, RegistrationTable>>,
    assignments: BTreeMap<(GroupId, PeerId), PeerId>,
    alive: BTreeSet<PeerId>,
    elections: BTreeMap<GroupId, PeerId>,
    r_max: usize,
}

impl Overlay {
    pub fn new(r_max: usize) -> Self {
        assert!(r_max > 0, "R_max must be positive");
        Self {
            groups: BTreeMap::new(),
            next_group: 1,
            subgroup_tables: BTreeMap::new(),
            root_tables: BTreeMap::new(),
            assignments: BTreeMap::new(),
            alive: BTreeSet::new(),
            elections: BTreeMap::new(),
            r_max,
        }
    }

    pub fn r_max(&self) -> usize {
        self.r_max
    }

    // ---- liveness -------------------------------------------------------

    pub fn set_alive(&mut self, peer: PeerId, alive: bool) {
        if alive {
            self.alive.insert(peer);
        } else {
            self.alive.remove(&peer);
        }
    }

    pub fn is_alive(&self, peer: PeerId) -> bool {
        self.alive.contains(&peer)
    }

    // ---- lookups --------------------------------------------------------

    pub fn group(&self, id: GroupId) -> Option<&GroupRecord> {
        self.groups.get(&id)
    }

    pub fn groups(&self) -> impl Iterator<Item = &GroupRecord> {
        self.groups.values()
    }

    pub fn table(&self, subgroup: GroupId) -> Option<&RegistrationTable> {
        self.subgroup_tables.get(&subgroup)
    }

    pub fn tables(&self) -> impl Iterator<Item = (&GroupId, &RegistrationTable)> {
        self.subgroup_tables.iter()
    }

    pub fn root_tables(&self) -> impl Iterator<Item = &RegistrationTable> {
        self.root_tables.values().flat_map(|m| m.values())
    }

    pub fn children(&self, id: GroupId) -> impl Iterator<Item = &GroupRecord> {
        self.groups.values().filter(move |g| g.parent == Some(id))
    }

    pub fn child_of_kind(&self, id: GroupId, kind: GroupKind) -> Option<GroupId> {
        self.children(id).find(|g| g.kind == kind).map(|g| g.id)
    }

    pub fn epm_of(&self, service: GroupId) -> Option<GroupId> {
        self.child_of_kind(service, GroupKind::Epm)
    }

    pub fn subgroups_of(&self, service: GroupId) -> Vec<GroupId> {
        self.children(service)
            .filter(|g| g.kind == GroupKind::WorkerSubgroup)
            .map(|g| g.id)
            .collect()
    }

    /// The worker subgroup whose rendezvous is `rv`.
    pub fn subgroup_led_by(&self, rv: PeerId) -> Option<GroupId> {
        self.subgroup_tables
            .iter()
            .find(|(_, t)| t.rv == rv)
            .map(|(g, _)| *g)
    }

    /// The worker subgroup `worker` is registered in.
    pub fn subgroup_of(&self, worker: PeerId) -> Option<GroupId> {
        self.subgroup_tables
            .iter()
            .find(|(_, t)| t.registered.contains(&worker))
            .map(|(g, _)| *g)
    }

    pub fn service_of(&self, subgroup: GroupId) -> Option<GroupId> {
        self.groups.get(&subgroup).and_then(|g| g.parent)
    }

    /// Rendezvous peers of the service's EPM group.
    pub fn epm_members(&self, service: GroupId) -> BTreeSet<PeerId> {
        self.epm_of(service)
            .and_then(|e| self.groups.get(&e))
            .map(|g| g.rv_peers.clone())
            .unwrap_or_default()
    }

    pub fn rv_assignment(&self, group: GroupId, peer: PeerId) -> Option<PeerId> {
        self.assignments.get(&(group, peer)).copied()
    }

    pub fn election_pending(&self, subgroup: GroupId) -> bool {
        self.elections.contains_key(&subgroup)
    }

    /// Names from the first level under Root down to `id`; Root itself is `[]`.
    pub fn name_path(&self, id: GroupId) -> Vec<String> {
        let mut path = Vec::new();
        let mut cur = self.groups.get(&id);
        while let Some(g) = cur {
            if g.kind == GroupKind::Root {
                break;
            }
            path.push(g.name.clone());
            cur = g.parent.and_then(|p| self.groups.get(&p));
        }
        path.reverse();
        path
    }

    // ---- visibility -----------------------------------------------------

    fn reachable(&self, net: &NetworkModel, peer: PeerId, rv: PeerId) -> bool {
        self.alive.contains(&rv) && net.connected(peer, rv)
    }

    /// A group is visible to `peer` when one of its rendezvous peers is alive
    /// and in the same partition component.
    pub fn visible(&self, net: &NetworkModel, peer: PeerId, id: GroupId) -> bool {
        self.groups
            .get(&id)
            .is_some_and(|g| g.rv_peers.iter().any(|r| self.reachable(net, peer, *r)))
    }

    fn same_logical(&self, a: &GroupRecord, b: &GroupRecord) -> bool {
        a.id == b.id
            || (a.kind == b.kind && a.kind.merges() && self.name_path(a.id) == self.name_path(b.id))
    }

    /// Groups `peer` sees as one logical group with `id`: identical Root and
    /// Category paths merge, everything else stands alone.
    fn scope_set(&self, net: &NetworkModel, peer: PeerId, id: GroupId) -> Vec<GroupId> {
        let Some(g) = self.groups.get(&id) else {
            return Vec::new();
        };
        if !g.kind.merges() {
            return vec![id];
        }
        self.groups
            .values()
            .filter(|h| self.same_logical(g, h) && (h.id == id || self.visible(net, peer, h.id)))
            .map(|h| h.id)
            .collect()
    }

    pub fn has_joined(&self, net: &NetworkModel, peer: PeerId, id: GroupId) -> bool {
        self.scope_set(net, peer, id)
            .iter()
            .any(|g| self.groups[g].members.contains(&peer))
    }

    /// Promotes the lowest alive reachable member when every rendezvous of a
    /// Root or Category group has died.
    fn repair(&mut self, ctx: &mut Ctx<'_>, id: GroupId, viewer: PeerId) {
        let Some(g) = self.groups.get(&id) else {
            return;
        };
        if !g.kind.merges() || g.rv_peers.iter().any(|r| self.alive.contains(r)) {
            return;
        }
        let Some(candidate) = g
            .members
            .iter()
            .copied()
            .find(|m| self.reachable(ctx.net, viewer, *m))
        else {
            return;
        };
        let kind = g.kind;
        let g = self.groups.get_mut(&id).expect("checked above");
        g.rv_peers.retain(|r| self.alive.contains(r));
        g.rv_peers.insert(candidate);
        if kind == GroupKind::Root {
            let tables = self.root_tables.entry(id).or_default();
            for t in tables.values_mut() {
                t.remove(candidate);
            }
            tables.insert(candidate, RegistrationTable::new(candidate, self.r_max));
        }
        ctx.trace.emit(
            ctx.now,
            EventKind::Joined,
            candidate,
            fields! { "group" => id, "kind" => kind.as_str(), "role" => "rendezvous", "takeover" => 1u32 },
        );
    }

    fn new_group(
        &mut self,
        ctx: &mut Ctx<'_>,
        kind: GroupKind,
        name: &str,
        parent: Option<GroupId>,
        rv: PeerId,
        query_format: Option<String>,
    ) -> GroupId {
        debug_assert!(kind.allowed_under(parent.map(|p| self.groups[&p].kind)));
        let id = GroupId(self.next_group);
        self.next_group += 1;
        self.groups.insert(
            id,
            GroupRecord {
                id,
                kind,
                name: name.to_owned(),
                parent,
                rv_peers: BTreeSet::from([rv]),
                members: BTreeSet::from([rv]),
                query_format,
                published_at: ctx.now,
            },
        );
        let mut d = fields! { "group" => id, "kind" => kind.as_str(), "name" => name, "rv" => rv };
        if let Some(p) = parent {
            d.insert("parent".into(), p.into());
        }
        ctx.trace.emit(ctx.now, EventKind::GroupCreated, rv, d);
        id
    }

    // ---- bootstrap ------------------------------------------------------

    /// Lowest-id Root group visible to `peer`, repairing orphaned roots first.
    pub fn find_visible_root(&mut self, ctx: &mut Ctx<'_>, peer: PeerId) -> Option<GroupId> {
        let roots: Vec<GroupId> = self
            .groups
            .values()
            .filter(|g| g.kind == GroupKind::Root)
            .map(|g| g.id)
            .collect();
        for r in &roots {
            self.repair(ctx, *r, peer);
        }
        roots.into_iter().find(|r| self.visible(ctx.net, peer, *r))
    }

    /// The visible root `peer` is a member of, if any.
    pub fn joined_root(&self, net: &NetworkModel, peer: PeerId) -> Option<GroupId> {
        self.groups
            .values()
            .find(|g| {
                g.kind == GroupKind::Root
                    && g.members.contains(&peer)
                    && self.visible(net, peer, g.id)
            })
            .map(|g| g.id)
    }

    /// Joins a visible Root group, or creates one and becomes its rendezvous.
    pub fn bootstrap_peer(&mut self, ctx: &mut Ctx<'_>, peer: PeerId) -> BootstrapOutcome {
        let outcome = match self.find_visible_root(ctx, peer) {
            Some(root) => {
                let rv = self.join_root(ctx, peer, root);
                BootstrapOutcome::JoinedRoot { root, rv }
            }
            None => {
                let root = self.new_group(ctx, GroupKind::Root, "root", None, peer, None);
                self.root_tables
                    .entry(root)
                    .or_default()
                    .insert(peer, RegistrationTable::new(peer, self.r_max));
                self.assignments.insert((root, peer), peer);
                BootstrapOutcome::CreatedRoot { root }
            }
        };
        let (result, root) = match outcome {
            BootstrapOutcome::JoinedRoot { root, .. } => ("joined", root),
            BootstrapOutcome::CreatedRoot { root } => ("created", root),
        };
        ctx.trace.emit(
            ctx.now,
            EventKind::PeerBootstrap,
            peer,
            fields! { "result" => result, "root" => root },
        );
        outcome
    }

    /// Root membership goes through the same registration tables and split
    /// rule as worker subgroups. A root rendezvous is not registered with
    /// itself, so its table holds only the peers it serves.
    fn join_root(&mut self, ctx: &mut Ctx<'_>, peer: PeerId, root: GroupId) -> PeerId {
        let alive = &self.alive;
        let net = ctx.net;
        let tables = self.root_tables.entry(root).or_default();
        if let Some(t) = tables.values().find(|t| {
            (t.rv == peer || t.registered.contains(&peer))
                && alive.contains(&t.rv)
                && net.connected(peer, t.rv)
        }) {
            let rv = t.rv;
            self.groups
                .get_mut(&root)
                .expect("root exists")
                .members
                .insert(peer);
            self.assignments.insert((root, peer), rv);
            return rv;
        }
        let usable: Vec<PeerId> = tables
            .values()
            .filter(|t| alive.contains(&t.rv) && net.connected(peer, t.rv))
            .map(|t| t.rv)
            .collect();
        let open = usable
            .iter()
            .filter(|rv| !tables[rv].is_full())
            .min_by_key(|rv| (tables[rv].registered.len(), **rv))
            .copied();
        let rv = match open {
            Some(rv) => {
                tables
                    .get_mut(&rv)
                    .expect("present")
                    .insert(peer, PipeRef::new(peer, 0));
                rv
            }
            None => {
                let donor = usable
                    .iter()
                    .min_by_key(|rv| (tables[rv].registered.len(), **rv))
                    .copied()
                    .expect("a visible root has a reachable rendezvous");
                let candidate = tables[&donor]
                    .registered
                    .iter()
                    .copied()
                    .find(|p| *p != donor && alive.contains(p))
                    .unwrap_or(peer);
                let mut t = RegistrationTable::new(candidate, self.r_max);
                if candidate != peer {
                    tables.get_mut(&donor).expect("present").remove(candidate);
                    t.insert(peer, PipeRef::new(peer, 0));
                }
                tables.insert(candidate, t);
                self.groups
                    .get_mut(&root)
                    .expect("root exists")
                    .rv_peers
                    .insert(candidate);
                ctx.trace.emit(
                    ctx.now,
                    EventKind::RvSplit,
                    donor,
                    fields! { "group" => root, "new_rv" => candidate, "trigger" => peer },
                );
                candidate
            }
        };
        self.groups
            .get_mut(&root)
            .expect("root exists")
            .members
            .insert(peer);
        self.assignments.insert((root, peer), rv);
        ctx.trace.emit(
            ctx.now,
            EventKind::Joined,
            peer,
            fields! { "group" => root, "kind" => "root", "rv" => rv },
        );
        rv
    }

    // ---- joining and discovery -----------------------------------------

    /// Joins `group` and returns the rendezvous the peer is handed over to:
    /// the least-loaded reachable one, ties to the lowest id.
    pub fn join_group(
        &mut self,
        ctx: &mut Ctx<'_>,
        peer: PeerId,
        group: GroupId,
    ) -> Result<PeerId, OverlayError> {
        let g = self
            .groups
            .get(&group)
            .ok_or(OverlayError::UnknownGroup(group))?;
        let (kind, parent) = (g.kind, g.parent);
        self.repair(ctx, group, peer);
        if !self.visible(ctx.net, peer, group) {
            return Err(OverlayError::GroupNotVisible(group));
        }
        if let Some(parent) = parent {
            if !self.has_joined(ctx.net, peer, parent) {
                return Err(OverlayError::ParentNotJoined(group));
            }
        }
        if kind == GroupKind::Root {
            return Ok(self.join_root(ctx, peer, group));
        }
        let g = &self.groups[&group];
        let rv = g
            .rv_peers
            .iter()
            .copied()
            .filter(|r| self.reachable(ctx.net, peer, *r))
            .min_by_key(|r| {
                let load = self
                    .assignments
                    .iter()
                    .filter(|((gid, _), a)| *gid == group && **a == *r)
                    .count();
                (load, *r)
            })
            .expect("visible implies a reachable rendezvous");
        self.groups
            .get_mut(&group)
            .expect("exists")
            .members
            .insert(peer);
        self.assignments.insert((group, peer), rv);
        ctx.trace.emit(
            ctx.now,
            EventKind::Joined,
            peer,
            fields! { "group" => group, "kind" => kind.as_str(), "rv" => rv },
        );
        Ok(rv)
    }

    /// Advertisements of the direct children of `scope`, as seen by `peer`.
    /// Same-path categories under merged parents collapse into one entry (the
    /// lowest group id); services are never fused. Ordered by group id.
    pub fn discover_advertisements(
        &mut self,
        ctx: &mut Ctx<'_>,
        peer: PeerId,
        scope: GroupId,
    ) -> Result<Vec<Advertisement>, OverlayError> {
        if !self.groups.contains_key(&scope) {
            return Err(OverlayError::UnknownGroup(scope));
        }
        if !self.has_joined(ctx.net, peer, scope) {
            return Err(OverlayError::NotAMember(scope));
        }
        let parents = self.scope_set(ctx.net, peer, scope);
        let child_ids: Vec<GroupId> = self
            .groups
            .values()
            .filter(|g| g.parent.is_some_and(|p| parents.contains(&p)))
            .map(|g| g.id)
            .collect();
        for c in &child_ids {
            self.repair(ctx, *c, peer);
        }
        let mut seen_categories = BTreeSet::new();
        let mut ads = Vec::new();
        for id in child_ids {
            if !self.visible(ctx.net, peer, id) {
                continue;
            }
            let g = &self.groups[&id];
            if g.kind == GroupKind::Category && !seen_categories.insert(g.name.clone()) {
                continue;
            }
            ads.push(g.advertisement());
        }
        Ok(ads)
    }

    /// Every Service group `peer` can currently see, anywhere in the tree.
    pub fn visible_services(&self, net: &NetworkModel, peer: PeerId) -> Vec<&GroupRecord> {
        self.groups
            .values()
            .filter(|g| g.kind == GroupKind::Service && self.visible(net, peer, g.id))
            .collect()
    }

    // ---- service structure ---------------------------------------------

    /// Walks (creating as needed) the category path and the service group,
    /// then places `peer` in a worker subgroup: as a registered worker, or as
    /// the rendezvous of a fresh subgroup for [`HostRole::Rendezvous`].
    pub fn ensure_group_path(
        &mut self,
        ctx: &mut Ctx<'_>,
        peer: PeerId,
        path: &[String],
        service_name: &str,
        query_format: &str,
        role: HostRole,
    ) -> Result<Placement, OverlayError> {
        let mut cur = self
            .joined_root(ctx.net, peer)
            .ok_or(OverlayError::NoRoot(peer))?;
        for name in path {
            let parents = self.scope_set(ctx.net, peer, cur);
            let existing = self
                .groups
                .values()
                .filter(|g| {
                    g.kind == GroupKind::Category
                        && &g.name == name
                        && g.parent.is_some_and(|p| parents.contains(&p))
                })
                .map(|g| g.id)
                .collect::<Vec<_>>();
            for e in &existing {
                self.repair(ctx, *e, peer);
            }
            let found = existing
                .into_iter()
                .find(|e| self.visible(ctx.net, peer, *e));
            cur = match found {
                Some(cat) => {
                    if !self.groups[&cat].members.contains(&peer) {
                        self.join_group(ctx, peer, cat)?;
                    }
                    cat
                }
                None => {
                    let under = parents
                        .iter()
                        .copied()
                        .find(|p| self.groups[p].members.contains(&peer))
                        .unwrap_or(cur);
                    let id =
                        self.new_group(ctx, GroupKind::Category, name, Some(under), peer, None);
                    self.assignments.insert((id, peer), peer);
                    id
                }
            };
        }

        let parents = self.scope_set(ctx.net, peer, cur);
        let service = self
            .groups
            .values()
            .filter(|g| {
                g.kind == GroupKind::Service
                    && g.name == service_name
                    && g.parent.is_some_and(|p| parents.contains(&p))
            })
            .map(|g| g.id)
            .find(|s| self.visible(ctx.net, peer, *s) || self.groups[s].members.contains(&peer));

        let Some(service) = service else {
            let service = self.new_group(
                ctx,
                GroupKind::Service,
                service_name,
                Some(cur),
                peer,
                Some(query_format.to_owned()),
            );
            let sub = self.new_group(
                ctx,
                GroupKind::WorkerSubgroup,
                &format!("{service_name}#1"),
                Some(service),
                peer,
                None,
            );
            self.new_group(
                ctx,
                GroupKind::Epm,
                &format!("{service_name}/epm"),
                Some(service),
                peer,
                None,
            );
            let mut table = RegistrationTable::new(peer, self.r_max);
            let pipe = PipeRef::new(peer, WORKER_PIPE);
            if role == HostRole::Worker {
                table.insert(peer, pipe);
                ctx.trace.emit(
                    ctx.now,
                    EventKind::Registered,
                    peer,
                    fields! { "group" => sub, "rv" => peer, "pipe" => pipe.to_string() },
                );
            }
            self.subgroup_tables.insert(sub, table);
            self.assignments.insert((service, peer), peer);
            return Ok(Placement {
                service,
                registration: Some(Registration::Accepted {
                    subgroup: sub,
                    rv: peer,
                    pipe,
                }),
                created_service: true,
            });
        };

        if !self.groups[&service].members.contains(&peer) && self.visible(ctx.net, peer, service) {
            self.join_group(ctx, peer, service)?;
        }
        if let Some(sub) = self.subgroup_of(peer) {
            if self.service_of(sub) == Some(service) {
                let rv = self.subgroup_tables[&sub].rv;
                if self.alive.contains(&rv) {
                    return Ok(Placement {
                        service,
                        registration: Some(Registration::Accepted {
                            subgroup: sub,
                            rv,
                            pipe: PipeRef::new(peer, WORKER_PIPE),
                        }),
                        created_service: false,
                    });
                }
                return Ok(Placement {
                    service,
                    registration: None,
                    created_service: false,
                });
            }
        }
        let registration = match role {
            HostRole::Rendezvous => Some(self.open_subgroup(ctx, service, peer, None)),
            HostRole::Worker => {
                let target = self
                    .subgroups_of(service)
                    .into_iter()
                    .filter(|s| {
                        let t = &self.subgroup_tables[s];
                        self.reachable(ctx.net, peer, t.rv) && !self.elections.contains_key(s)
                    })
                    .min_by_key(|s| (self.subgroup_tables[s].registered.len(), *s));
                match target {
                    Some(s) => {
                        Some(self.register_with_rv(ctx, peer, self.subgroup_tables[&s].rv)?)
                    }
                    None => None,
                }
            }
        };
        Ok(Placement {
            service,
            registration,
            created_service: false,
        })
    }

    /// Creates a sibling worker subgroup run by `rv`, who joins the EPM group.
    fn open_subgroup(
        &mut self,
        ctx: &mut Ctx<'_>,
        service: GroupId,
        rv: PeerId,
        split_from: Option<GroupId>,
    ) -> Registration {
        let n = self.subgroups_of(service).len() + 1;
        let name = format!("{}#{}", self.groups[&service].name, n);
        let sub = self.new_group(
            ctx,
            GroupKind::WorkerSubgroup,
            &name,
            Some(service),
            rv,
            None,
        );
        self.subgroup_tables
            .insert(sub, RegistrationTable::new(rv, self.r_max));
        self.add_service_rv(service, rv);
        Registration::Redirected {
            from_subgroup: split_from.unwrap_or(sub),
            subgroup: sub,
            new_rv: rv,
            moved: None,
        }
    }

    fn add_service_rv(&mut self, service: GroupId, rv: PeerId) {
        if let Some(epm) = self.epm_of(service) {
            let e = self.groups.get_mut(&epm).expect("epm exists");
            e.rv_peers.insert(rv);
            e.members.insert(rv);
        }
        let s = self.groups.get_mut(&service).expect("service exists");
        s.rv_peers.insert(rv);
        s.members.insert(rv);
    }

    fn remove_service_rv(&mut self, service: GroupId, rv: PeerId) {
        if let Some(epm) = self.epm_of(service) {
            let e = self.groups.get_mut(&epm).expect("epm exists");
            e.rv_peers.remove(&rv);
            e.members.remove(&rv);
        }
        if let Some(s) = self.groups.get_mut(&service) {
            s.rv_peers.remove(&rv);
        }
    }

    /// Registers `worker` with the rendezvous `rv`. A full table triggers a
    /// split: the lowest-id registered worker other than `rv` (or the
    /// newcomer itself when there is none) becomes rendezvous of a new sibling
    /// subgroup, joins the EPM group, and the registration is redirected there.
    pub fn register_with_rv(
        &mut self,
        ctx: &mut Ctx<'_>,
        worker: PeerId,
        rv: PeerId,
    ) -> Result<Registration, OverlayError> {
        let sub = self
            .subgroup_led_by(rv)
            .ok_or(OverlayError::NotARendezvous(rv))?;
        if !self.alive.contains(&rv) {
            return Err(OverlayError::RvDead(rv));
        }
        let pipe = PipeRef::new(worker, WORKER_PIPE);
        let table = self
            .subgroup_tables
            .get_mut(&sub)
            .expect("led subgroup has a table");
        if table.registered.contains(&worker) {
            return Ok(Registration::Accepted {
                subgroup: sub,
                rv,
                pipe,
            });
        }
        if !table.is_full() {
            table.insert(worker, pipe);
            self.groups
                .get_mut(&sub)
                .expect("exists")
                .members
                .insert(worker);
            ctx.trace.emit(
                ctx.now,
                EventKind::Registered,
                worker,
                fields! { "group" => sub, "rv" => rv, "pipe" => pipe.to_string() },
            );
            return Ok(Registration::Accepted {
                subgroup: sub,
                rv,
                pipe,
            });
        }

        let candidate = table
            .registered
            .iter()
            .copied()
            .find(|p| *p != rv && self.alive.contains(p))
            .unwrap_or(worker);
        let service = self.service_of(sub).expect("subgroup has a service");
        ctx.trace.emit(
            ctx.now,
            EventKind::RvSplit,
            rv,
            fields! { "group" => sub, "new_rv" => candidate, "trigger" => worker },
        );
        let Registration::Redirected {
            subgroup: new_sub, ..
        } = self.open_subgroup(ctx, service, candidate, Some(sub))
        else {
            unreachable!("open_subgroup always redirects")
        };
        let moved = (candidate != worker).then_some(candidate);
        if let Some(m) = moved {
            self.subgroup_tables
                .get_mut(&sub)
                .expect("exists")
                .remove(m);
            self.groups
                .get_mut(&sub)
                .expect("exists")
                .members
                .remove(&m);
        }
        for p in [Some(candidate), moved.map(|_| worker)]
            .into_iter()
            .flatten()
        {
            let pipe = PipeRef::new(p, WORKER_PIPE);
            self.subgroup_tables
                .get_mut(&new_sub)
                .expect("just created")
                .insert(p, pipe);
            self.groups
                .get_mut(&new_sub)
                .expect("exists")
                .members
                .insert(p);
            ctx.trace.emit(
                ctx.now,
                EventKind::Registered,
                p,
                fields! { "group" => new_sub, "rv" => candidate, "pipe" => pipe.to_string() },
            );
        }
        Ok(Registration::Redirected {
            from_subgroup: sub,
            subgroup: new_sub,
            new_rv: candidate,
            moved,
        })
    }

    /// Drops a worker from whatever subgroup table holds it. The rendezvous of
    /// a subgroup is never dropped this way.
    pub fn remove_worker(&mut self, worker: PeerId) -> Option<GroupId> {
        let sub = self.subgroup_of(worker)?;
        let table = self.subgroup_tables.get_mut(&sub).expect("found above");
        if table.rv == worker {
            return None;
        }
        table.remove(worker);
        if let Some(g) = self.groups.get_mut(&sub) {
            g.members.remove(&worker);
        }
        Some(sub)
    }

    /// Moves every worker of `from` into `into` and retires `from`'s
    /// rendezvous to a plain worker of `into`. Used by low-load consolidation.
    pub fn consolidate(&mut self, ctx: &mut Ctx<'_>, from: GroupId, into: GroupId) -> Vec<PeerId> {
        let Some(src) = self.subgroup_tables.remove(&from) else {
            return Vec::new();
        };
        let service = self.service_of(from).expect("subgroup has a service");
        let into_rv = self.subgroup_tables[&into].rv;
        let mut movers: Vec<PeerId> = src.registered.iter().copied().collect();
        if !movers.contains(&src.rv) {
            movers.push(src.rv);
        }
        movers.sort();
        for m in &movers {
            let pipe = PipeRef::new(*m, WORKER_PIPE);
            self.subgroup_tables
                .get_mut(&into)
                .expect("exists")
                .insert(*m, pipe);
            self.groups
                .get_mut(&into)
                .expect("exists")
                .members
                .insert(*m);
            ctx.trace.emit(
                ctx.now,
                EventKind::Registered,
                *m,
                fields! { "group" => into, "rv" => into_rv, "pipe" => pipe.to_string(), "consolidated_from" => from },
            );
        }
        self.remove_service_rv(service, src.rv);
        self.groups.remove(&from);
        movers
    }

    // ---- failover -------------------------------------------------------

    /// Marks an election as started for `subgroup` after its rendezvous
    /// `failed` was detected dead. Returns false when one is already running
    /// or the rendezvous was already replaced.
    pub fn begin_election(&mut self, subgroup: GroupId, failed: PeerId) -> bool {
        match self.subgroup_tables.get(&subgroup) {
            Some(t) if t.rv == failed && !self.elections.contains_key(&subgroup) => {
                self.elections.insert(subgroup, failed);
                true
            }
            _ => false,
        }
    }

    /// Drops a pending election, e.g. because the rendezvous came back.
    pub fn abandon_election(&mut self, subgroup: GroupId) -> bool {
        self.elections.remove(&subgroup).is_some()
    }

    /// The lowest alive registered worker takes over the subgroup, becomes its
    /// rendezvous and joins the EPM group. With no candidates the subgroup is
    /// dissolved and removed from the EPM group.
    pub fn elect_rendezvous(
        &mut self,
        ctx: &mut Ctx<'_>,
        subgroup: GroupId,
    ) -> Result<PeerId, OverlayError> {
        self.elections.remove(&subgroup);
        let table = self
            .subgroup_tables
            .get(&subgroup)
            .ok_or(OverlayError::UnknownGroup(subgroup))?;
        let old = table.rv;
        let service = self.service_of(subgroup).expect("subgroup has a service");
        let winner = table
            .registered
            .iter()
            .copied()
            .find(|p| *p != old && self.alive.contains(p));
        let Some(winner) = winner else {
            self.subgroup_tables.remove(&subgroup);
            self.groups.remove(&subgroup);
            self.remove_service_rv(service, old);
            ctx.trace.emit(
                ctx.now,
                EventKind::Election,
                Actor::Kernel,
                fields! { "group" => subgroup, "failed" => old, "result" => "no_candidates" },
            );
            return Err(OverlayError::NoCandidates(subgroup));
        };
        let table = self.subgroup_tables.get_mut(&subgroup).expect("present");
        table.rv = winner;
        table.remove(old);
        let g = self.groups.get_mut(&subgroup).expect("present");
        g.rv_peers = BTreeSet::from([winner]);
        g.members.remove(&old);
        self.remove_service_rv(service, old);
        self.add_service_rv(service, winner);
        ctx.trace.emit(
            ctx.now,
            EventKind::Election,
            winner,
            fields! { "group" => subgroup, "failed" => old, "winner" => winner, "result" => "won" },
        );
        Ok(winner)
    }

    // ---- merge / split --------------------------------------------------

    /// Summarizes what every partition component can discover after the
    /// partition sets changed, and records it as a `heal` or `partition`
    /// record. Visibility itself is always computed on demand.
    pub fn recompute_visibility(
        &self,
        ctx: &mut Ctx<'_>,
        change: ComponentChange,
    ) -> VisibilitySummary {
        let mut comps: BTreeMap<usize, Vec<PeerId>> = BTreeMap::new();
        for p in &self.alive {
            if ctx.net.contains(*p) {
                comps.entry(ctx.net.component_of(*p)).or_default().push(*p);
            }
        }
        let components: Vec<(Vec<PeerId>, BTreeSet<String>)> = comps
            .into_values()
            .map(|peers| {
                let services = self
                    .visible_services(ctx.net, peers[0])
                    .into_iter()
                    .map(|g| g.name.clone())
                    .collect();
                (peers, services)
            })
            .collect();
        let roots: Vec<String> = components
            .iter()
            .map(|(peers, _)| {
                self.groups
                    .values()
                    .filter(|g| g.kind == GroupKind::Root && self.visible(ctx.net, peers[0], g.id))
                    .count()
                    .to_string()
            })
            .collect();
        type Component = (Vec<PeerId>, BTreeSet<String>);
        let render = |f: &dyn Fn(&Component) -> String| {
            components.iter().map(f).collect::<Vec<_>>().join("|")
        };
        let d = fields! {
            "components" => render(&|(p, _)| p.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")),
            "services" => render(&|(_, s)| s.iter().cloned().collect::<Vec<_>>().join(",")),
            "roots" => roots.join("|"),
        };
        let ev = match change {
            ComponentChange::Heal => EventKind::Heal,
            ComponentChange::Split => EventKind::Partition,
        };
        ctx.trace.emit(ctx.now, ev, Actor::Kernel, d);
        VisibilitySummary { components }
    }

    // ---- invariants -----------------------------------------------------

    /// Parent links acyclic, kinds placed per the hierarchy, every table
    /// within capacity.
    pub fn check_well_formed(&self) -> Result<(), String> {
        for g in self.groups.values() {
            let parent_kind = match g.parent {
                None => None,
                Some(p) => Some(
                    self.groups
                        .get(&p)
                        .ok_or_else(|| format!("{} has dangling parent {p}", g.id))?
                        .kind,
                ),
            };
            if !g.kind.allowed_under(parent_kind) {
                return Err(format!(
                    "{} ({}) not allowed under {:?}",
                    g.id, g.kind, parent_kind
                ));
            }
            let mut cur = g.parent;
            let mut hops = 0;
            while let Some(p) = cur {
                hops += 1;
                if hops > self.groups.len() {
                    return Err(format!("cycle through {}", g.id));
                }
                cur = self.groups[&p].parent;
            }
            if (g.kind == GroupKind::Service) != g.query_format.is_some() {
                return Err(format!("{} query_format present iff service", g.id));
            }
        }
        for t in self.subgroup_tables.values().chain(self.root_tables()) {
            if t.registered.len() > t.capacity {
                return Err(format!(
                    "rendezvous {} holds {} > {}",
                    t.rv,
                    t.registered.len(),
                    t.capacity
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
