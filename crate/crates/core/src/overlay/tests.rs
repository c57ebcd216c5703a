use std::collections::BTreeSet;

use proptest::prelude::*;

use super::*;
use crate::network::{LinkLatencies, LossRate};

const LAT: LinkLatencies = LinkLatencies {
    intra_subgroup: 1,
    inter_subgroup: 2,
    inter_network: 10,
};

struct World {
    net: NetworkModel,
    trace: Trace,
    ov: Overlay,
}

impl World {
    fn new(r_max: usize, peers: &[(u32, usize)]) -> Self {
        let mut net = NetworkModel::new(vec![LAT, LAT], LossRate::NONE, 0);
        let mut ov = Overlay::new(r_max);
        for (p, n) in peers {
            net.attach(PeerId(*p), *n);
            ov.set_alive(PeerId(*p), true);
        }
        Self {
            net,
            trace: Trace::new(),
            ov,
        }
    }

    fn with<R>(&mut self, f: impl FnOnce(&mut Overlay, &mut Ctx<'_>) -> R) -> R {
        let mut ctx = Ctx {
            now: VirtualTime(0),
            trace: &mut self.trace,
            net: &self.net,
        };
        f(&mut self.ov, &mut ctx)
    }

    fn boot(&mut self, p: u32) -> BootstrapOutcome {
        self.with(|o, c| o.bootstrap_peer(c, PeerId(p)))
    }

    fn place(&mut self, p: u32, path: &[&str], svc: &str) -> Placement {
        let path: Vec<String> = path.iter().map(|s| s.to_string()).collect();
        self.with(|o, c| o.ensure_group_path(c, PeerId(p), &path, svc, "key", HostRole::Worker))
            .unwrap()
    }

    fn split(&mut self, a: &[u32], b: &[u32]) {
        let a: BTreeSet<_> = a.iter().map(|p| PeerId(*p)).collect();
        let b: BTreeSet<_> = b.iter().map(|p| PeerId(*p)).collect();
        self.net.set_partition(vec![a, b]).unwrap();
    }

    fn discover(&mut self, p: u32, scope: GroupId) -> Vec<Advertisement> {
        self.with(|o, c| o.discover_advertisements(c, PeerId(p), scope))
            .unwrap()
    }

    fn find(&self, kind: GroupKind, name: &str) -> Vec<GroupId> {
        self.ov
            .groups()
            .filter(|g| g.kind == kind && g.name == name)
            .map(|g| g.id)
            .collect()
    }

    /// Client walk: root → categories → named service; returns the category
    /// listing seen at the last level.
    fn client_sees(&mut self, client: u32, path: &[&str]) -> Vec<String> {
        let root = self.ov.joined_root(&self.net, PeerId(client)).unwrap();
        let mut scope = root;
        for name in path {
            let ads = self.discover(client, scope);
            let cat = ads
                .iter()
                .find(|a| a.kind == GroupKind::Category && a.name == *name)
                .unwrap()
                .group_id;
            self.with(|o, c| o.join_group(c, PeerId(client), cat))
                .unwrap();
            scope = cat;
        }
        self.discover(client, scope)
            .into_iter()
            .filter(|a| a.kind == GroupKind::Service)
            .map(|a| a.name)
            .collect()
    }
}

#[test]
fn first_peer_creates_root_second_joins() {
    let mut w = World::new(16, &[(1, 0), (2, 0)]);
    let first = w.boot(1);
    let BootstrapOutcome::CreatedRoot { root } = first else {
        panic!("expected created root, got {first:?}")
    };
    assert!(w.ov.group(root).unwrap().rv_peers.contains(&PeerId(1)));
    assert_eq!(
        w.boot(2),
        BootstrapOutcome::JoinedRoot {
            root,
            rv: PeerId(1)
        }
    );
}

#[test]
fn disjoint_components_create_two_roots() {
    let mut w = World::new(16, &[(1, 0), (2, 1)]);
    w.split(&[1], &[2]);
    assert!(matches!(w.boot(1), BootstrapOutcome::CreatedRoot { .. }));
    assert!(matches!(w.boot(2), BootstrapOutcome::CreatedRoot { .. }));
    assert_eq!(w.find(GroupKind::Root, "root").len(), 2);
}

#[test]
fn root_membership_splits_past_capacity() {
    let mut w = World::new(2, &[(1, 0), (2, 0), (3, 0), (4, 0)]);
    for p in 1..=4 {
        w.boot(p);
    }
    let root = w.find(GroupKind::Root, "root")[0];
    assert_eq!(w.ov.group(root).unwrap().rv_peers.len(), 2);
    assert!(w.ov.root_tables().all(|t| t.registered.len() <= 2));
    assert_eq!(w.trace.of_kind(EventKind::RvSplit).count(), 1);
}

#[test]
fn path_creates_category_service_subgroup_and_epm() {
    let mut w = World::new(16, &[(1, 0)]);
    w.boot(1);
    let placed = w.place(1, &["Database"], "db");
    assert!(placed.created_service);
    let cat = w.find(GroupKind::Category, "Database");
    assert_eq!(cat.len(), 1);
    let svc = w.ov.group(placed.service).unwrap();
    assert_eq!(svc.parent, Some(cat[0]));
    assert_eq!(svc.query_format.as_deref(), Some("key"));
    assert_eq!(w.ov.subgroups_of(placed.service).len(), 1);
    assert!(w.ov.epm_of(placed.service).is_some());
    assert!(w.ov.epm_members(placed.service).contains(&PeerId(1)));
    let reg = placed.registration.unwrap();
    assert_eq!(reg.rv(), PeerId(1));
    assert!(w
        .ov
        .table(reg.subgroup())
        .unwrap()
        .registered
        .contains(&PeerId(1)));
    w.ov.check_well_formed().unwrap();
}

#[test]
fn nested_categories() {
    let mut w = World::new(16, &[(1, 0)]);
    w.boot(1);
    let placed = w.place(1, &["Gaming", "Xbox"], "halo");
    let gaming = w.find(GroupKind::Category, "Gaming")[0];
    let xbox = w.find(GroupKind::Category, "Xbox")[0];
    assert_eq!(w.ov.group(xbox).unwrap().parent, Some(gaming));
    assert_eq!(w.ov.group(placed.service).unwrap().parent, Some(xbox));
    assert_eq!(w.ov.name_path(placed.service), ["Gaming", "Xbox", "halo"]);
    w.ov.check_well_formed().unwrap();
}

#[test]
fn existing_path_is_reused() {
    let mut w = World::new(16, &[(1, 0), (2, 0)]);
    w.boot(1);
    w.boot(2);
    let a = w.place(1, &["Database"], "db");
    let groups_before = w.ov.groups().count();
    let b = w.place(2, &["Database"], "db");
    assert_eq!(a.service, b.service);
    assert!(!b.created_service);
    assert_eq!(w.ov.groups().count(), groups_before);
    assert_eq!(
        b.registration.unwrap().subgroup(),
        a.registration.unwrap().subgroup()
    );
    // placing again changes nothing
    let c = w.place(2, &["Database"], "db");
    assert_eq!(
        c.registration,
        b.registration.map(|r| match r {
            Registration::Accepted { .. } => r,
            _ => unreachable!(),
        })
    );
    assert_eq!(w.ov.groups().count(), groups_before);
}

#[test]
fn client_walk_gets_three_assignments() {
    let mut w = World::new(16, &[(1, 0), (2, 0), (5, 0)]);
    w.boot(1);
    w.boot(2);
    w.boot(5);
    let placed = w.place(2, &["Database"], "db");
    let root = w.find(GroupKind::Root, "root")[0];
    let cat = w.find(GroupKind::Category, "Database")[0];
    let r1 = w.with(|o, c| o.join_group(c, PeerId(5), root)).unwrap();
    let r2 = w.with(|o, c| o.join_group(c, PeerId(5), cat)).unwrap();
    let r3 = w
        .with(|o, c| o.join_group(c, PeerId(5), placed.service))
        .unwrap();
    assert_eq!((r1, r2, r3), (PeerId(1), PeerId(2), PeerId(2)));
    assert_eq!(w.ov.rv_assignment(root, PeerId(5)), Some(PeerId(1)));
}

#[test]
fn join_requires_parent_and_visibility() {
    let mut w = World::new(16, &[(1, 0), (2, 0), (3, 1)]);
    w.boot(1);
    w.boot(2);
    w.boot(3);
    let placed = w.place(2, &["Database"], "db");
    assert_eq!(
        w.with(|o, c| o.join_group(c, PeerId(3), placed.service)),
        Err(OverlayError::ParentNotJoined(placed.service))
    );
    w.split(&[1, 2], &[3]);
    let cat = w.find(GroupKind::Category, "Database")[0];
    assert_eq!(
        w.with(|o, c| o.join_group(c, PeerId(3), cat)),
        Err(OverlayError::GroupNotVisible(cat))
    );
}

#[test]
fn discovery_is_scoped_to_direct_children() {
    let mut w = World::new(16, &[(1, 0), (2, 0), (3, 0), (9, 0)]);
    for p in [1, 2, 3, 9] {
        w.boot(p);
    }
    w.place(2, &["Database"], "db");
    w.place(3, &["Gaming", "Xbox"], "halo");
    let root = w.find(GroupKind::Root, "root")[0];
    let ads = w.discover(9, root);
    let names: Vec<_> = ads.iter().map(|a| (a.kind, a.name.as_str())).collect();
    assert_eq!(
        names,
        [
            (GroupKind::Category, "Database"),
            (GroupKind::Category, "Gaming")
        ]
    );
    let cat = w.find(GroupKind::Category, "Database")[0];
    w.with(|o, c| o.join_group(c, PeerId(9), cat)).unwrap();
    let svc_ads = w.discover(9, cat);
    assert_eq!(svc_ads.len(), 1);
    assert_eq!(svc_ads[0].query_format.as_deref(), Some("key"));
}

#[test]
fn discovery_of_empty_group_and_non_member() {
    let mut w = World::new(16, &[(1, 0), (2, 0)]);
    w.boot(1);
    let root = w.find(GroupKind::Root, "root")[0];
    assert!(w.discover(1, root).is_empty());
    assert_eq!(
        w.with(|o, c| o.discover_advertisements(c, PeerId(2), root)),
        Err(OverlayError::NotAMember(root))
    );
}

#[test]
fn third_registration_splits_the_subgroup() {
    let mut w = World::new(2, &[(1, 0), (2, 0), (3, 0), (4, 0)]);
    for p in 1..=4 {
        w.boot(p);
    }
    // dedicated rendezvous 1, then three workers
    let path = vec!["Database".to_string()];
    let rv_place = w
        .with(|o, c| o.ensure_group_path(c, PeerId(1), &path, "db", "key", HostRole::Rendezvous))
        .unwrap();
    let first = w.place(2, &["Database"], "db").registration.unwrap();
    assert!(matches!(
        first,
        Registration::Accepted { rv: PeerId(1), .. }
    ));
    w.place(3, &["Database"], "db");
    let third = w.place(4, &["Database"], "db").registration.unwrap();
    let Registration::Redirected { new_rv, moved, .. } = third else {
        panic!("expected redirect, got {third:?}")
    };
    assert_eq!(new_rv, PeerId(2));
    assert_eq!(moved, Some(PeerId(2)));
    let root = w.find(GroupKind::Root, "root")[0];
    let subgroup_splits = w
        .trace
        .of_kind(EventKind::RvSplit)
        .filter(|r| r.int("group") != Some(root.0 as i64))
        .count();
    assert_eq!(subgroup_splits, 1);
    let epm = w.ov.epm_members(rv_place.service);
    assert_eq!(epm, BTreeSet::from([PeerId(1), PeerId(2)]));
    for (_, t) in w.ov.tables() {
        assert!(t.registered.len() <= 2);
    }
    w.ov.check_well_formed().unwrap();
}

#[test]
fn registration_with_dead_or_non_rv() {
    let mut w = World::new(4, &[(1, 0), (2, 0)]);
    w.boot(1);
    w.boot(2);
    w.place(1, &["Database"], "db");
    assert_eq!(
        w.with(|o, c| o.register_with_rv(c, PeerId(1), PeerId(2))),
        Err(OverlayError::NotARendezvous(PeerId(2)))
    );
    w.ov.set_alive(PeerId(1), false);
    assert_eq!(
        w.with(|o, c| o.register_with_rv(c, PeerId(2), PeerId(1))),
        Err(OverlayError::RvDead(PeerId(1)))
    );
}

fn subgroup_with(workers: &[u32]) -> (World, GroupId) {
    let mut peers = vec![(1, 0)];
    peers.extend(workers.iter().map(|w| (*w, 0)));
    let mut w = World::new(16, &peers);
    w.boot(1);
    for p in workers {
        w.boot(*p);
    }
    let path = vec!["Database".to_string()];
    let placed = w
        .with(|o, c| o.ensure_group_path(c, PeerId(1), &path, "db", "key", HostRole::Rendezvous))
        .unwrap();
    for p in workers {
        w.place(*p, &["Database"], "db");
    }
    (w, placed.registration.unwrap().subgroup())
}

#[test]
fn election_picks_lowest_alive() {
    let (mut w, sub) = subgroup_with(&[7, 3, 9]);
    w.ov.set_alive(PeerId(1), false);
    assert!(w.ov.begin_election(sub, PeerId(1)));
    assert!(
        !w.ov.begin_election(sub, PeerId(1)),
        "second trigger is ignored"
    );
    assert_eq!(w.with(|o, c| o.elect_rendezvous(c, sub)), Ok(PeerId(3)));
    assert_eq!(w.ov.table(sub).unwrap().rv, PeerId(3));
    let service = w.ov.service_of(sub).unwrap();
    assert_eq!(w.ov.epm_members(service), BTreeSet::from([PeerId(3)]));
    assert!(!w.ov.begin_election(sub, PeerId(1)), "already replaced");
}

#[test]
fn election_with_single_worker() {
    let (mut w, sub) = subgroup_with(&[4]);
    w.ov.set_alive(PeerId(1), false);
    assert_eq!(w.with(|o, c| o.elect_rendezvous(c, sub)), Ok(PeerId(4)));
    assert!(w.ov.table(sub).unwrap().registered.contains(&PeerId(4)));
}

#[test]
fn election_without_candidates_dissolves() {
    let (mut w, sub) = subgroup_with(&[4]);
    w.ov.set_alive(PeerId(1), false);
    w.ov.set_alive(PeerId(4), false);
    let service = w.ov.service_of(sub).unwrap();
    assert_eq!(
        w.with(|o, c| o.elect_rendezvous(c, sub)),
        Err(OverlayError::NoCandidates(sub))
    );
    assert!(w.ov.group(sub).is_none());
    assert!(w.ov.epm_members(service).is_empty());
    w.ov.check_well_formed().unwrap();
}

/// Two isolated networks, each with its own root, a shared "Database"
/// category and one service; client 3 lives in A.
fn two_networks() -> World {
    let mut w = World::new(16, &[(1, 0), (2, 0), (3, 0), (11, 1), (12, 1)]);
    w.split(&[1, 2, 3], &[11, 12]);
    for p in [1, 2, 3, 11, 12] {
        w.boot(p);
    }
    w.place(2, &["Database"], "S1");
    w.place(12, &["Database"], "S2");
    w
}

#[test]
fn heal_merges_and_split_restores_isolation() {
    let mut w = two_networks();
    assert_eq!(w.client_sees(3, &["Database"]), ["S1"]);

    w.net.set_partition(vec![]).unwrap();
    let summary = w.with(|o, c| o.recompute_visibility(c, ComponentChange::Heal));
    assert_eq!(summary.components.len(), 1);
    assert_eq!(
        summary.components[0].1,
        BTreeSet::from(["S1".to_string(), "S2".to_string()])
    );

    let root = w.ov.joined_root(&w.net, PeerId(3)).unwrap();
    let cats = w.discover(3, root);
    assert_eq!(cats.len(), 1, "identical categories merge into one listing");
    assert_eq!(w.client_sees(3, &["Database"]), ["S1", "S2"]);

    w.split(&[1, 2, 3], &[11, 12]);
    let summary = w.with(|o, c| o.recompute_visibility(c, ComponentChange::Split));
    assert_eq!(summary.components.len(), 2);
    assert_eq!(w.client_sees(3, &["Database"]), ["S1"]);
    let r = w.trace.of_kind(EventKind::Partition).last().unwrap();
    assert_eq!(r.text("services"), Some("S1|S2"));
}

#[test]
fn same_named_services_are_not_fused() {
    let mut w = World::new(16, &[(1, 0), (2, 0), (3, 0), (11, 1), (12, 1)]);
    w.split(&[1, 2, 3], &[11, 12]);
    for p in [1, 2, 3, 11, 12] {
        w.boot(p);
    }
    w.place(2, &["Database"], "S");
    w.place(12, &["Database"], "S");
    w.net.set_partition(vec![]).unwrap();
    assert_eq!(w.client_sees(3, &["Database"]), ["S", "S"]);
}

#[test]
fn orphaned_category_is_taken_over() {
    let mut w = World::new(16, &[(1, 0), (2, 0), (3, 0)]);
    for p in 1..=3 {
        w.boot(p);
    }
    w.place(2, &["Database"], "db");
    w.place(3, &["Database"], "db");
    w.ov.set_alive(PeerId(2), false);
    let cat = w.find(GroupKind::Category, "Database")[0];
    let rv = w.with(|o, c| o.join_group(c, PeerId(1), cat)).unwrap();
    assert_eq!(rv, PeerId(3));
}

proptest! {
    #[test]
    fn registration_capacity_and_tree_shape_hold(
        r_max in 1usize..5,
        workers in proptest::collection::btree_set(2u32..40, 1..20),
        kills in proptest::collection::vec(0usize..20, 0..4),
    ) {
        let mut peers = vec![(1u32, 0usize)];
        peers.extend(workers.iter().map(|w| (*w, 0)));
        let mut w = World::new(r_max, &peers);
        w.boot(1);
        let ws: Vec<u32> = workers.iter().copied().collect();
        for p in &ws {
            w.boot(*p);
            w.place(*p, &["A", "B"], "svc");
            w.ov.check_well_formed().map_err(TestCaseError::fail)?;
        }
        for k in kills {
            let victim = ws[k % ws.len()];
            w.ov.set_alive(PeerId(victim), false);
            if let Some(sub) = w.ov.subgroup_led_by(PeerId(victim)) {
                if w.ov.begin_election(sub, PeerId(victim)) {
                    let _ = w.with(|o, c| o.elect_rendezvous(c, sub));
                }
            } else {
                w.ov.remove_worker(PeerId(victim));
            }
            w.ov.check_well_formed().map_err(TestCaseError::fail)?;
        }
        for (_, t) in w.ov.tables() {
            prop_assert!(t.registered.len() <= r_max);
        }
    }
}
