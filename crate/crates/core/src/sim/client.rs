//! Client peers: workload arrivals, hierarchical discovery on every
//! submission, retries, and first-reply accounting.

use std::collections::{BTreeMap, BTreeSet};

use crate::entrypoint::{render_payload, Query};
use crate::fields;
use crate::ids::{GroupId, PeerId, PipeRef, QueryId};
use crate::kernel::VirtualTime;
use crate::overlay::{BootstrapOutcome, Ctx, GroupKind, Overlay};
use crate::scenario::Arrival;
use crate::trace::EventKind;

use super::{Msg, Simulation, Timer, CLIENT_PIPE};

pub(crate) struct ClientQuery {
    service: String,
    path: Vec<String>,
    n: u32,
    first_at: VirtualTime,
    attempt: u32,
}

#[derive(Default)]
pub(crate) struct ClientHost {
    open: BTreeMap<QueryId, ClientQuery>,
    answered: BTreeSet<QueryId>,
}

struct Found {
    service: GroupId,
    rv: PeerId,
    format: String,
    seen: String,
}

/// Root, then each category on the path, then the service advertisement.
/// On failure returns the service names that were visible, if any.
fn discover(
    o: &mut Overlay,
    ctx: &mut Ctx<'_>,
    c: PeerId,
    path: &[String],
    name: &str,
) -> Result<Found, String> {
    let root = match o.joined_root(ctx.net, c) {
        Some(r) => r,
        None => {
            if o.find_visible_root(ctx, c).is_none() {
                return Err(String::new());
            }
            match o.bootstrap_peer(ctx, c) {
                BootstrapOutcome::JoinedRoot { root, .. }
                | BootstrapOutcome::CreatedRoot { root } => root,
            }
        }
    };
    let mut scope = root;
    for cat in path {
        let ads = o
            .discover_advertisements(ctx, c, scope)
            .map_err(|_| String::new())?;
        let Some(gid) = ads
            .iter()
            .find(|a| a.kind == GroupKind::Category && &a.name == cat)
            .map(|a| a.group_id)
        else {
            return Err(String::new());
        };
        if !o.has_joined(ctx.net, c, gid) {
            o.join_group(ctx, c, gid).map_err(|_| String::new())?;
        }
        scope = gid;
    }
    let ads = o
        .discover_advertisements(ctx, c, scope)
        .map_err(|_| String::new())?;
    let services: Vec<_> = ads
        .iter()
        .filter(|a| a.kind == GroupKind::Service)
        .collect();
    let seen = services
        .iter()
        .map(|a| a.name.as_str())
        .collect::<Vec<_>>()
        .join(",");
    let Some(ad) = services.into_iter().find(|a| a.name == name) else {
        return Err(seen);
    };
    let current = o
        .rv_assignment(ad.group_id, c)
        .filter(|r| o.is_alive(*r) && ctx.net.connected(c, *r) && o.subgroup_led_by(*r).is_some());
    let rv = match current {
        Some(r) => r,
        None => o
            .join_group(ctx, c, ad.group_id)
            .map_err(|_| seen.clone())?,
    };
    Ok(Found {
        service: ad.group_id,
        rv,
        format: ad.query_format.clone().unwrap_or_default(),
        seen,
    })
}

impl Simulation {
    fn client_host(&mut self, p: PeerId) -> Option<&mut ClientHost> {
        self.peers.get_mut(&p).and_then(|s| s.client.as_mut())
    }

    pub(crate) fn client_start(&mut self, p: PeerId) {
        let st = self.peers.get_mut(&p).expect("known peer");
        st.client.get_or_insert_with(ClientHost::default);
        if std::mem::replace(&mut st.workloads_started, true) {
            return;
        }
        let now = self.now().as_millis();
        let firsts: Vec<(usize, u64)> = self
            .scenario()
            .workload
            .iter()
            .enumerate()
            .filter(|(_, w)| w.client == p && w.count > 0)
            .filter_map(|(i, w)| match &w.arrival {
                Arrival::Rate { start_ms, .. } => Some((i, *start_ms)),
                Arrival::Schedule { at_ms } => at_ms.first().map(|t| (i, *t)),
            })
            .collect();
        for (i, at) in firsts {
            self.schedule_timer(
                p,
                at.saturating_sub(now),
                0,
                Timer::Arrival { workload: i, n: 0 },
            );
        }
    }

    /// Arrival `n` of a workload. Arrivals keep their pace while the client
    /// is down; those queries are simply never issued.
    pub(crate) fn client_arrival(&mut self, p: PeerId, workload: usize, n: u32) {
        let now = self.now();
        let wl = self.scenario().workload[workload].clone();
        if self.alive(p) && self.client_host(p).is_some() {
            let path = self
                .scenario()
                .services
                .iter()
                .find(|s| s.name == wl.service)
                .map(|s| s.path.clone())
                .unwrap_or_default();
            let id = self.next_query_id();
            self.client_host(p).expect("checked above").open.insert(
                id,
                ClientQuery {
                    service: wl.service.clone(),
                    path,
                    n,
                    first_at: now,
                    attempt: 1,
                },
            );
            self.client_submit(p, id);
        }
        if n + 1 >= wl.count {
            return;
        }
        let delay = match &wl.arrival {
            Arrival::Rate { every_ms, .. } => {
                let mult = match self.boost.get(&wl.service) {
                    Some((m, until)) if now < *until => u64::from((*m).max(1)),
                    _ => 1,
                };
                (every_ms / mult).max(1)
            }
            Arrival::Schedule { at_ms } => match at_ms.get(n as usize + 1) {
                Some(t) => t.saturating_sub(now.as_millis()),
                None => return,
            },
        };
        self.schedule_timer(p, delay, 0, Timer::Arrival { workload, n: n + 1 });
    }

    fn client_submit(&mut self, p: PeerId, id: QueryId) {
        let (query_timeout, discovery_timeout) =
            (self.params().query_timeout, self.params().discovery_timeout);
        let host = self.client_host(p).expect("caller checked");
        let cq = &host.open[&id];
        let (path, name, n, first_at, attempt) = (
            cq.path.clone(),
            cq.service.clone(),
            cq.n,
            cq.first_at,
            cq.attempt,
        );
        match self.with_overlay(|o, c| discover(o, c, p, &path, &name)) {
            Ok(found) => {
                let query = Query {
                    query_id: id,
                    client_pipe: PipeRef::new(p, CLIENT_PIPE),
                    service_group: found.service,
                    payload: render_payload(&found.format, &n.to_string()),
                    submitted_at: first_at,
                };
                self.emit(
                    EventKind::QuerySubmitted,
                    p,
                    fields! {
                        "query_id" => id,
                        "client" => p,
                        "service" => found.service,
                        "name" => name,
                        "rv" => found.rv,
                        "attempt" => attempt,
                        "seen" => found.seen,
                    },
                );
                self.send(p, found.rv, Msg::QuerySubmit(query));
                self.schedule_peer_timer(
                    p,
                    query_timeout,
                    Timer::QueryTimeout {
                        query_id: id,
                        attempt,
                    },
                );
            }
            Err(seen) => {
                self.emit(
                    EventKind::MsgDropped,
                    p,
                    fields! {
                        "to" => p,
                        "reason" => "service_not_found",
                        "query" => id,
                        "name" => name,
                        "seen" => seen,
                    },
                );
                self.schedule_peer_timer(
                    p,
                    discovery_timeout,
                    Timer::QueryTimeout {
                        query_id: id,
                        attempt,
                    },
                );
            }
        }
    }

    pub(crate) fn client_timeout(&mut self, p: PeerId, id: QueryId, attempt: u32) {
        let Some(h) = self.client_host(p) else { return };
        let Some(cq) = h.open.get_mut(&id) else {
            return;
        };
        if cq.attempt != attempt {
            return;
        }
        cq.attempt += 1;
        self.client_submit(p, id);
    }

    /// Only the first reply per query counts; later ones are duplicates.
    pub(crate) fn client_on_reply(&mut self, p: PeerId, id: QueryId, worker: PeerId) {
        let now = self.now();
        let Some(h) = self.client_host(p) else { return };
        if let Some(cq) = h.open.remove(&id) {
            h.answered.insert(id);
            self.emit(
                EventKind::QueryServiced,
                p,
                fields! {
                    "query_id" => id,
                    "worker" => worker,
                    "client" => p,
                    "latency" => now.saturating_sub(cq.first_at),
                },
            );
        } else if h.answered.contains(&id) {
            self.emit(
                EventKind::DuplicateReply,
                p,
                fields! { "query_id" => id, "worker" => worker },
            );
        }
    }
}
