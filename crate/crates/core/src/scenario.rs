//! Scenario documents: topology, services, workload and a fault timeline,
//! written in TOML.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::PeerId;
use crate::network::{LinkLatencies, LossRate};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScenarioError {
    #[error("{}", match .line { Some(l) => format!("line {l}: {message}"), None => message.clone() })]
    Parse {
        line: Option<usize>,
        message: String,
    },
    #[error("{field}: {message}")]
    Reference { field: String, message: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    /// Virtual end of the run in milliseconds.
    pub duration_ms: u64,
    pub networks: Vec<NetworkSpec>,
    pub peers: Vec<PeerSpec>,
    pub services: Vec<ServiceSpec>,
    #[serde(default)]
    pub workload: Vec<WorkloadSpec>,
    #[serde(default)]
    pub timeline: Vec<TimelineEvent>,
    #[serde(default)]
    pub params: Params,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub name: String,
    pub intra_subgroup_ms: u64,
    pub inter_subgroup_ms: u64,
    pub inter_network_ms: u64,
}

impl NetworkSpec {
    pub fn latencies(&self) -> LinkLatencies {
        LinkLatencies {
            intra_subgroup: self.intra_subgroup_ms,
            inter_subgroup: self.inter_subgroup_ms,
            inter_network: self.inter_network_ms,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleHint {
    Rendezvous,
    Worker,
    Client,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeerSpec {
    pub id: PeerId,
    pub network: String,
    pub role: RoleHint,
    /// Idle peer a monitor may host a new worker service on.
    #[serde(default)]
    pub spare: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ServiceTime {
    Constant { ms: u64 },
    Uniform { lo: u64, hi: u64 },
}

impl ServiceTime {
    pub fn max_ms(self) -> u64 {
        match self {
            ServiceTime::Constant { ms } => ms,
            ServiceTime::Uniform { hi, .. } => hi,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceSpec {
    /// Category names from below the root down to the service.
    #[serde(default)]
    pub path: Vec<String>,
    pub name: String,
    pub query_format: String,
    pub workers: Vec<PeerId>,
    /// A rendezvous peer that hosts the service's entry point without
    /// doing query work itself. Absent: the first worker takes that role.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rendezvous: Option<PeerId>,
    pub service_time: ServiceTime,
    pub t_initial: u32,
    #[serde(default = "default_x")]
    pub x_secs: u32,
    #[serde(default = "default_t_min")]
    pub t_min: u32,
}

fn default_x() -> u32 {
    2
}

fn default_t_min() -> u32 {
    1
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Arrival {
    Rate { start_ms: u64, every_ms: u64 },
    Schedule { at_ms: Vec<u64> },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub client: PeerId,
    pub service: String,
    pub arrival: Arrival,
    pub count: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Action {
    KillPeer(PeerId),
    RevivePeer(PeerId),
    Partition(Vec<BTreeSet<PeerId>>),
    Heal,
    InjectLoad {
        service: String,
        multiplier: u32,
        duration_ms: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawEvent", into = "RawEvent")]
pub struct TimelineEvent {
    pub at: u64,
    pub action: Action,
}

/// Flat on-disk shape of a timeline entry.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEvent {
    at: u64,
    action: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    peer: Option<PeerId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sets: Option<Vec<Vec<PeerId>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    service: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    multiplier: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    duration_ms: Option<u64>,
}

impl TryFrom<RawEvent> for TimelineEvent {
    type Error = String;

    fn try_from(r: RawEvent) -> Result<Self, String> {
        let need = |what: &str| format!("action {} requires `{what}`", r.action);
        let extra = |ok: &[&str]| -> Result<(), String> {
            let present = [
                ("peer", r.peer.is_some()),
                ("sets", r.sets.is_some()),
                ("service", r.service.is_some()),
                ("multiplier", r.multiplier.is_some()),
                ("duration_ms", r.duration_ms.is_some()),
            ];
            match present.iter().find(|(k, p)| *p && !ok.contains(k)) {
                Some((k, _)) => Err(format!("action {} does not take `{k}`", r.action)),
                None => Ok(()),
            }
        };
        let action = match r.action.as_str() {
            "kill_peer" => {
                extra(&["peer"])?;
                Action::KillPeer(r.peer.ok_or_else(|| need("peer"))?)
            }
            "revive_peer" => {
                extra(&["peer"])?;
                Action::RevivePeer(r.peer.ok_or_else(|| need("peer"))?)
            }
            "partition" => {
                extra(&["sets"])?;
                let sets = r.sets.clone().ok_or_else(|| need("sets"))?;
                Action::Partition(sets.into_iter().map(|s| s.into_iter().collect()).collect())
            }
            "heal" => {
                extra(&[])?;
                Action::Heal
            }
            "inject_load" => {
                extra(&["service", "multiplier", "duration_ms"])?;
                Action::InjectLoad {
                    service: r.service.clone().ok_or_else(|| need("service"))?,
                    multiplier: r.multiplier.ok_or_else(|| need("multiplier"))?,
                    duration_ms: r.duration_ms.ok_or_else(|| need("duration_ms"))?,
                }
            }
            other => return Err(format!("unknown action `{other}`")),
        };
        Ok(TimelineEvent { at: r.at, action })
    }
}

impl From<TimelineEvent> for RawEvent {
    fn from(e: TimelineEvent) -> Self {
        let mut r = RawEvent {
            at: e.at,
            ..RawEvent::default()
        };
        match e.action {
            Action::KillPeer(p) => {
                r.action = "kill_peer".into();
                r.peer = Some(p);
            }
            Action::RevivePeer(p) => {
                r.action = "revive_peer".into();
                r.peer = Some(p);
            }
            Action::Partition(sets) => {
                r.action = "partition".into();
                r.sets = Some(sets.into_iter().map(|s| s.into_iter().collect()).collect());
            }
            Action::Heal => r.action = "heal".into(),
            Action::InjectLoad {
                service,
                multiplier,
                duration_ms,
            } => {
                r.action = "inject_load".into();
                r.service = Some(service);
                r.multiplier = Some(multiplier);
                r.duration_ms = Some(duration_ms);
            }
        }
        r
    }
}

/// Loss probability written as `"num/den"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Ratio(pub LossRate);

impl FromStr for Ratio {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (n, d) = s
            .split_once('/')
            .ok_or_else(|| format!("expected num/den, got `{s}`"))?;
        let num = n
            .trim()
            .parse()
            .map_err(|_| format!("bad numerator in `{s}`"))?;
        let den = d
            .trim()
            .parse()
            .map_err(|_| format!("bad denominator in `{s}`"))?;
        Ok(Ratio(LossRate { num, den }))
    }
}

impl TryFrom<String> for Ratio {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<Ratio> for String {
    fn from(r: Ratio) -> String {
        r.to_string()
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.0.num, self.0.den)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Params {
    pub r_max: u32,
    pub heartbeat_period: u64,
    pub k: u32,
    pub exchange_interval: u64,
    pub election_delay: u64,
    /// Filled in as `2 * k * heartbeat_period` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rv_wait_timeout: Option<u64>,
    pub jitter_max: u64,
    pub loss_prob: Ratio,
    /// How long a client waits for a reply before retrying.
    pub query_timeout: u64,
    /// How long a bootstrapping peer looks for a root before creating one.
    pub discovery_timeout: u64,
    /// Saturated exchange slots before a worker service is spawned.
    pub spawn_after_slots: u32,
    pub consolidation: bool,
    pub r_min: u32,
}

impl Default for Params {
    fn default() -> Self {
        Self {
            r_max: 16,
            heartbeat_period: 500,
            k: 3,
            exchange_interval: 1000,
            election_delay: 200,
            rv_wait_timeout: None,
            jitter_max: 0,
            loss_prob: Ratio(LossRate::NONE),
            query_timeout: 5000,
            discovery_timeout: 1000,
            spawn_after_slots: 3,
            consolidation: false,
            r_min: 2,
        }
    }
}

impl Params {
    pub fn rv_wait_timeout(&self) -> u64 {
        self.rv_wait_timeout
            .unwrap_or(2 * u64::from(self.k) * self.heartbeat_period)
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Parses a scenario, fills in defaults and checks that every reference
/// names something declared.
pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let mut s: Scenario = toml::from_str(text).map_err(|e| ScenarioError::Parse {
        line: e.span().map(|r| line_of(text, r.start)),
        message: e.message().to_string(),
    })?;
    s.params.rv_wait_timeout = Some(s.params.rv_wait_timeout());
    check_references(&s)?;
    Ok(s)
}

pub fn to_toml(s: &Scenario) -> String {
    toml::to_string(s).expect("scenario is always representable")
}

fn check_references(s: &Scenario) -> Result<(), ScenarioError> {
    let peers: BTreeSet<PeerId> = s.peers.iter().map(|p| p.id).collect();
    let networks: BTreeSet<&str> = s.networks.iter().map(|n| n.name.as_str()).collect();
    let services: BTreeSet<&str> = s.services.iter().map(|x| x.name.as_str()).collect();
    let bad = |field: String, message: String| Err(ScenarioError::Reference { field, message });
    for (i, p) in s.peers.iter().enumerate() {
        if !networks.contains(p.network.as_str()) {
            return bad(
                format!("peers[{i}].network"),
                format!("undeclared network `{}`", p.network),
            );
        }
    }
    for (i, svc) in s.services.iter().enumerate() {
        for w in &svc.workers {
            if !peers.contains(w) {
                return bad(
                    format!("services[{i}].workers"),
                    format!("undeclared peer {w}"),
                );
            }
        }
        if let Some(rv) = svc.rendezvous {
            if !peers.contains(&rv) {
                return bad(
                    format!("services[{i}].rendezvous"),
                    format!("undeclared peer {rv}"),
                );
            }
        }
    }
    for (i, w) in s.workload.iter().enumerate() {
        if !peers.contains(&w.client) {
            return bad(
                format!("workload[{i}].client"),
                format!("undeclared peer {}", w.client),
            );
        }
        if !services.contains(w.service.as_str()) {
            return bad(
                format!("workload[{i}].service"),
                format!("undeclared service `{}`", w.service),
            );
        }
    }
    for (i, e) in s.timeline.iter().enumerate() {
        let field = format!("timeline[{i}]");
        match &e.action {
            Action::KillPeer(p) | Action::RevivePeer(p) if !peers.contains(p) => {
                return bad(field, format!("undeclared peer {p}"));
            }
            Action::Partition(sets) => {
                if let Some(p) = sets.iter().flatten().find(|p| !peers.contains(p)) {
                    return bad(field, format!("undeclared peer {p}"));
                }
            }
            Action::InjectLoad { service, .. } if !services.contains(service.as_str()) => {
                return bad(field, format!("undeclared service `{service}`"));
            }
            _ => {}
        }
    }
    Ok(())
}

/// Semantic checks. Returns every violation found.
pub fn validate_scenario(s: &Scenario) -> Result<(), Vec<String>> {
    let mut v = Vec::new();
    let mut ids = BTreeSet::new();
    for p in &s.peers {
        if !ids.insert(p.id) {
            v.push(format!("duplicate peer id {}", p.id));
        }
    }
    let mut names = BTreeSet::new();
    for n in &s.networks {
        if !names.insert(n.name.as_str()) {
            v.push(format!("duplicate network `{}`", n.name));
        }
    }
    if s.networks.is_empty() {
        v.push("no networks declared".into());
    }
    if s.duration_ms == 0 {
        v.push("duration_ms must be positive".into());
    }
    let roles: BTreeMap<PeerId, RoleHint> = s.peers.iter().map(|p| (p.id, p.role)).collect();
    let mut owner: BTreeMap<PeerId, &str> = BTreeMap::new();
    let mut svc_names = BTreeSet::new();
    for svc in &s.services {
        let n = &svc.name;
        if !svc_names.insert((svc.path.clone(), n.as_str())) {
            v.push(format!("service `{n}` declared twice under the same path"));
        }
        if svc.path.is_empty() {
            v.push(format!("service `{n}` needs a category path"));
        }
        if svc.workers.is_empty() {
            v.push(format!("service `{n}` needs at least one worker"));
        }
        if svc.t_min == 0 {
            v.push(format!("service `{n}`: t_min must be at least 1"));
        }
        if svc.t_initial < svc.t_min.max(1) {
            v.push(format!(
                "service `{n}`: t_initial {} is below t_min {}",
                svc.t_initial,
                svc.t_min.max(1)
            ));
        }
        if svc.x_secs == 0 {
            v.push(format!("service `{n}`: x_secs must be positive"));
        } else if u64::from(svc.x_secs) * 1000 < s.params.heartbeat_period {
            v.push(format!(
                "service `{n}`: window shorter than the heartbeat period"
            ));
        }
        if svc.query_format.split(',').all(|f| f.trim().is_empty()) {
            v.push(format!("service `{n}`: empty query_format"));
        }
        if svc
            .path
            .iter()
            .chain([n])
            .any(|x| x.is_empty() || x.contains('/') || x.contains('#'))
        {
            v.push(format!(
                "service `{n}`: names may not be empty or contain '/' or '#'"
            ));
        }
        if let ServiceTime::Uniform { lo, hi } = svc.service_time {
            if lo > hi {
                v.push(format!(
                    "service `{n}`: uniform service time lo {lo} > hi {hi}"
                ));
            }
        }
        for w in svc.workers.iter().chain(svc.rendezvous.iter()) {
            if let Some(prev) = owner.insert(*w, n) {
                v.push(format!("peer {w} serves both `{prev}` and `{n}`"));
            }
        }
        for w in &svc.workers {
            if roles.get(w) != Some(&RoleHint::Worker) {
                v.push(format!(
                    "service `{n}`: peer {w} is not declared as a worker"
                ));
            }
            if svc.rendezvous == Some(*w) {
                v.push(format!(
                    "service `{n}`: peer {w} is both rendezvous and worker"
                ));
            }
        }
        if let Some(rv) = svc.rendezvous {
            if roles.get(&rv) != Some(&RoleHint::Rendezvous) {
                v.push(format!(
                    "service `{n}`: peer {rv} is not declared as a rendezvous"
                ));
            }
        }
    }
    for p in &s.peers {
        if p.spare && (p.role != RoleHint::Worker || owner.contains_key(&p.id)) {
            v.push(format!("spare peer {} must be an unassigned worker", p.id));
        }
    }
    for w in &s.workload {
        if roles.get(&w.client) != Some(&RoleHint::Client) {
            v.push(format!(
                "workload client {} is not declared as a client",
                w.client
            ));
        }
        match &w.arrival {
            Arrival::Rate { every_ms: 0, .. } => v.push(format!(
                "workload of {}: every_ms must be positive",
                w.client
            )),
            Arrival::Schedule { at_ms } => {
                if at_ms.windows(2).any(|p| p[0] > p[1]) {
                    v.push(format!("workload of {}: schedule is not sorted", w.client));
                }
                if at_ms.len() < w.count as usize {
                    v.push(format!(
                        "workload of {}: schedule lists fewer than count arrivals",
                        w.client
                    ));
                }
            }
            _ => {}
        }
    }
    if s.timeline.windows(2).any(|p| p[0].at > p[1].at) {
        v.push("timeline times must be non-decreasing".into());
    }
    for e in &s.timeline {
        match &e.action {
            Action::Partition(sets) => {
                let mut seen = BTreeSet::new();
                for p in sets.iter().flatten() {
                    if !seen.insert(*p) {
                        v.push(format!(
                            "timeline at {}: peer {p} in two partition sets",
                            e.at
                        ));
                    }
                }
            }
            Action::InjectLoad { multiplier: 0, .. } => {
                v.push(format!("timeline at {}: multiplier must be positive", e.at));
            }
            _ => {}
        }
    }
    let p = &s.params;
    if p.r_max == 0 {
        v.push("r_max must be at least 1".into());
    }
    if p.heartbeat_period == 0 || p.exchange_interval == 0 || p.k == 0 {
        v.push("heartbeat_period, exchange_interval and k must be positive".into());
    }
    if p.query_timeout == 0 || p.discovery_timeout == 0 {
        v.push("query_timeout and discovery_timeout must be positive".into());
    }
    if p.spawn_after_slots == 0 {
        v.push("spawn_after_slots must be positive".into());
    }
    let loss = p.loss_prob.0;
    if loss.den == 0 || loss.num > loss.den {
        v.push(format!("loss_prob {} is not a probability", p.loss_prob));
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}
