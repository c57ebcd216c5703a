//! Structured trace records.
//!
//! One JSON object per line, keys always in the order `t`, `seq`, `ev`,
//! `actor`, `d`; the keys inside `d` are sorted. Numbers are integers only;
//! rationals are rendered as `"num/den"` strings. The first line of a trace
//! file is `format=1`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::de::{self, Deserializer};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{GroupId, PeerId, QueryId};
use crate::kernel::VirtualTime;

pub const FORMAT_HEADER: &str = "format=1";

macro_rules! event_kinds {
    ($($variant:ident => $tag:literal),* $(,)?) => {
        /// Closed set of trace event tags.
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub enum EventKind {
            $($variant),*
        }

        impl EventKind {
            pub const ALL: &'static [EventKind] = &[$(EventKind::$variant),*];

            pub fn as_str(self) -> &'static str {
                match self {
                    $(EventKind::$variant => $tag),*
                }
            }
        }

        impl FromStr for EventKind {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($tag => Ok(EventKind::$variant),)*
                    other => Err(format!("unknown event tag {other:?}")),
                }
            }
        }
    };
}

event_kinds! {
    PeerBootstrap => "peer_bootstrap",
    GroupCreated => "group_created",
    Joined => "joined",
    Registered => "registered",
    RvSplit => "rv_split",
    Election => "election",
    QuerySubmitted => "query_submitted",
    QueryScheduled => "query_scheduled",
    QueryRescheduled => "query_rescheduled",
    QueryServiced => "query_serviced",
    QueryCancelled => "query_cancelled",
    DuplicateReply => "duplicate_reply",
    Heartbeat => "heartbeat",
    FailureDetected => "failure_detected",
    TableExchange => "table_exchange",
    Spawn => "spawn",
    MsgDropped => "msg_dropped",
    ThresholdUpdate => "threshold_update",
    Partition => "partition",
    Heal => "heal",
    LateServicedIgnored => "late_serviced_ignored",
    Cancelled => "cancelled",
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for EventKind {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for EventKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(de::Error::custom)
    }
}

/// Who emitted a record: a peer, or the kernel itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Actor {
    Kernel,
    Peer(PeerId),
}

impl Serialize for Actor {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Actor::Kernel => s.serialize_str("kernel"),
            Actor::Peer(p) => s.serialize_u32(p.0),
        }
    }
}

impl<'de> Deserialize<'de> for Actor {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Id(u32),
            Name(String),
        }
        match Raw::deserialize(d)? {
            Raw::Id(id) => Ok(Actor::Peer(PeerId(id))),
            Raw::Name(n) if n == "kernel" => Ok(Actor::Kernel),
            Raw::Name(n) => Err(de::Error::custom(format!("bad actor {n:?}"))),
        }
    }
}

impl From<PeerId> for Actor {
    fn from(p: PeerId) -> Self {
        Actor::Peer(p)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Int(i64),
    Text(String),
}

impl Value {
    pub fn as_int(&self) -> Option<i64> {
        match self {
            Value::Int(v) => Some(*v),
            Value::Text(_) => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Value::Text(s) => Some(s),
            Value::Int(_) => None,
        }
    }
}

macro_rules! int_value {
    ($($t:ty),*) => {$(
        impl From<$t> for Value {
            fn from(v: $t) -> Self {
                Value::Int(v as i64)
            }
        }
    )*};
}
int_value!(i64, i32, u32, u64, usize);

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Text(v.to_owned())
    }
}

impl From<String> for Value {
    fn from(v: String) -> Self {
        Value::Text(v)
    }
}

impl From<PeerId> for Value {
    fn from(v: PeerId) -> Self {
        Value::Int(v.0 as i64)
    }
}

impl From<GroupId> for Value {
    fn from(v: GroupId) -> Self {
        Value::Int(v.0 as i64)
    }
}

impl From<QueryId> for Value {
    fn from(v: QueryId) -> Self {
        Value::Int(v.0 as i64)
    }
}

impl From<VirtualTime> for Value {
    fn from(v: VirtualTime) -> Self {
        Value::Int(v.as_millis() as i64)
    }
}

impl From<bool> for Value {
    fn from(v: bool) -> Self {
        Value::Int(v as i64)
    }
}

pub type Fields = BTreeMap<String, Value>;

/// Builds a [`Fields`] map: `fields! { "query_id" => q, "worker" => w }`.
#[macro_export]
macro_rules! fields {
    () => { $crate::trace::Fields::new() };
    ($($k:literal => $v:expr),+ $(,)?) => {{
        let mut m = $crate::trace::Fields::new();
        $( m.insert($k.to_string(), $crate::trace::Value::from($v)); )+
        m
    }};
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: u64,
    pub seq: u64,
    pub ev: EventKind,
    pub actor: Actor,
    pub d: Fields,
}

impl TraceRecord {
    pub fn int(&self, key: &str) -> Option<i64> {
        self.d.get(key).and_then(Value::as_int)
    }

    pub fn text(&self, key: &str) -> Option<&str> {
        self.d.get(key).and_then(Value::as_text)
    }

    pub fn peer(&self, key: &str) -> Option<PeerId> {
        self.int(key).map(|v| PeerId(v as u32))
    }

    pub fn query_id(&self) -> Option<QueryId> {
        self.int("query_id").map(|v| QueryId(v as u64))
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("trace records always serialize")
    }
}

/// Counters kept alongside the record stream for quantities that have no
/// record of their own. Not part of the serialized trace.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TraceStats {
    pub messages_sent: u64,
}

#[derive(Clone, Debug, Default)]
pub struct Trace {
    records: Vec<TraceRecord>,
    pub stats: TraceStats,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records(records: Vec<TraceRecord>) -> Self {
        Self {
            records,
            stats: TraceStats::default(),
        }
    }

    /// Appends a record; `seq` is the record's position in the stream.
    pub fn emit(&mut self, t: VirtualTime, ev: EventKind, actor: impl Into<Actor>, d: Fields) {
        let seq = self.records.len() as u64;
        debug_assert!(self.records.last().is_none_or(|r| r.t <= t.as_millis()));
        self.records.push(TraceRecord {
            t: t.as_millis(),
            seq,
            ev,
            actor: actor.into(),
            d,
        });
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn of_kind(&self, ev: EventKind) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter().filter(move |r| r.ev == ev)
    }

    /// Serialized form: header line, then one record per line.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.records.len() * 96);
        out.push_str(FORMAT_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&r.to_line());
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum TraceParseError {
    #[error("missing or wrong format header (expected {FORMAT_HEADER:?})")]
    Header,
    #[error("line {line}: {source}")]
    Record {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceRecord>, TraceParseError> {
    let mut lines = text.lines();
    if lines.next() != Some(FORMAT_HEADER) {
        return Err(TraceParseError::Header);
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|source| TraceParseError::Record {
                line: i + 2,
                source,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_order_is_fixed() {
        let mut t = Trace::new();
        t.emit(
            VirtualTime(5),
            EventKind::ThresholdUpdate,
            PeerId(3),
            fields! { "t_old" => 10u32, "qx" => 4u32, "raw" => -4i64, "clamped" => 1u32 },
        );
        assert_eq!(
            t.records()[0].to_line(),
            r#"{"t":5,"seq":0,"ev":"threshold_update","actor":3,"d":{"clamped":1,"qx":4,"raw":-4,"t_old":10}}"#
        );
    }

    #[test]
    fn text_round_trip() {
        let mut t = Trace::new();
        t.emit(
            VirtualTime(0),
            EventKind::Heal,
            Actor::Kernel,
            fields! { "services" => "a|b" },
        );
        t.emit(
            VirtualTime(0),
            EventKind::Joined,
            PeerId(1),
            fields! { "group" => GroupId(2) },
        );
        let text = t.to_text();
        assert!(text.starts_with("format=1\n"));
        assert_eq!(parse_trace(&text).unwrap(), t.records());
    }

    #[test]
    fn every_tag_parses_back() {
        for k in EventKind::ALL {
            assert_eq!(k.as_str().parse::<EventKind>().unwrap(), *k);
        }
        assert!("query_enqueued".parse::<EventKind>().is_err());
    }

    #[test]
    fn header_required() {
        assert!(matches!(parse_trace("{}\n"), Err(TraceParseError::Header)));
    }
}
