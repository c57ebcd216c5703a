//! Post-run aggregation over a trace, the per-query lifecycle check, and
//! output writers.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::ids::QueryId;
use crate::trace::{EventKind, Trace, TraceRecord, FORMAT_HEADER};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("record {seq} at t={t} is out of order")]
    MalformedTrace { t: u64, seq: u64 },
}

/// Submit-to-first-reply latency over serviced queries, in milliseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LatencyStats {
    pub count: u64,
    pub sum: u64,
    pub p50: u64,
    pub p95: u64,
    pub max: u64,
}

impl LatencyStats {
    fn from_samples(mut v: Vec<u64>) -> Self {
        if v.is_empty() {
            return Self::default();
        }
        v.sort_unstable();
        let rank = |p: u64| -> u64 {
            let n = v.len() as u64;
            let r = (p * n).div_ceil(100).max(1);
            v[(r - 1) as usize]
        };
        Self {
            count: v.len() as u64,
            sum: v.iter().sum(),
            p50: rank(50),
            p95: rank(95),
            max: *v.last().unwrap(),
        }
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum as f64 / self.count as f64
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MetricsReport {
    pub queries_submitted: u64,
    pub queries_serviced: u64,
    pub duplicate_replies: u64,
    pub rescheduled: u64,
    pub elections: u64,
    pub rv_splits: u64,
    pub messages_sent: u64,
    pub messages_dropped: u64,
    pub latency_ms: LatencyStats,
    pub pending_depth_max: u64,
}

impl MetricsReport {
    /// Serviced over submitted, unreduced.
    pub fn availability(&self) -> (u64, u64) {
        (self.queries_serviced, self.queries_submitted)
    }

    pub fn availability_decimal(&self) -> f64 {
        match self.queries_submitted {
            0 => 0.0,
            d => self.queries_serviced as f64 / d as f64,
        }
    }

    /// Every submitted query was serviced.
    pub fn fully_available(&self) -> bool {
        self.queries_submitted > 0 && self.queries_serviced == self.queries_submitted
    }

    pub const CSV_COLUMNS: [&'static str; 15] = [
        "queries_submitted",
        "queries_serviced",
        "duplicate_replies",
        "rescheduled",
        "elections",
        "rv_splits",
        "messages_sent",
        "messages_dropped",
        "availability",
        "availability_decimal",
        "latency_mean_ms",
        "latency_p50_ms",
        "latency_p95_ms",
        "latency_max_ms",
        "pending_depth_max",
    ];

    fn csv_values(&self) -> [String; 15] {
        let (n, d) = self.availability();
        [
            self.queries_submitted.to_string(),
            self.queries_serviced.to_string(),
            self.duplicate_replies.to_string(),
            self.rescheduled.to_string(),
            self.elections.to_string(),
            self.rv_splits.to_string(),
            self.messages_sent.to_string(),
            self.messages_dropped.to_string(),
            format!("{n}/{d}"),
            format!("{:.6}", self.availability_decimal()),
            format!("{:.3}", self.latency_ms.mean()),
            self.latency_ms.p50.to_string(),
            self.latency_ms.p95.to_string(),
            self.latency_ms.max.to_string(),
            self.pending_depth_max.to_string(),
        ]
    }

    /// `format=1`, the header row, one value row.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(Self::CSV_COLUMNS).expect("in-memory write");
        w.write_record(self.csv_values()).expect("in-memory write");
        let body = String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii");
        format!("{FORMAT_HEADER}\n{body}")
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in Self::CSV_COLUMNS.iter().zip(self.csv_values()) {
            writeln!(f, "{k:<22}{v}")?;
        }
        Ok(())
    }
}

/// Aggregates a finished run. A query counts as submitted once a client
/// issues it, even if discovery never found the service. `messages_sent`
/// comes from the trace's side counter and is zero for a trace read back
/// from text.
pub fn summarize(trace: &Trace) -> Result<MetricsReport, MetricsError> {
    let records = trace.records();
    for w in records.windows(2) {
        if (w[1].t, w[1].seq) <= (w[0].t, w[0].seq) {
            return Err(MetricsError::MalformedTrace {
                t: w[1].t,
                seq: w[1].seq,
            });
        }
    }
    let mut submitted: BTreeMap<QueryId, u64> = BTreeMap::new();
    // Issued by a client but never routed because discovery kept failing.
    let mut undiscovered: BTreeSet<QueryId> = BTreeSet::new();
    let mut latencies = Vec::new();
    let mut m = MetricsReport {
        messages_sent: trace.stats.messages_sent,
        ..MetricsReport::default()
    };
    for r in records {
        match r.ev {
            EventKind::QuerySubmitted => {
                if let Some(q) = r.query_id() {
                    submitted.entry(q).or_insert(r.t);
                }
            }
            EventKind::QueryServiced => {
                m.queries_serviced += 1;
                if let Some(start) = r.query_id().and_then(|q| submitted.get(&q)) {
                    latencies.push(r.t - start);
                }
            }
            EventKind::DuplicateReply => m.duplicate_replies += 1,
            EventKind::QueryRescheduled => {
                m.rescheduled += 1;
                if let Some(d) = r.int("depth") {
                    m.pending_depth_max = m.pending_depth_max.max(d as u64);
                }
            }
            EventKind::Election => m.elections += 1,
            EventKind::RvSplit => m.rv_splits += 1,
            EventKind::MsgDropped => {
                m.messages_dropped += 1;
                if r.text("reason") == Some("service_not_found") {
                    if let Some(q) = r.int("query") {
                        undiscovered.insert(QueryId(q as u64));
                    }
                }
            }
            EventKind::QueryScheduled => {
                if let Some(d) = r.int("depth") {
                    m.pending_depth_max = m.pending_depth_max.max(d as u64);
                }
            }
            _ => {}
        }
    }
    undiscovered.retain(|q| !submitted.contains_key(q));
    m.queries_submitted = (submitted.len() + undiscovered.len()) as u64;
    m.latency_ms = LatencyStats::from_samples(latencies);
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LifecycleViolation {
    pub query_id: QueryId,
    pub seq: u64,
    pub message: String,
}

impl fmt::Display for LifecycleViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "query {} at seq {}: {}",
            self.query_id, self.seq, self.message
        )
    }
}

/// Checks each query's records against
/// submitted → scheduled → (scheduled | rescheduled)* → serviced.
/// Client retries may repeat `submitted` before the terminal record; cancels
/// and duplicate replies may follow it.
pub fn check_lifecycles(records: &[TraceRecord]) -> Vec<LifecycleViolation> {
    #[derive(Clone, Copy, PartialEq, Eq)]
    enum St {
        Submitted,
        Assigned,
        Serviced,
    }
    let mut st: BTreeMap<QueryId, St> = BTreeMap::new();
    let mut out = Vec::new();
    for r in records {
        let Some(q) = r.query_id() else { continue };
        let cur = st.get(&q).copied();
        let mut bad = |m: &str| {
            out.push(LifecycleViolation {
                query_id: q,
                seq: r.seq,
                message: m.to_string(),
            })
        };
        let next = match (r.ev, cur) {
            (EventKind::QuerySubmitted, None | Some(St::Submitted)) => Some(St::Submitted),
            (EventKind::QuerySubmitted, Some(St::Assigned)) => Some(St::Assigned),
            (EventKind::QueryScheduled, Some(St::Submitted | St::Assigned)) => Some(St::Assigned),
            (EventKind::QueryRescheduled, Some(St::Assigned)) => Some(St::Assigned),
            (EventKind::QueryServiced, Some(St::Assigned)) => Some(St::Serviced),
            (
                EventKind::QueryCancelled
                | EventKind::Cancelled
                | EventKind::DuplicateReply
                | EventKind::LateServicedIgnored,
                Some(_),
            ) => cur,
            (
                EventKind::QuerySubmitted
                | EventKind::QueryScheduled
                | EventKind::QueryRescheduled
                | EventKind::QueryServiced,
                Some(St::Serviced),
            ) => {
                bad(&format!("{} after serviced", r.ev.as_str()));
                cur
            }
            (EventKind::QueryRescheduled, Some(St::Submitted)) => {
                bad("rescheduled before first schedule");
                cur
            }
            (EventKind::QueryServiced, Some(St::Submitted)) => {
                bad("serviced before scheduled");
                cur
            }
            (ev, None) => {
                bad(&format!("{} before submitted", ev.as_str()));
                None
            }
            _ => cur,
        };
        if let Some(n) = next {
            st.insert(q, n);
        }
    }
    out
}

/// Writes the trace and the CSV report.
pub fn write_outputs(
    trace: &Trace,
    report: &MetricsReport,
    trace_path: &Path,
    metrics_path: &Path,
) -> io::Result<()> {
    std::fs::write(trace_path, trace.to_text())?;
    std::fs::write(metrics_path, report.to_csv())
}

/// Distinct query ids with a terminal record.
pub fn serviced_ids(records: &[TraceRecord]) -> BTreeSet<QueryId> {
    records
        .iter()
        .filter(|r| r.ev == EventKind::QueryServiced)
        .filter_map(TraceRecord::query_id)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields;
    use crate::ids::PeerId;
    use crate::kernel::VirtualTime;

    fn run(events: &[(u64, EventKind, u64)]) -> Trace {
        let mut t = Trace::new();
        for (at, ev, q) in events {
            t.emit(
                VirtualTime(*at),
                *ev,
                PeerId(1),
                fields! { "query_id" => *q },
            );
        }
        t
    }

    #[test]
    fn empty_trace_is_all_zero() {
        let m = summarize(&Trace::new()).unwrap();
        assert_eq!(m, MetricsReport::default());
        assert_eq!(m.availability_decimal(), 0.0);
    }

    #[test]
    fn baseline_counts() {
        use EventKind::*;
        let mut ev = Vec::new();
        for q in 0..10 {
            ev.push((q * 10, QuerySubmitted, q));
            ev.push((q * 10 + 1, QueryScheduled, q));
            ev.push((q * 10 + 5, QueryServiced, q));
        }
        let m = summarize(&run(&ev)).unwrap();
        assert_eq!((m.queries_submitted, m.queries_serviced), (10, 10));
        assert!(m.fully_available());
        assert_eq!(m.rescheduled, 0);
        assert_eq!(m.latency_ms.p50, 5);
        assert_eq!(m.latency_ms.max, 5);
        assert!(check_lifecycles(run(&ev).records()).is_empty());
    }

    #[test]
    fn undiscovered_queries_count_against_availability() {
        let mut t = run(&[
            (0, EventKind::QuerySubmitted, 1),
            (5, EventKind::QueryServiced, 1),
        ]);
        let miss =
            |q: u64| fields! { "to" => PeerId(1), "reason" => "service_not_found", "query" => q };
        t.emit(VirtualTime(6), EventKind::MsgDropped, PeerId(1), miss(2));
        t.emit(VirtualTime(7), EventKind::MsgDropped, PeerId(1), miss(2));
        t.emit(VirtualTime(8), EventKind::MsgDropped, PeerId(1), miss(3));
        t.emit(
            VirtualTime(9),
            EventKind::QuerySubmitted,
            PeerId(1),
            fields! { "query_id" => 3u64 },
        );
        let m = summarize(&t).unwrap();
        assert_eq!(m.availability(), (1, 3));
        assert_eq!(m.messages_dropped, 3);
    }

    #[test]
    fn duplicate_reply_leaves_availability() {
        use EventKind::*;
        let t = run(&[
            (0, QuerySubmitted, 1),
            (1, QueryScheduled, 1),
            (4, QueryServiced, 1),
            (9, DuplicateReply, 1),
        ]);
        let m = summarize(&t).unwrap();
        assert_eq!(m.duplicate_replies, 1);
        assert_eq!(m.availability(), (1, 1));
    }

    #[test]
    fn nearest_rank_percentiles() {
        let s = LatencyStats::from_samples((1..=20).collect());
        assert_eq!((s.p50, s.p95, s.max), (10, 19, 20));
        assert_eq!(s.mean(), 10.5);
        let s = LatencyStats::from_samples(vec![7]);
        assert_eq!((s.p50, s.p95), (7, 7));
    }

    #[test]
    fn out_of_order_is_malformed() {
        let mut recs = run(&[
            (0, EventKind::QuerySubmitted, 1),
            (5, EventKind::QuerySubmitted, 2),
        ])
        .records()
        .to_vec();
        recs.swap(0, 1);
        assert!(matches!(
            summarize(&Trace::from_records(recs)),
            Err(MetricsError::MalformedTrace { .. })
        ));
    }

    #[test]
    fn lifecycle_violations() {
        use EventKind::*;
        let t = run(&[
            (0, QuerySubmitted, 1),
            (1, QueryRescheduled, 1),
            (2, QueryScheduled, 1),
            (3, QueryServiced, 1),
            (4, QueryScheduled, 1),
            (5, QueryCancelled, 1),
            (6, QueryServiced, 2),
        ]);
        let v = check_lifecycles(t.records());
        let msgs: Vec<_> = v.iter().map(|v| v.message.as_str()).collect();
        assert_eq!(
            msgs,
            [
                "rescheduled before first schedule",
                "query_scheduled after serviced",
                "query_serviced before submitted"
            ]
        );
    }

    #[test]
    fn csv_header_is_documented() {
        let csv = MetricsReport::default().to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("format=1"));
        assert_eq!(lines.next().unwrap(), MetricsReport::CSV_COLUMNS.join(","));
        assert_eq!(lines.next().unwrap().split(',').count(), 15);
    }

    #[test]
    fn write_to_missing_dir_fails() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("no/such/dir/trace.jsonl");
        assert!(write_outputs(&Trace::new(), &MetricsReport::default(), &bad, &bad).is_err());
    }
}
