//! Append-only event trace, serialised as JSON lines.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::decision::{Channel, OrderId, Service};
use crate::model::{AreaId, DpcId, HazardClass, HazardId, MapId, SdccId, SensorId};
use crate::mule::{BundleId, DeferReason, Endpoint, Holder};
use crate::processing::{ReportId, Verdict};
use crate::sensing::BatchId;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub seq: u64,
    pub t: f64,
    /// Record that directly led to this one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cause: Option<u64>,
    #[serde(flatten)]
    pub event: TraceEvent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CloseReason {
    /// The MAP moved out of range.
    ContactLost,
    /// Dropped an idle session for an endpoint that has work.
    Switch,
    Horizon,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "id", rename_all = "snake_case")]
pub enum DispatchSource {
    Map(MapId),
    Dpc(DpcId),
    Dcc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceEvent {
    Start {
        schema: u32,
        seed: u64,
        horizon: f64,
        maps: u32,
        sdccs: u32,
        dpcs: u32,
    },
    Hazard {
        hazard: HazardId,
        class: HazardClass,
        region: AreaId,
        magnitude: f64,
    },
    Reading {
        sensor: SensorId,
        sdcc: SdccId,
        value: f64,
        truthful: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        hazard: Option<HazardId>,
    },
    Trigger {
        batch: BatchId,
        sdcc: SdccId,
        region: AreaId,
        sensors: u32,
        readings: u32,
        bytes: u64,
        class: HazardClass,
        /// Ground truth behind the truthful readings; empty for a false
        /// trigger.
        hazards: Vec<HazardId>,
    },
    Bundle {
        bundle: BundleId,
        batch: BatchId,
        sdcc: SdccId,
        bytes: u64,
        urgent: bool,
    },
    SessionOpen {
        map: MapId,
        endpoint: Endpoint,
        channel: usize,
        rate_mbps: f64,
    },
    SessionClose {
        map: MapId,
        endpoint: Endpoint,
        channel: usize,
        reason: CloseReason,
    },
    Blocked {
        map: MapId,
        endpoint: Endpoint,
        active: usize,
    },
    Transfer {
        bundle: BundleId,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        map: Option<MapId>,
        endpoint: Endpoint,
        bytes_done: f64,
        bytes_total: u64,
        complete: bool,
    },
    Custody {
        bundle: BundleId,
        from: Holder,
        to: Holder,
    },
    Deferred {
        bundle: BundleId,
        map: MapId,
        reason: DeferReason,
    },
    Delivery {
        bundle: BundleId,
        dpc: DpcId,
        direct: bool,
    },
    Assign {
        bundle: BundleId,
        dpc: DpcId,
        queue_len: usize,
    },
    Verdict {
        report: ReportId,
        bundle: BundleId,
        dpc: DpcId,
        confidence: f64,
        reprocess_count: u32,
        verdict: Verdict,
        queue_len: usize,
    },
    Merge {
        report: ReportId,
        dpc: DpcId,
        merged: usize,
        conflicts: usize,
    },
    Replicate {
        report: ReportId,
        dpc: DpcId,
        acks: usize,
    },
    Replica {
        report: ReportId,
        dpc: DpcId,
    },
    Forward {
        report: ReportId,
        dpc: DpcId,
    },
    CdcArrival {
        report: ReportId,
    },
    Match {
        report: ReportId,
        similarity: f64,
        matched: bool,
    },
    Archived {
        report: ReportId,
    },
    Request {
        report: ReportId,
    },
    Warning {
        order: OrderId,
        report: ReportId,
        class: HazardClass,
        area: AreaId,
        severity: f64,
        channels: Vec<Channel>,
    },
    Sms {
        order: OrderId,
        provider: usize,
        subscribers: u64,
        first: f64,
        last: f64,
    },
    Internet {
        order: OrderId,
        at: f64,
    },
    Dispatch {
        service: Service,
        source: DispatchSource,
        bypass: bool,
        class: HazardClass,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bundle: Option<BundleId>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        order: Option<OrderId>,
    },
    End {
        created: u64,
        delivered: u64,
        in_flight: u64,
        buffered: u64,
        deferred: u64,
    },
}

impl TraceEvent {
    pub fn kind(&self) -> &'static str {
        match self {
            TraceEvent::Start { .. } => "start",
            TraceEvent::Hazard { .. } => "hazard",
            TraceEvent::Reading { .. } => "reading",
            TraceEvent::Trigger { .. } => "trigger",
            TraceEvent::Bundle { .. } => "bundle",
            TraceEvent::SessionOpen { .. } => "session_open",
            TraceEvent::SessionClose { .. } => "session_close",
            TraceEvent::Blocked { .. } => "blocked",
            TraceEvent::Transfer { .. } => "transfer",
            TraceEvent::Custody { .. } => "custody",
            TraceEvent::Deferred { .. } => "deferred",
            TraceEvent::Delivery { .. } => "delivery",
            TraceEvent::Assign { .. } => "assign",
            TraceEvent::Verdict { .. } => "verdict",
            TraceEvent::Merge { .. } => "merge",
            TraceEvent::Replicate { .. } => "replicate",
            TraceEvent::Replica { .. } => "replica",
            TraceEvent::Forward { .. } => "forward",
            TraceEvent::CdcArrival { .. } => "cdc_arrival",
            TraceEvent::Match { .. } => "match",
            TraceEvent::Archived { .. } => "archived",
            TraceEvent::Request { .. } => "request",
            TraceEvent::Warning { .. } => "warning",
            TraceEvent::Sms { .. } => "sms",
            TraceEvent::Internet { .. } => "internet",
            TraceEvent::Dispatch { .. } => "dispatch",
            TraceEvent::End { .. } => "end",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("trace line {line}: {message}")]
pub struct TraceError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

impl Trace {
    /// Appends a record and returns its sequence number.
    pub fn push(&mut self, t: f64, cause: Option<u64>, event: TraceEvent) -> u64 {
        let seq = self.records.len() as u64;
        self.records.push(TraceRecord { seq, t, cause, event });
        seq
    }

    pub fn get(&self, seq: u64) -> Option<&TraceRecord> {
        self.records.get(usize::try_from(seq).ok()?)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("trace records always serialise"));
            out.push('\n');
        }
        out
    }

    /// Parses JSON lines. Blank lines are skipped; `seq` must count up from
    /// zero and `cause` must point backwards.
    pub fn parse(text: &str) -> Result<Trace, TraceError> {
        let mut trace = Trace::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fail = |message: String| TraceError { line: i + 1, message };
            let rec: TraceRecord = serde_json::from_str(line).map_err(|e| fail(e.to_string()))?;
            if rec.seq != trace.records.len() as u64 {
                return Err(fail(format!("expected seq {}, found {}", trace.records.len(), rec.seq)));
            }
            if rec.cause.is_some_and(|c| c >= rec.seq) {
                return Err(fail(format!("cause {:?} does not precede seq {}", rec.cause, rec.seq)));
            }
            if !rec.t.is_finite() {
                return Err(fail("non-finite time".into()));
            }
            trace.records.push(rec);
        }
        Ok(trace)
    }

    pub fn digest(&self) -> String {
        digest(self.to_jsonl().as_bytes())
    }

    /// The record followed by its causes, newest first.
    pub fn ancestry(&self, seq: u64) -> Vec<&TraceRecord> {
        let mut out = Vec::new();
        let mut cur = self.get(seq);
        while let Some(r) = cur {
            out.push(r);
            cur = r.cause.and_then(|c| self.get(c));
        }
        out
    }

    /// First ancestor (the record itself included) matching `pred`.
    pub fn find_ancestor(&self, seq: u64, pred: impl Fn(&TraceEvent) -> bool) -> Option<&TraceRecord> {
        self.ancestry(seq).into_iter().find(|r| pred(&r.event))
    }
}

/// Lowercase hex SHA-256.
pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
