//! Level four: reference matching at the CDC, warning issuance at the DCC,
//! SMS fan-out, and the emergency bypass.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AreaId, CdcDcc, DpcId, HazardClass, MapId, SmsProvider};
use crate::processing::{DisasterRecord, ProcessedReport, ReportId};

pub const DEFAULT_SMS_BATCH: u64 = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecisionError {
    #[error("feature vector length {got} does not match reference schema {want}")]
    Schema { got: usize, want: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct OrderId(pub u64);

impl fmt::Display for OrderId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchResult {
    pub report: ReportId,
    pub best_record: Option<DisasterRecord>,
    pub similarity: f64,
    pub matched: bool,
}

/// `1 - |a - b| / (|a| + |b|)`, which is 1 on identical vectors, 0 on
/// opposite ones, and symmetric.
pub fn similarity(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = norm(a) + norm(b);
    if scale == 0.0 {
        return 1.0;
    }
    (1.0 - diff / scale).clamp(0.0, 1.0)
}

/// Best similarity against same-area records (a class mismatch scores 0),
/// then archives the report in `reference_db` whatever the outcome.
pub fn match_reference(
    report: &ProcessedReport,
    reference_db: &mut Vec<DisasterRecord>,
    threshold: f64,
) -> Result<MatchResult, DecisionError> {
    let mut best: Option<(&DisasterRecord, f64)> = None;
    for rec in reference_db.iter().filter(|r| r.area == report.area_id) {
        if rec.feature_vector.len() != report.feature_vector.len() {
            return Err(DecisionError::Schema { got: report.feature_vector.len(), want: rec.feature_vector.len() });
        }
        let sim = if rec.hazard_class == report.hazard_class {
            similarity(&report.feature_vector, &rec.feature_vector)
        } else {
            0.0
        };
        if best.is_none_or(|(_, b)| sim > b) {
            best = Some((rec, sim));
        }
    }
    let (best_record, sim) = match best {
        Some((r, s)) => (Some(r.clone()), s),
        None => (None, 0.0),
    };
    let result = MatchResult {
        report: report.id,
        matched: best_record.is_some() && sim >= threshold,
        best_record,
        similarity: sim,
    };
    reference_db.push(report.to_record("archived"));
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DccRequest {
    pub report: ReportId,
    pub hazard_class: HazardClass,
    pub area: AreaId,
    pub severity: f64,
    pub similarity: f64,
}

/// A DCC request for matched reports (or every report when escalation of
/// unmatched ones is switched on). `None` means archived only.
pub fn request_response(report: &ProcessedReport, m: &MatchResult, escalate_unmatched: bool) -> Option<DccRequest> {
    (m.matched || escalate_unmatched).then_some(DccRequest {
        report: report.id,
        hazard_class: report.hazard_class,
        area: report.area_id,
        severity: report.severity_estimate,
        similarity: m.similarity,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "provider", rename_all = "snake_case")]
pub enum Channel {
    /// Index into the scenario's provider list.
    Sms(usize),
    Internet,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WarningOrder {
    pub id: OrderId,
    pub hazard_class: HazardClass,
    pub area_id: AreaId,
    pub severity: f64,
    pub issue_time: f64,
    pub channels: Vec<Channel>,
    pub bypass: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Service {
    Police,
    Fire,
    Medical,
    /// Generic emergency line used by the bypass path.
    Emergency,
}

pub const DCC_DISPATCH: [Service; 3] = [Service::Police, Service::Fire, Service::Medical];

/// Turns a DCC request into a warning addressed to every SMS provider of
/// the area plus internet messaging, together with the emergency
/// departments to call.
pub fn issue_warning(cdc: &CdcDcc, request: &DccRequest, id: OrderId, now: f64) -> (WarningOrder, [Service; 3]) {
    let mut channels: Vec<Channel> = cdc
        .providers
        .iter()
        .enumerate()
        .filter(|(_, p)| p.area == request.area)
        .map(|(i, _)| Channel::Sms(i))
        .collect();
    channels.push(Channel::Internet);
    let order = WarningOrder {
        id,
        hazard_class: request.hazard_class,
        area_id: request.area,
        severity: request.severity,
        issue_time: now,
        channels,
        bypass: false,
    };
    (order, DCC_DISPATCH)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SmsStats {
    pub provider: usize,
    pub subscribers: u64,
    pub first_delivery: f64,
    pub last_delivery: f64,
}

/// Per-provider delivery window: batches of `batch_size` go out one after
/// another, each taking `batch_latency`.
pub fn disseminate_sms(order: &WarningOrder, providers: &[SmsProvider]) -> Vec<SmsStats> {
    order
        .channels
        .iter()
        .filter_map(|c| match c {
            Channel::Sms(i) => providers.get(*i).map(|p| (*i, p)),
            Channel::Internet => None,
        })
        .map(|(i, p)| {
            let batches = if p.subscribers == 0 { 0 } else { p.subscribers.div_ceil(p.batch_size.max(1)) };
            let first = if batches == 0 { 0.0 } else { p.batch_latency };
            SmsStats {
                provider: i,
                subscribers: p.subscribers,
                first_delivery: order.issue_time + first,
                last_delivery: order.issue_time + p.batch_latency * batches as f64,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "id", rename_all = "snake_case")]
pub enum BypassSource {
    Map(MapId),
    Dpc(DpcId),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BypassDispatch {
    pub source: BypassSource,
    pub hazard_class: HazardClass,
    pub service: Service,
    pub time: f64,
}

/// Direct emergency call for urgent hazard classes; no-op for the rest.
pub fn bypass_emergency(
    classes: &BTreeSet<HazardClass>,
    source: BypassSource,
    hazard_class: HazardClass,
    now: f64,
    latency: f64,
) -> Option<BypassDispatch> {
    classes.contains(&hazard_class).then_some(BypassDispatch {
        source,
        hazard_class,
        service: Service::Emergency,
        time: now + latency,
    })
}
