//! Level three: DPC scoring, the confidence / reprocess loop, replication
//! between DPCs and round-robin load partitioning.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AreaId, Dpc, DpcId, HazardClass, SdccId, SensorId};
use crate::mule::{BundleId, DataBundle};
use crate::sensing::BatchId;

/// Length of every report and reference feature vector:
/// `[mean value, max value, coverage, agreement]`.
pub const FEATURE_LEN: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProcessingError {
    #[error("bundle {0} carries no readings")]
    EmptyBundle(BundleId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ReportId(pub u64);

impl fmt::Display for ReportId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A past (or freshly archived) disaster.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DisasterRecord {
    pub area: AreaId,
    pub hazard_class: HazardClass,
    pub feature_vector: Vec<f64>,
    pub occurred_time: f64,
    pub outcome: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProcessedReport {
    pub id: ReportId,
    pub source_batches: Vec<BatchId>,
    pub bundle: BundleId,
    pub source_sdcc: SdccId,
    pub dpc_id: DpcId,
    pub hazard_class: HazardClass,
    pub severity_estimate: f64,
    pub confidence: f64,
    pub reprocess_count: u32,
    pub area_id: AreaId,
    pub feature_vector: Vec<f64>,
    pub contributing: BTreeSet<SensorId>,
    pub live_sensors: u32,
    pub agreement: f64,
    pub created: f64,
}

impl ProcessedReport {
    pub fn coverage(&self) -> f64 {
        coverage(self.contributing.len(), self.live_sensors)
    }

    pub fn to_record(&self, outcome: &str) -> DisasterRecord {
        DisasterRecord {
            area: self.area_id,
            hazard_class: self.hazard_class,
            feature_vector: self.feature_vector.clone(),
            occurred_time: self.created,
            outcome: outcome.to_string(),
        }
    }
}

fn coverage(distinct: usize, live: u32) -> f64 {
    if live == 0 {
        return 0.0;
    }
    (distinct as f64 / f64::from(live)).clamp(0.0, 1.0)
}

/// `1 - coefficient of variation`, clamped to `[0, 1]`. A zero mean with any
/// spread counts as total disagreement.
pub fn agreement(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    let dispersion = if mean == 0.0 {
        if sd == 0.0 {
            0.0
        } else {
            1.0
        }
    } else {
        sd / mean.abs()
    };
    (1.0 - dispersion).clamp(0.0, 1.0)
}

/// Scores a delivered bundle: confidence = coverage x agreement, where
/// coverage is distinct contributing sensors over live sensors of the
/// source SDCC.
pub fn process_batch(dpc: DpcId, bundle: &DataBundle, id: ReportId, now: f64) -> Result<ProcessedReport, ProcessingError> {
    let readings: Vec<_> = bundle.batches.iter().flat_map(|b| b.readings.iter()).collect();
    let first = bundle.batches.first().filter(|_| !readings.is_empty()).ok_or(ProcessingError::EmptyBundle(bundle.id))?;
    let values: Vec<f64> = readings.iter().map(|r| r.value).collect();
    let contributing: BTreeSet<SensorId> = readings.iter().map(|r| r.sensor).collect();
    let live = bundle.batches.iter().map(|b| b.live_sensors).max().unwrap_or(0);
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let agree = agreement(&values);
    let cov = coverage(contributing.len(), live);
    Ok(ProcessedReport {
        id,
        source_batches: bundle.batches.iter().map(|b| b.id).collect(),
        bundle: bundle.id,
        source_sdcc: first.sdcc_id,
        dpc_id: dpc,
        hazard_class: first.hazard_class_hint,
        severity_estimate: mean,
        confidence: cov * agree,
        reprocess_count: 0,
        area_id: first.region,
        feature_vector: vec![mean, max, cov, agree],
        contributing,
        live_sensors: live,
        agreement: agree,
        created: now,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Reprocess,
    Reject,
}

pub fn check_confidence(report: &ProcessedReport, dpc: &Dpc) -> Verdict {
    if report.confidence >= dpc.confidence_threshold {
        Verdict::Pass
    } else if report.reprocess_count < dpc.max_reprocess {
        Verdict::Reprocess
    } else {
        Verdict::Reject
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MergeOutcome {
    pub merged: usize,
    pub conflicts: usize,
}

/// One more pass over a low-confidence report, folding in peer reports for
/// the same area seen within `lookback` seconds.
///
/// Only peers with the same hazard class and source SDCC are merged; a peer
/// with a different class for the same area is counted as a conflict and
/// ignored. Agreement is kept from the original report, so merging never
/// lowers confidence.
pub fn reprocess(
    report: &ProcessedReport,
    peer_data: &[ProcessedReport],
    now: f64,
    lookback: f64,
) -> (ProcessedReport, MergeOutcome) {
    let mut out = report.clone();
    let mut outcome = MergeOutcome::default();
    for peer in peer_data.iter().filter(|p| p.area_id == report.area_id && p.created >= now - lookback) {
        if peer.id == report.id {
            continue;
        }
        if peer.hazard_class != report.hazard_class {
            outcome.conflicts += 1;
            continue;
        }
        if peer.source_sdcc != report.source_sdcc {
            continue;
        }
        out.contributing.extend(peer.contributing.iter().copied());
        outcome.merged += 1;
    }
    let cov = out.coverage();
    out.confidence = (cov * out.agreement).max(report.confidence);
    out.feature_vector[2] = cov;
    out.reprocess_count += 1;
    (out, outcome)
}

/// Peers a passed report is copied to. The ack count is the length.
pub fn replicate(dpc: &Dpc, _report: &ProcessedReport) -> Vec<DpcId> {
    dpc.peers.clone()
}

/// Round-robin cursor over a region's DPCs.
#[derive(Debug, Clone, Default)]
pub struct RoundRobin {
    next: usize,
}

impl RoundRobin {
    pub fn pick(&mut self, dpcs: &[DpcId]) -> Option<DpcId> {
        if dpcs.is_empty() {
            return None;
        }
        let d = dpcs[self.next % dpcs.len()];
        self.next += 1;
        Some(d)
    }
}

/// Assigns batches to DPCs in arrival order, cycling through `dpcs`.
pub fn partition_load<T>(pending: impl IntoIterator<Item = T>, dpcs: &[DpcId], rr: &mut RoundRobin) -> Vec<(T, DpcId)> {
    pending.into_iter().filter_map(|item| rr.pick(dpcs).map(|d| (item, d))).collect()
}

/// Completion times of FIFO single-server queues, one per DPC, for jobs
/// given as `(arrival_time, dpc)` in arrival order.
pub fn fifo_completions(jobs: &[(f64, DpcId)], service_time: f64) -> Vec<f64> {
    let mut free_at: std::collections::BTreeMap<DpcId, f64> = Default::default();
    jobs.iter()
        .map(|(arrival, d)| {
            let start = free_at.get(d).copied().unwrap_or(f64::NEG_INFINITY).max(*arrival);
            let done = start + service_time;
            free_at.insert(*d, done);
            done
        })
        .collect()
}

/// Archives a passed report locally and returns its CDC arrival time.
/// Anything but a pass is not forwarded.
pub fn forward_to_cdc(
    history: &mut Vec<DisasterRecord>,
    report: &ProcessedReport,
    verdict: Verdict,
    now: f64,
    latency: f64,
) -> Option<f64> {
    if verdict != Verdict::Pass {
        return None;
    }
    history.push(report.to_record("processed"));
    Some(now + latency)
}
