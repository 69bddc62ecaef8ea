//! Level one: sensor readings and the SDCC threshold trigger.
//!
//! An SDCC keeps a sliding window `(t - W, t]` of readings and emits an
//! [`EventBatch`] once at least `tau` distinct sensors are present. One
//! batch is emitted per contiguous exceedance: the trigger re-arms only
//! after a window closes below `tau`.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    distance, AreaId, BaselineRecord, HazardClass, HazardId, Modality, Sdcc, SdccId, SensorId, SensorNode,
};
use crate::rng::{RngStreams, StreamKind};

/// Slack for comparing window edges computed along different float paths.
pub const TIME_EPS: f64 = 1e-9;

/// Default on-air size of one reading.
pub const DEFAULT_READING_BYTES: u64 = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SensingError {
    #[error("sensor {sensor} is not assigned to SDCC {sdcc}")]
    Unassigned { sensor: SensorId, sdcc: SdccId },
    #[error("region {0} has no SDCC to cluster sensors onto")]
    NoSdcc(AreaId),
    #[error("baseline record for area {record} cannot be stored at SDCC {sdcc} of area {sdcc_area}")]
    AreaMismatch { record: AreaId, sdcc: SdccId, sdcc_area: AreaId },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BatchId(pub u64);

/// A scripted ground-truth hazard.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HazardEvent {
    pub id: HazardId,
    pub class: HazardClass,
    pub onset: f64,
    /// Active until `onset + duration`; forever when `None`.
    pub duration: Option<f64>,
    pub region: AreaId,
    pub magnitude: f64,
    /// Sensors that truly observe the hazard.
    pub footprint: BTreeSet<SensorId>,
}

impl HazardEvent {
    pub fn active_at(&self, t: f64) -> bool {
        t >= self.onset && self.duration.is_none_or(|d| t < self.onset + d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensorReading {
    pub sensor: SensorId,
    pub timestamp: f64,
    pub parameter: Modality,
    pub value: f64,
    /// Ground truth. Metrics only; SDCC and DPC logic never branch on it.
    pub truthful: bool,
    pub hazard: Option<HazardId>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EventBatch {
    pub id: BatchId,
    pub sdcc_id: SdccId,
    pub region: AreaId,
    pub trigger_time: f64,
    pub contributing_sensors: BTreeSet<SensorId>,
    pub readings: Vec<SensorReading>,
    pub baseline: Vec<BaselineRecord>,
    pub payload_bytes: u64,
    pub hazard_class_hint: HazardClass,
    pub window_used: f64,
    /// Live sensors clustered onto the SDCC when the batch was cut.
    pub live_sensors: u32,
}

impl EventBatch {
    /// Hazards behind the truthful readings of this batch.
    pub fn hazards(&self) -> BTreeSet<HazardId> {
        self.readings.iter().filter(|r| r.truthful).filter_map(|r| r.hazard).collect()
    }
}

/// Index of the SDCC nearest to `sensor` within its region; lower id wins
/// ties.
pub fn nearest_sdcc<'a>(sensor: &SensorNode, sdccs: impl IntoIterator<Item = &'a Sdcc>) -> Option<SdccId> {
    sdccs
        .into_iter()
        .filter(|s| s.region == sensor.region)
        .min_by(|a, b| {
            distance(sensor.position, a.position)
                .total_cmp(&distance(sensor.position, b.position))
                .then(a.id.cmp(&b.id))
        })
        .map(|s| s.id)
}

/// Clusters each sensor onto its nearest SDCC.
pub fn assign_clusters(sensors: &[SensorNode], sdccs: &[Sdcc]) -> Result<BTreeMap<SensorId, SdccId>, SensingError> {
    sensors
        .iter()
        .map(|s| nearest_sdcc(s, sdccs).map(|r| (s.id, r)).ok_or(SensingError::NoSdcc(s.region)))
        .collect()
}

/// Readings produced by live sensors for the window ending at `t`.
///
/// A sensor inside an active hazard's footprint reports the hazard
/// magnitude (the strongest one if several overlap). Independently, each
/// live sensor reports a spurious value with its `false_report_prob`.
pub fn generate_readings<'a>(
    hazards: &[HazardEvent],
    sensors: impl IntoIterator<Item = &'a SensorNode>,
    t: f64,
    rng: &mut RngStreams,
) -> Vec<SensorReading> {
    let active: Vec<&HazardEvent> = hazards.iter().filter(|h| h.active_at(t)).collect();
    let mut out = Vec::new();
    for s in sensors {
        if !s.is_live_at(t) {
            continue;
        }
        let observed = active
            .iter()
            .filter(|h| h.region == s.region && h.footprint.contains(&s.id))
            .max_by(|a, b| a.magnitude.total_cmp(&b.magnitude).then(b.id.cmp(&a.id)));
        if let Some(h) = observed {
            out.push(SensorReading {
                sensor: s.id,
                timestamp: t,
                parameter: s.modality,
                value: h.magnitude,
                truthful: true,
                hazard: Some(h.id),
            });
        }
        let draw = rng.get(StreamKind::Sensor, s.id.0);
        let fires = draw.gen::<f64>() < s.false_report_prob;
        if fires {
            out.push(SensorReading {
                sensor: s.id,
                timestamp: t,
                parameter: s.modality,
                value: draw.gen::<f64>(),
                truthful: false,
                hazard: None,
            });
        }
    }
    out
}

/// Mutable run state of one SDCC.
#[derive(Debug, Clone)]
pub struct SdccState {
    pub id: SdccId,
    pub region: AreaId,
    pub tau: u32,
    pub window: f64,
    pub watch: HazardClass,
    pub reading_bytes: u64,
    assigned: BTreeSet<SensorId>,
    buffer: VecDeque<SensorReading>,
    clock: f64,
    armed: bool,
    pending_baseline: Vec<BaselineRecord>,
}

impl SdccState {
    pub fn new(sdcc: &Sdcc, assigned: impl IntoIterator<Item = SensorId>, reading_bytes: u64) -> Self {
        Self {
            id: sdcc.id,
            region: sdcc.region,
            tau: sdcc.tau,
            window: sdcc.window,
            watch: sdcc.watch,
            reading_bytes,
            assigned: assigned.into_iter().collect(),
            buffer: VecDeque::new(),
            clock: f64::NEG_INFINITY,
            armed: true,
            pending_baseline: sdcc.baseline.clone(),
        }
    }

    pub fn buffer(&self) -> impl Iterator<Item = &SensorReading> {
        self.buffer.iter()
    }

    pub fn buffer_len(&self) -> usize {
        self.buffer.len()
    }

    pub fn pending_baseline(&self) -> &[BaselineRecord] {
        &self.pending_baseline
    }

    /// Adds a reading and evicts everything that fell out of the window.
    pub fn ingest(&mut self, reading: SensorReading) -> Result<(), SensingError> {
        if !self.assigned.contains(&reading.sensor) {
            return Err(SensingError::Unassigned { sensor: reading.sensor, sdcc: self.id });
        }
        let now = self.clock.max(reading.timestamp);
        self.buffer.push_back(reading);
        self.evict(now);
        Ok(())
    }

    /// Drops readings outside `(now - window, now]`.
    pub fn evict(&mut self, now: f64) {
        self.clock = self.clock.max(now);
        let edge = self.clock - self.window + TIME_EPS;
        self.buffer.retain(|r| r.timestamp > edge);
    }

    pub fn distinct_count(&self) -> usize {
        self.buffer.iter().map(|r| r.sensor).collect::<BTreeSet<_>>().len()
    }

    pub fn in_exceedance(&self) -> bool {
        self.distinct_count() >= self.tau as usize
    }

    /// Emits a batch if the window holds at least `tau` distinct sensors and
    /// this exceedance has not already produced one. Pending baseline
    /// records ride along and are cleared.
    pub fn evaluate_threshold(&mut self, live_sensors: u32, next_id: &mut u64) -> Option<EventBatch> {
        if !self.armed || !self.in_exceedance() {
            return None;
        }
        self.armed = false;
        let readings: Vec<SensorReading> = self.buffer.iter().cloned().collect();
        let contributing: BTreeSet<SensorId> = readings.iter().map(|r| r.sensor).collect();
        let baseline = std::mem::take(&mut self.pending_baseline);
        let payload = self.reading_bytes * readings.len() as u64 + baseline.iter().map(|b| b.payload_bytes).sum::<u64>();
        let id = BatchId(*next_id);
        *next_id += 1;
        Some(EventBatch {
            id,
            sdcc_id: self.id,
            region: self.region,
            trigger_time: self.clock,
            contributing_sensors: contributing,
            readings,
            baseline,
            payload_bytes: payload,
            hazard_class_hint: self.watch,
            window_used: self.window,
            live_sensors,
        })
    }

    /// End-of-window bookkeeping: re-arms the trigger once the window falls
    /// below `tau`.
    pub fn close_window(&mut self, now: f64) {
        self.evict(now);
        if !self.in_exceedance() {
            self.armed = true;
        }
    }

    pub fn ingest_baseline(&mut self, record: BaselineRecord) -> Result<(), SensingError> {
        if record.area != self.region {
            return Err(SensingError::AreaMismatch { record: record.area, sdcc: self.id, sdcc_area: self.region });
        }
        self.pending_baseline.push(record);
        Ok(())
    }
}
