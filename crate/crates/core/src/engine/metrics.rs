//! Run metrics, computed from the trace alone.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::trace::{Trace, TraceEvent};
use crate::model::HazardId;
use crate::processing::Verdict;

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Metrics {
    pub seed: u64,
    pub horizon: f64,
    pub hazard_count: u64,
    /// Hazard onset to the first delivery of a warning it caused.
    pub warning_latency: BTreeMap<HazardId, f64>,
    /// Hazard onset to the first trigger holding one of its readings.
    pub detection_latency: BTreeMap<HazardId, f64>,
    pub warning_count: u64,
    /// Warnings that trace back to no truthful reading.
    pub false_warning_count: u64,
    pub missed_event_count: u64,
    /// Triggers cut from spurious readings only.
    pub false_trigger_count: u64,
    pub trigger_count: u64,
    pub bypass_dispatch_count: u64,
    pub bundles_created: u64,
    pub bundles_delivered: u64,
    pub delivery_ratio: f64,
    pub map_utilization: f64,
    pub dpc_makespan: f64,
    pub channel_block_count: u64,
    pub max_dpc_queue: u64,
}

impl Metrics {
    pub fn mean_warning_latency(&self) -> Option<f64> {
        mean(self.warning_latency.values().copied())
    }

    pub fn mean_detection_latency(&self) -> Option<f64> {
        mean(self.detection_latency.values().copied())
    }
}

fn mean(it: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = it.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn collect_metrics(trace: &Trace) -> Metrics {
    let mut m = Metrics::default();
    let mut maps = 0u32;
    let mut onset: BTreeMap<HazardId, f64> = BTreeMap::new();
    let mut first_sms: BTreeMap<u64, f64> = BTreeMap::new();
    let mut internet: BTreeMap<u64, f64> = BTreeMap::new();
    let mut opens: BTreeMap<u64, f64> = BTreeMap::new();
    let mut busy = 0.0;
    let mut first_dpc_delivery = f64::INFINITY;
    let mut last_verdict = f64::NEG_INFINITY;

    for r in &trace.records {
        match &r.event {
            TraceEvent::Start { seed, horizon, maps: j, .. } => {
                m.seed = *seed;
                m.horizon = *horizon;
                maps = *j;
            }
            TraceEvent::Hazard { hazard, .. } => {
                onset.insert(*hazard, r.t);
            }
            TraceEvent::Trigger { hazards, .. } => {
                m.trigger_count += 1;
                if hazards.is_empty() {
                    m.false_trigger_count += 1;
                }
                for h in hazards {
                    if let Some(o) = onset.get(h) {
                        let e = m.detection_latency.entry(*h).or_insert(f64::INFINITY);
                        *e = e.min(r.t - o);
                    }
                }
            }
            TraceEvent::Bundle { .. } => m.bundles_created += 1,
            TraceEvent::SessionOpen { .. } => {
                opens.insert(r.seq, r.t);
            }
            TraceEvent::SessionClose { .. } => {
                if let Some(start) = r.cause.and_then(|c| opens.remove(&c)) {
                    busy += r.t - start;
                }
            }
            TraceEvent::Blocked { .. } => m.channel_block_count += 1,
            TraceEvent::Delivery { .. } => {
                m.bundles_delivered += 1;
                first_dpc_delivery = first_dpc_delivery.min(r.t);
            }
            TraceEvent::Assign { queue_len, .. } => m.max_dpc_queue = m.max_dpc_queue.max(*queue_len as u64),
            TraceEvent::Verdict { verdict: Verdict::Pass | Verdict::Reject, .. } => last_verdict = last_verdict.max(r.t),
            TraceEvent::Warning { .. } => m.warning_count += 1,
            TraceEvent::Sms { subscribers, first, .. } if *subscribers > 0 => {
                if let Some(w) = r.cause {
                    let e = first_sms.entry(w).or_insert(f64::INFINITY);
                    *e = e.min(*first);
                }
            }
            TraceEvent::Internet { at, .. } => {
                if let Some(w) = r.cause {
                    internet.insert(w, *at);
                }
            }
            TraceEvent::Dispatch { bypass: true, .. } => m.bypass_dispatch_count += 1,
            _ => {}
        }
    }
    for start in opens.values() {
        busy += (m.horizon - start).max(0.0);
    }
    m.hazard_count = onset.len() as u64;

    for r in &trace.records {
        if !matches!(r.event, TraceEvent::Warning { .. }) {
            continue;
        }
        let hazards = trace
            .find_ancestor(r.seq, |e| matches!(e, TraceEvent::Trigger { .. }))
            .map(|t| match &t.event {
                TraceEvent::Trigger { hazards, .. } => hazards.clone(),
                _ => unreachable!(),
            })
            .unwrap_or_default();
        if hazards.is_empty() {
            m.false_warning_count += 1;
        }
        // SMS is the warning channel when any subscriber is reachable
        let delivered = first_sms.get(&r.seq).or(internet.get(&r.seq)).copied().unwrap_or(r.t);
        for h in hazards {
            if let Some(o) = onset.get(&h) {
                let e = m.warning_latency.entry(h).or_insert(f64::INFINITY);
                *e = e.min(delivered - o);
            }
        }
    }
    m.missed_event_count = onset.keys().filter(|h| !m.warning_latency.contains_key(h)).count() as u64;
    m.delivery_ratio = if m.bundles_created == 0 { 0.0 } else { m.bundles_delivered as f64 / m.bundles_created as f64 };
    m.map_utilization = if maps == 0 || m.horizon <= 0.0 { 0.0 } else { busy / (f64::from(maps) * m.horizon) };
    m.dpc_makespan = if last_verdict >= first_dpc_delivery { last_verdict - first_dpc_delivery } else { 0.0 };
    m
}

/// One CSV row per run. The sweep columns are empty for a single run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub param: Option<String>,
    pub value: Option<String>,
    pub rep: Option<u32>,
    pub seed: u64,
    pub horizon: f64,
    pub hazards: u64,
    pub warnings: u64,
    pub mean_warning_latency: Option<f64>,
    pub max_warning_latency: Option<f64>,
    pub mean_detection_latency: Option<f64>,
    pub false_warning_count: u64,
    pub missed_event_count: u64,
    pub false_trigger_count: u64,
    pub bypass_dispatch_count: u64,
    pub bundles_created: u64,
    pub bundles_delivered: u64,
    pub delivery_ratio: f64,
    pub map_utilization: f64,
    pub dpc_makespan: f64,
    pub channel_block_count: u64,
    pub max_dpc_queue: u64,
    pub trace_sha256: String,
}

impl MetricsRow {
    pub fn new(m: &Metrics, digest: &str) -> Self {
        Self {
            param: None,
            value: None,
            rep: None,
            seed: m.seed,
            horizon: m.horizon,
            hazards: m.hazard_count,
            warnings: m.warning_count,
            mean_warning_latency: m.mean_warning_latency(),
            max_warning_latency: m.warning_latency.values().copied().reduce(f64::max),
            mean_detection_latency: m.mean_detection_latency(),
            false_warning_count: m.false_warning_count,
            missed_event_count: m.missed_event_count,
            false_trigger_count: m.false_trigger_count,
            bypass_dispatch_count: m.bypass_dispatch_count,
            bundles_created: m.bundles_created,
            bundles_delivered: m.bundles_delivered,
            delivery_ratio: m.delivery_ratio,
            map_utilization: m.map_utilization,
            dpc_makespan: m.dpc_makespan,
            channel_block_count: m.channel_block_count,
            max_dpc_queue: m.max_dpc_queue,
            trace_sha256: digest.to_string(),
        }
    }

    /// Numeric columns that get averaged across replications.
    pub fn numeric(&self) -> Vec<(&'static str, Option<f64>)> {
        vec![
            ("mean_warning_latency", self.mean_warning_latency),
            ("max_warning_latency", self.max_warning_latency),
            ("mean_detection_latency", self.mean_detection_latency),
            ("warnings", Some(self.warnings as f64)),
            ("false_warning_count", Some(self.false_warning_count as f64)),
            ("missed_event_count", Some(self.missed_event_count as f64)),
            ("false_trigger_count", Some(self.false_trigger_count as f64)),
            ("bypass_dispatch_count", Some(self.bypass_dispatch_count as f64)),
            ("delivery_ratio", Some(self.delivery_ratio)),
            ("map_utilization", Some(self.map_utilization)),
            ("dpc_makespan", Some(self.dpc_makespan)),
            ("channel_block_count", Some(self.channel_block_count as f64)),
            ("max_dpc_queue", Some(self.max_dpc_queue as f64)),
        ]
    }
}

pub fn write_metrics_csv(rows: &[MetricsRow]) -> Result<String, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn read_metrics_csv(text: &str) -> Result<Vec<MetricsRow>, csv::Error> {
    csv::Reader::from_reader(text.as_bytes()).deserialize().collect()
}

/// Mean and standard error of one column over a group of runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stat {
    pub n: usize,
    pub mean: f64,
    pub se: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let se = if n < 2 {
            0.0
        } else {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        };
        Some(Stat { n, mean, se })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub param: String,
    pub value: String,
    pub runs: usize,
    pub columns: Vec<(&'static str, Option<Stat>)>,
}

/// Groups rows by `(param, value)` in first-seen order.
pub fn aggregate(rows: &[MetricsRow]) -> Vec<AggregateRow> {
    let mut keys: Vec<(String, String)> = Vec::new();
    let mut groups: BTreeMap<(String, String), Vec<&MetricsRow>> = BTreeMap::new();
    for r in rows {
        let key = (r.param.clone().unwrap_or_default(), r.value.clone().unwrap_or_default());
        if !groups.contains_key(&key) {
            keys.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    keys.into_iter()
        .map(|key| {
            let group = &groups[&key];
            let names: Vec<&'static str> = group[0].numeric().iter().map(|(n, _)| *n).collect();
            let columns = names
                .iter()
                .enumerate()
                .map(|(i, name)| {
                    let vals: Vec<f64> = group.iter().filter_map(|r| r.numeric()[i].1).collect();
                    (*name, Stat::of(&vals))
                })
                .collect();
            AggregateRow { param: key.0, value: key.1, runs: group.len(), columns }
        })
        .collect()
}

pub fn write_aggregate_csv(rows: &[AggregateRow]) -> Result<String, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if let Some(first) = rows.first() {
        let mut header = vec!["param".to_string(), "value".to_string(), "runs".to_string()];
        for (name, _) in &first.columns {
            header.push(format!("{name}_mean"));
            header.push(format!("{name}_se"));
        }
        w.write_record(&header)?;
    }
    for r in rows {
        let mut rec = vec![r.param.clone(), r.value.clone(), r.runs.to_string()];
        for (_, s) in &r.columns {
            match s {
                Some(s) => {
                    rec.push(s.mean.to_string());
                    rec.push(s.se.to_string());
                }
                None => rec.extend([String::new(), String::new()]),
            }
        }
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decision::{Channel, OrderId};
    use crate::engine::trace::CloseReason;
    use crate::model::{AreaId, HazardClass, MapId, SdccId};
    use crate::mule::{BundleId, Endpoint};
    use crate::processing::ReportId;
    use crate::sensing::BatchId;

    fn trigger(hazards: Vec<HazardId>) -> TraceEvent {
        TraceEvent::Trigger {
            batch: BatchId(0),
            sdcc: SdccId(1),
            region: AreaId(1),
            sensors: 1,
            readings: 1,
            bytes: 64,
            class: HazardClass::Flood,
            hazards,
        }
    }

    fn warning() -> TraceEvent {
        TraceEvent::Warning {
            order: OrderId(0),
            report: ReportId(0),
            class: HazardClass::Flood,
            area: AreaId(1),
            severity: 1.0,
            channels: vec![Channel::Sms(0), Channel::Internet],
        }
    }

    #[test]
    fn latencies_and_false_warnings() {
        let mut t = Trace::default();
        t.push(0.0, None, TraceEvent::Start { schema: 1, seed: 3, horizon: 100.0, maps: 2, sdccs: 1, dpcs: 1 });
        t.push(5.0, None, TraceEvent::Hazard { hazard: HazardId(1), class: HazardClass::Flood, region: AreaId(1), magnitude: 1.0 });
        t.push(6.0, None, TraceEvent::Hazard { hazard: HazardId(2), class: HazardClass::Flood, region: AreaId(1), magnitude: 1.0 });
        let trig = t.push(10.0, None, trigger(vec![HazardId(1)]));
        let w = t.push(20.0, Some(trig), warning());
        t.push(20.0, Some(w), TraceEvent::Sms { order: OrderId(0), provider: 0, subscribers: 5, first: 21.0, last: 21.0 });
        t.push(20.0, Some(w), TraceEvent::Internet { order: OrderId(0), at: 20.0 });
        let ft = t.push(30.0, None, trigger(vec![]));
        let fw = t.push(40.0, Some(ft), warning());
        t.push(40.0, Some(fw), TraceEvent::Internet { order: OrderId(1), at: 40.5 });
        let o = t.push(0.0, None, TraceEvent::SessionOpen { map: MapId(1), endpoint: Endpoint::Sdcc(SdccId(1)), channel: 1, rate_mbps: 54.0 });
        t.push(50.0, Some(o), TraceEvent::SessionClose { map: MapId(1), endpoint: Endpoint::Sdcc(SdccId(1)), channel: 1, reason: CloseReason::ContactLost });
        t.push(0.0, None, TraceEvent::Bundle { bundle: BundleId(0), batch: BatchId(0), sdcc: SdccId(1), bytes: 64, urgent: false });

        let m = collect_metrics(&t);
        assert_eq!(m.warning_latency[&HazardId(1)], 16.0);
        assert_eq!(m.detection_latency[&HazardId(1)], 5.0);
        assert_eq!(m.false_warning_count, 1);
        assert_eq!(m.false_trigger_count, 1);
        assert_eq!(m.missed_event_count, 1);
        assert_eq!(m.map_utilization, 50.0 / 200.0);
        assert_eq!(m.delivery_ratio, 0.0);
    }

    #[test]
    fn empty_trace_has_zero_ratio() {
        let m = collect_metrics(&Trace::default());
        assert_eq!(m.delivery_ratio, 0.0);
        assert_eq!(m.missed_event_count, 0);
    }

    #[test]
    fn csv_round_trip_and_aggregate() {
        let mut a = MetricsRow { seed: 1, param: Some("tau".into()), value: Some("3".into()), rep: Some(0), ..Default::default() };
        a.mean_warning_latency = Some(10.0);
        let mut b = a.clone();
        b.seed = 2;
        b.rep = Some(1);
        b.mean_warning_latency = Some(14.0);
        let text = write_metrics_csv(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(read_metrics_csv(&text).unwrap(), vec![a.clone(), b.clone()]);
        let agg = aggregate(&[a, b]);
        assert_eq!(agg.len(), 1);
        let (_, s) = agg[0].columns[0];
        let s = s.unwrap();
        assert_eq!((s.n, s.mean, s.se), (2, 12.0, 2.0));
        assert!(write_aggregate_csv(&agg).unwrap().starts_with("param,value,runs,mean_warning_latency_mean"));
    }
}
