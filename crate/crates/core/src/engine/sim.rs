use std::collections::{BTreeMap, BTreeSet, VecDeque};

use thiserror::Error;

use super::metrics::{collect_metrics, Metrics};
use super::queue::{EventQueue, ScheduleError};
use super::trace::{CloseReason, DispatchSource, Trace, TraceEvent, SCHEMA_VERSION};
use crate::decision::{
    bypass_emergency, disseminate_sms, issue_warning, match_reference, request_response, BypassDispatch, BypassSource,
    DccRequest, DecisionError, OrderId,
};
use crate::model::{validate_topology, AreaId, Dpc, DpcId, LinkSpec, MapId, MapUnit, SdccId, ValidationReport};
use crate::mule::{
    detect_contact, direct_transfer, transfer, AdhocSession, BundleId, ChannelPool, DataBundle,
    DeferReason, Endpoint, Holder, MapBuffer, Mobility, MuleError,
};
use crate::processing::{
    check_confidence, forward_to_cdc, process_batch, replicate, reprocess, DisasterRecord, ProcessedReport,
    ProcessingError, ReportId, RoundRobin, Verdict,
};
use crate::rng::{stream, RngStreams, StreamKind};
use crate::scenario::Scenario;
use crate::sensing::{generate_readings, SdccState, SensingError};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("scenario failed validation\n{0}")]
    Invalid(ValidationReport),
    #[error("horizon must be finite and >= 0, got {0}")]
    Horizon(f64),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Sensing(#[from] SensingError),
    #[error(transparent)]
    Mule(#[from] MuleError),
    #[error(transparent)]
    Processing(#[from] ProcessingError),
    #[error(transparent)]
    Decision(#[from] DecisionError),
}

/// Where a bundle ended up when the run stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct BundleFate {
    pub bundle: DataBundle,
    pub direct: bool,
}

#[derive(Debug, Clone)]
pub struct SimulationResult {
    pub seed: u64,
    pub horizon: f64,
    pub trace: Trace,
    pub jsonl: String,
    pub digest: String,
    pub metrics: Metrics,
    pub bundles: Vec<BundleFate>,
    pub validation: ValidationReport,
}

impl SimulationResult {
    pub fn summary(&self) -> String {
        let m = &self.metrics;
        let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.3}"));
        let mut s = String::new();
        s.push_str(&format!("seed: {}\nhorizon: {}\n", self.seed, self.horizon));
        s.push_str(&format!("trace records: {}\ntrace sha256: {}\n", self.trace.len(), self.digest));
        s.push_str(&format!("hazards: {}\ntriggers: {}\nwarnings: {}\n", m.hazard_count, m.trigger_count, m.warning_count));
        s.push_str(&format!("mean warning latency: {}\n", opt(m.mean_warning_latency())));
        s.push_str(&format!("mean detection latency: {}\n", opt(m.mean_detection_latency())));
        s.push_str(&format!(
            "false warnings: {}\nmissed events: {}\nfalse triggers: {}\n",
            m.false_warning_count, m.missed_event_count, m.false_trigger_count
        ));
        s.push_str(&format!("bypass dispatches: {}\n", m.bypass_dispatch_count));
        s.push_str(&format!(
            "bundles: {} created, {} delivered (ratio {:.3})\n",
            m.bundles_created, m.bundles_delivered, m.delivery_ratio
        ));
        s.push_str(&format!("map utilization: {:.4}\nchannel blocks: {}\n", m.map_utilization, m.channel_block_count));
        s.push_str(&format!("dpc makespan: {:.3}\nmax dpc queue: {}\n", m.dpc_makespan, m.max_dpc_queue));
        for f in &self.validation.findings {
            s.push_str(&format!("{f}\n"));
        }
        s
    }
}

enum Ev {
    Onset(usize),
    Tick { sdcc: usize, k: u64 },
    Move { k: u64 },
    TransferDone { map: usize, token: u64 },
    DirectDone { bundle: BundleId, dpc: DpcId },
    ServiceDone { dpc: usize },
    Replica { dpc: usize, report: ProcessedReport, cause: u64 },
    CdcArrival { report: ProcessedReport, cause: u64 },
    Dcc { request: DccRequest, bundle: BundleId, cause: u64 },
    Bypass { dispatch: BypassDispatch, bundle: BundleId, cause: u64 },
}

struct SdccRun {
    state: SdccState,
    held: Vec<BundleId>,
    direct: Option<DpcId>,
    pool: ChannelPool,
    link: LinkSpec,
}

struct Xfer {
    bundle: BundleId,
    done_before: f64,
    started: f64,
    token: u64,
}

struct Sess {
    s: AdhocSession,
    open_seq: u64,
    xfer: Option<Xfer>,
    deferred: BTreeSet<BundleId>,
}

struct MapRun<'a> {
    unit: &'a MapUnit,
    mob: Mobility,
    buf: MapBuffer,
    link: LinkSpec,
    carried: Vec<BundleId>,
    served: Vec<Endpoint>,
    session: Option<Sess>,
    partial: BTreeMap<(Endpoint, BundleId), f64>,
    blocked_episode: BTreeSet<Endpoint>,
}

struct Job {
    bundle: BundleId,
    report: Option<ProcessedReport>,
    cause: u64,
}

struct DpcRun<'a> {
    dpc: &'a Dpc,
    pool: ChannelPool,
    link: LinkSpec,
    queue: VecDeque<Job>,
    busy: Option<Job>,
    peer_store: Vec<ProcessedReport>,
    history: Vec<DisasterRecord>,
}

struct BundleRun {
    b: DataBundle,
    direct: bool,
    bypassed: bool,
    busy: bool,
    /// Latest custody-related trace record.
    last: u64,
}

struct World<'a> {
    sc: &'a Scenario,
    horizon: f64,
    q: EventQueue<Ev>,
    trace: Trace,
    rng: RngStreams,
    sdccs: Vec<SdccRun>,
    maps: Vec<MapRun<'a>>,
    dpcs: Vec<DpcRun<'a>>,
    sdcc_ix: BTreeMap<SdccId, usize>,
    dpc_ix: BTreeMap<DpcId, usize>,
    map_ix: BTreeMap<MapId, usize>,
    region_dpcs: BTreeMap<AreaId, Vec<DpcId>>,
    rr: BTreeMap<AreaId, RoundRobin>,
    bundles: BTreeMap<BundleId, BundleRun>,
    hazard_seq: Vec<Option<u64>>,
    reference_db: Vec<DisasterRecord>,
    next_batch: u64,
    next_bundle: u64,
    next_report: u64,
    next_order: u64,
    next_token: u64,
}

/// Runs a scenario to `horizon` seconds. Refuses scenarios with
/// validation errors; warnings are carried in the result.
pub fn run(sc: &Scenario, seed: u64, horizon: f64) -> Result<SimulationResult, EngineError> {
    if !horizon.is_finite() || horizon < 0.0 {
        return Err(EngineError::Horizon(horizon));
    }
    let validation = validate_topology(&sc.topology);
    if !validation.is_valid() {
        return Err(EngineError::Invalid(validation));
    }
    if horizon == 0.0 {
        let trace = Trace::default();
        return Ok(SimulationResult {
            seed,
            horizon,
            metrics: collect_metrics(&trace),
            jsonl: String::new(),
            digest: super::trace::digest(b""),
            trace,
            bundles: Vec::new(),
            validation,
        });
    }
    let mut w = World::new(sc, seed, horizon);
    w.start()?;
    while w.q.peek_time().is_some_and(|t| t <= horizon) {
        let (t, ev) = w.q.pop().expect("peeked");
        w.handle(t, ev)?;
    }
    w.finish();
    let jsonl = w.trace.to_jsonl();
    let digest = super::trace::digest(jsonl.as_bytes());
    let metrics = collect_metrics(&w.trace);
    let bundles = w.bundles.into_values().map(|b| BundleFate { bundle: b.b, direct: b.direct }).collect();
    Ok(SimulationResult { seed, horizon, trace: w.trace, jsonl, digest, metrics, bundles, validation })
}

impl<'a> World<'a> {
    fn new(sc: &'a Scenario, seed: u64, horizon: f64) -> Self {
        let topo = &sc.topology;
        let sdccs = topo
            .sdccs
            .iter()
            .map(|s| SdccRun {
                state: SdccState::new(s, topo.sensors_of(s.id).map(|n| n.id), sc.settings.reading_bytes),
                held: Vec::new(),
                direct: s.collapsed_with,
                pool: ChannelPool::new(LinkSpec::of(s.link)),
                link: LinkSpec::of(s.link),
            })
            .collect();
        let maps = topo
            .maps
            .iter()
            .map(|m| {
                let mut served: Vec<Endpoint> = topo.served_sdccs(m).into_iter().map(Endpoint::Sdcc).collect();
                if !served.is_empty() {
                    served.extend(topo.served_dpcs(m).into_iter().map(Endpoint::Dpc));
                }
                MapRun {
                    unit: m,
                    mob: Mobility::new(m, stream(seed, StreamKind::Map, m.id.0)),
                    buf: MapBuffer::new(m.buffer_capacity),
                    link: LinkSpec::of(m.link),
                    carried: Vec::new(),
                    served,
                    session: None,
                    partial: BTreeMap::new(),
                    blocked_episode: BTreeSet::new(),
                }
            })
            .collect();
        let dpcs = topo
            .dpcs
            .iter()
            .map(|d| DpcRun {
                dpc: d,
                pool: ChannelPool::new(LinkSpec::of(d.link)),
                link: LinkSpec::of(d.link),
                queue: VecDeque::new(),
                busy: None,
                peer_store: Vec::new(),
                history: d.history.clone(),
            })
            .collect();
        let mut region_dpcs: BTreeMap<AreaId, Vec<DpcId>> = BTreeMap::new();
        for d in &topo.dpcs {
            region_dpcs.entry(d.region).or_default().push(d.id);
        }
        World {
            sc,
            horizon,
            q: EventQueue::new(),
            trace: Trace::default(),
            rng: RngStreams::new(seed),
            sdccs,
            maps,
            dpcs,
            sdcc_ix: topo.sdccs.iter().enumerate().map(|(i, s)| (s.id, i)).collect(),
            dpc_ix: topo.dpcs.iter().enumerate().map(|(i, d)| (d.id, i)).collect(),
            map_ix: topo.maps.iter().enumerate().map(|(i, m)| (m.id, i)).collect(),
            region_dpcs,
            rr: BTreeMap::new(),
            bundles: BTreeMap::new(),
            hazard_seq: vec![None; sc.hazards.len()],
            reference_db: topo.cdc.reference_db.clone(),
            next_batch: 0,
            next_bundle: 0,
            next_report: 0,
            next_order: 0,
            next_token: 0,
        }
    }

    fn start(&mut self) -> Result<(), EngineError> {
        let topo = &self.sc.topology;
        self.trace.push(
            0.0,
            None,
            TraceEvent::Start {
                schema: SCHEMA_VERSION,
                seed: self.rng.seed(),
                horizon: self.horizon,
                maps: topo.maps.len() as u32,
                sdccs: topo.sdccs.len() as u32,
                dpcs: topo.dpcs.len() as u32,
            },
        );
        for (i, h) in self.sc.hazards.iter().enumerate() {
            if h.onset <= self.horizon {
                self.q.schedule(h.onset, Ev::Onset(i))?;
            }
        }
        if self.maps.iter().any(|m| !m.served.is_empty()) {
            self.q.schedule(0.0, Ev::Move { k: 0 })?;
        }
        for (i, s) in self.sdccs.iter().enumerate() {
            if s.state.window <= self.horizon {
                self.q.schedule(s.state.window, Ev::Tick { sdcc: i, k: 1 })?;
            }
        }
        Ok(())
    }

    fn handle(&mut self, t: f64, ev: Ev) -> Result<(), EngineError> {
        match ev {
            Ev::Onset(i) => {
                let h = &self.sc.hazards[i];
                let seq = self.trace.push(
                    t,
                    None,
                    TraceEvent::Hazard { hazard: h.id, class: h.class, region: h.region, magnitude: h.magnitude },
                );
                self.hazard_seq[i] = Some(seq);
            }
            Ev::Tick { sdcc, k } => self.on_tick(sdcc, k, t)?,
            Ev::Move { k } => self.on_move(k, t)?,
            Ev::TransferDone { map, token } => self.on_transfer_done(map, token, t)?,
            Ev::DirectDone { bundle, dpc } => {
                let last = self.bundles[&bundle].last;
                let (origin, bytes) = {
                    let b = &self.bundles[&bundle].b;
                    (b.origin(), b.total_bytes)
                };
                let x = self.trace.push(
                    t,
                    Some(last),
                    TraceEvent::Transfer {
                        bundle,
                        map: None,
                        endpoint: Endpoint::Dpc(dpc),
                        bytes_done: bytes as f64,
                        bytes_total: bytes,
                        complete: true,
                    },
                );
                let br = self.bundles.get_mut(&bundle).expect("known bundle");
                br.busy = false;
                br.b.hand_over(Holder::Dpc(dpc), t);
                let c = self.trace.push(
                    t,
                    Some(x),
                    TraceEvent::Custody { bundle, from: Holder::Sdcc(origin), to: Holder::Dpc(dpc) },
                );
                self.delivered(bundle, dpc, c, true, t)?;
            }
            Ev::ServiceDone { dpc } => self.on_service_done(dpc, t)?,
            Ev::Replica { dpc, report, cause } => {
                let id = self.dpcs[dpc].dpc.id;
                self.trace.push(t, Some(cause), TraceEvent::Replica { report: report.id, dpc: id });
                self.dpcs[dpc].peer_store.push(report);
            }
            Ev::CdcArrival { report, cause } => {
                let a = self.trace.push(t, Some(cause), TraceEvent::CdcArrival { report: report.id });
                let cdc = &self.sc.topology.cdc;
                let m = match_reference(&report, &mut self.reference_db, cdc.match_threshold)?;
                let ms = self.trace.push(
                    t,
                    Some(a),
                    TraceEvent::Match { report: report.id, similarity: m.similarity, matched: m.matched },
                );
                match request_response(&report, &m, cdc.escalate_unmatched) {
                    Some(request) => {
                        let at = t + self.sc.settings.cdc_dcc_latency;
                        self.q.schedule(at, Ev::Dcc { request, bundle: report.bundle, cause: ms })?;
                    }
                    None => {
                        self.trace.push(t, Some(ms), TraceEvent::Archived { report: report.id });
                    }
                }
            }
            Ev::Dcc { request, bundle, cause } => {
                let r = self.trace.push(t, Some(cause), TraceEvent::Request { report: request.report });
                let cdc = &self.sc.topology.cdc;
                let (order, services) = issue_warning(cdc, &request, OrderId(self.next_order), t);
                self.next_order += 1;
                let wseq = self.trace.push(
                    t,
                    Some(r),
                    TraceEvent::Warning {
                        order: order.id,
                        report: request.report,
                        class: order.hazard_class,
                        area: order.area_id,
                        severity: order.severity,
                        channels: order.channels.clone(),
                    },
                );
                for service in services {
                    self.trace.push(
                        t,
                        Some(wseq),
                        TraceEvent::Dispatch {
                            service,
                            source: DispatchSource::Dcc,
                            bypass: false,
                            class: order.hazard_class,
                            bundle: Some(bundle),
                            order: Some(order.id),
                        },
                    );
                }
                for st in disseminate_sms(&order, &cdc.providers) {
                    self.trace.push(
                        t,
                        Some(wseq),
                        TraceEvent::Sms {
                            order: order.id,
                            provider: st.provider,
                            subscribers: st.subscribers,
                            first: st.first_delivery,
                            last: st.last_delivery,
                        },
                    );
                }
                let at = t + self.sc.settings.internet_latency;
                self.trace.push(t, Some(wseq), TraceEvent::Internet { order: order.id, at });
            }
            Ev::Bypass { dispatch, bundle, cause } => {
                let source = match dispatch.source {
                    BypassSource::Map(m) => DispatchSource::Map(m),
                    BypassSource::Dpc(d) => DispatchSource::Dpc(d),
                };
                self.trace.push(
                    t,
                    Some(cause),
                    TraceEvent::Dispatch {
                        service: dispatch.service,
                        source,
                        bypass: true,
                        class: dispatch.hazard_class,
                        bundle: Some(bundle),
                        order: None,
                    },
                );
            }
        }
        Ok(())
    }

    fn on_tick(&mut self, i: usize, k: u64, _now: f64) -> Result<(), EngineError> {
        let topo = &self.sc.topology;
        let window = self.sdccs[i].state.window;
        let t = k as f64 * window;
        let id = self.sdccs[i].state.id;
        let readings = generate_readings(&self.sc.hazards, topo.sensors_of(id), t, &mut self.rng);
        let mut cause = None;
        let mut truthful_cause = None;
        for r in readings {
            let hz = r.hazard.and_then(|h| self.sc.hazards.iter().position(|x| x.id == h));
            let seq = self.trace.push(
                t,
                hz.and_then(|h| self.hazard_seq[h]),
                TraceEvent::Reading { sensor: r.sensor, sdcc: id, value: r.value, truthful: r.truthful, hazard: r.hazard },
            );
            cause = Some(seq);
            if r.truthful && truthful_cause.is_none() {
                truthful_cause = Some(seq);
            }
            self.sdccs[i].state.ingest(r)?;
        }
        self.sdccs[i].state.evict(t);
        let live = topo.live_sensors_of(id, t) as u32;
        if let Some(batch) = self.sdccs[i].state.evaluate_threshold(live, &mut self.next_batch) {
            let class = batch.hazard_class_hint;
            let trig = self.trace.push(
                t,
                truthful_cause.or(cause),
                TraceEvent::Trigger {
                    batch: batch.id,
                    sdcc: id,
                    region: batch.region,
                    sensors: batch.contributing_sensors.len() as u32,
                    readings: batch.readings.len() as u32,
                    bytes: batch.payload_bytes,
                    class,
                    hazards: batch.hazards().into_iter().collect(),
                },
            );
            let bid = BundleId(self.next_bundle);
            self.next_bundle += 1;
            let urgent = topo.cdc.bypass_classes.contains(&class);
            let batch_id = batch.id;
            let bundle = DataBundle::new(bid, batch, t, urgent);
            let bseq = self.trace.push(
                t,
                Some(trig),
                TraceEvent::Bundle { bundle: bid, batch: batch_id, sdcc: id, bytes: bundle.total_bytes, urgent },
            );
            let direct = self.sdccs[i].direct;
            let mut run = BundleRun { b: bundle, direct: direct.is_some(), bypassed: false, busy: false, last: bseq };
            if let Some(d) = direct {
                let dur = direct_transfer(topo, id, d, &run.b, self.sc.settings.link_efficiency)?;
                run.busy = true;
                self.q.schedule(t + dur, Ev::DirectDone { bundle: bid, dpc: d })?;
                self.bundles.insert(bid, run);
            } else {
                self.bundles.insert(bid, run);
                self.sdccs[i].held.push(bid);
                for j in 0..self.maps.len() {
                    if self.maps[j].session.as_ref().is_some_and(|s| s.s.endpoint == Endpoint::Sdcc(id)) {
                        self.kick(j, t)?;
                    }
                }
            }
        }
        self.sdccs[i].state.close_window(t);
        let next = (k + 1) as f64 * window;
        if next <= self.horizon {
            self.q.schedule(next, Ev::Tick { sdcc: i, k: k + 1 })?;
        }
        Ok(())
    }

    fn endpoint_pos(&self, e: Endpoint) -> crate::model::GeoPoint {
        match e {
            Endpoint::Sdcc(s) => self.sc.topology.sdcc(s).expect("validated").position,
            Endpoint::Dpc(d) => self.sc.topology.dpc(d).expect("validated").position,
        }
    }

    fn pool(&mut self, e: Endpoint) -> &mut ChannelPool {
        match e {
            Endpoint::Sdcc(s) => &mut self.sdccs[self.sdcc_ix[&s]].pool,
            Endpoint::Dpc(d) => &mut self.dpcs[self.dpc_ix[&d]].pool,
        }
    }

    fn rate(&self, j: usize, e: Endpoint) -> f64 {
        let other = match e {
            Endpoint::Sdcc(s) => self.sdccs[self.sdcc_ix[&s]].link,
            Endpoint::Dpc(d) => self.dpcs[self.dpc_ix[&d]].link,
        };
        self.maps[j].link.shared_rate_mbps(&other)
    }

    fn in_range(&self, j: usize, e: Endpoint) -> bool {
        let m = &self.maps[j];
        detect_contact(m.mob.position(), m.unit.contact_range, self.endpoint_pos(e))
    }

    fn has_work(&self, j: usize, e: Endpoint) -> bool {
        match e {
            Endpoint::Sdcc(s) => {
                let deferred = self.maps[j].session.as_ref().filter(|x| x.s.endpoint == e).map(|x| &x.deferred);
                self.sdccs[self.sdcc_ix[&s]]
                    .held
                    .iter()
                    .any(|b| !self.bundles[b].busy && !deferred.is_some_and(|d| d.contains(b)))
            }
            Endpoint::Dpc(_) => !self.maps[j].carried.is_empty(),
        }
    }

    fn on_move(&mut self, k: u64, t: f64) -> Result<(), EngineError> {
        let dt = self.sc.settings.mobility_step;
        if k > 0 {
            for m in self.maps.iter_mut().filter(|m| !m.served.is_empty()) {
                m.mob.step(dt);
            }
        }
        for j in 0..self.maps.len() {
            if self.maps[j].served.is_empty() {
                continue;
            }
            let id = self.maps[j].unit.id;
            let served = self.maps[j].served.clone();
            let in_range: Vec<Endpoint> = served.iter().copied().filter(|e| self.in_range(j, *e)).collect();
            if let Some(e) = self.maps[j].session.as_ref().map(|s| s.s.endpoint) {
                if !in_range.contains(&e) {
                    self.close_session(j, CloseReason::ContactLost, t)?;
                }
            }
            for e in served.iter().filter(|e| !in_range.contains(e)) {
                self.pool(*e).leave_queue(id);
                self.maps[j].blocked_episode.remove(e);
            }
            self.seek(j, &in_range, t)?;
        }
        let next = (k + 1) as f64 * dt;
        if next <= self.horizon {
            self.q.schedule(next, Ev::Move { k: k + 1 })?;
        }
        Ok(())
    }

    /// Tries to put an idle MAP into a session, preferring endpoints where
    /// there is something to move.
    fn seek(&mut self, j: usize, in_range: &[Endpoint], t: f64) -> Result<(), EngineError> {
        if let Some(s) = &self.maps[j].session {
            let e = s.s.endpoint;
            let idle = s.xfer.is_none() && !self.has_work(j, e);
            if idle && in_range.iter().any(|x| *x != e && self.has_work(j, *x)) {
                self.close_session(j, CloseReason::Switch, t)?;
            } else {
                return Ok(());
            }
        }
        let mut order = in_range.to_vec();
        order.sort_by_key(|e| (!self.has_work(j, *e), *e));
        let id = self.maps[j].unit.id;
        for e in order {
            let rate = self.rate(j, e);
            match self.pool(e).form_session(id, e, rate, t) {
                Ok(s) => {
                    self.open_session(j, s, t)?;
                    break;
                }
                Err(_) => {
                    if self.maps[j].blocked_episode.insert(e) {
                        let active = self.pool(e).active();
                        self.trace.push(t, None, TraceEvent::Blocked { map: id, endpoint: e, active });
                    }
                }
            }
        }
        Ok(())
    }

    fn open_session(&mut self, j: usize, s: AdhocSession, t: f64) -> Result<(), EngineError> {
        let id = self.maps[j].unit.id;
        for e in self.maps[j].served.clone() {
            self.pool(e).leave_queue(id);
        }
        let open_seq = self.trace.push(
            t,
            None,
            TraceEvent::SessionOpen { map: id, endpoint: s.endpoint, channel: s.channel, rate_mbps: s.rate_mbps },
        );
        self.maps[j].session = Some(Sess { s, open_seq, xfer: None, deferred: BTreeSet::new() });
        self.kick(j, t)
    }

    fn close_session(&mut self, j: usize, reason: CloseReason, t: f64) -> Result<(), EngineError> {
        let Some(sess) = self.maps[j].session.take() else {
            return Ok(());
        };
        let e = sess.s.endpoint;
        let map_id = self.maps[j].unit.id;
        if let Some(x) = sess.xfer {
            let eff = self.sc.settings.link_efficiency;
            let br = self.bundles.get_mut(&x.bundle).expect("known bundle");
            let total = br.b.total_bytes;
            let moved = transfer(sess.s.rate_mbps, eff, total as f64 - x.done_before, t - x.started);
            let done = x.done_before + moved;
            br.busy = false;
            let last = br.last;
            self.maps[j].partial.insert((e, x.bundle), done);
            if matches!(e, Endpoint::Sdcc(_)) {
                self.maps[j].buf.release(total);
            }
            self.trace.push(
                t,
                Some(last),
                TraceEvent::Transfer {
                    bundle: x.bundle,
                    map: Some(map_id),
                    endpoint: e,
                    bytes_done: done,
                    bytes_total: total,
                    complete: false,
                },
            );
        }
        self.trace.push(
            t,
            Some(sess.open_seq),
            TraceEvent::SessionClose { map: map_id, endpoint: e, channel: sess.s.channel, reason },
        );
        self.pool(e).release(sess.s.channel);
        if reason != CloseReason::Horizon {
            self.grant(e, t)?;
        }
        Ok(())
    }

    /// Hands a freed channel to the MAPs queued at `e`, oldest first.
    fn grant(&mut self, e: Endpoint, t: f64) -> Result<(), EngineError> {
        let waiting: Vec<MapId> = self.pool(e).waiting().collect();
        for m in waiting {
            let j = self.map_ix[&m];
            if self.maps[j].session.is_some() || !self.in_range(j, e) {
                continue;
            }
            let rate = self.rate(j, e);
            match self.pool(e).form_session(m, e, rate, t) {
                Ok(s) => self.open_session(j, s, t)?,
                Err(_) => break,
            }
        }
        Ok(())
    }

    /// Starts the next transfer of an idle session, if any.
    fn kick(&mut self, j: usize, t: f64) -> Result<(), EngineError> {
        let Some(sess) = &self.maps[j].session else {
            return Ok(());
        };
        if sess.xfer.is_some() {
            return Ok(());
        }
        let e = sess.s.endpoint;
        let rate = sess.s.rate_mbps;
        let map_id = self.maps[j].unit.id;
        let urgent_first = |ids: &[BundleId], bundles: &BTreeMap<BundleId, BundleRun>| {
            let mut v: Vec<BundleId> = ids.to_vec();
            v.sort_by_key(|b| !bundles[b].b.urgent);
            v
        };
        let pick = match e {
            Endpoint::Sdcc(s) => {
                let held = urgent_first(&self.sdccs[self.sdcc_ix[&s]].held, &self.bundles);
                let mut chosen = None;
                for b in held {
                    let sess = self.maps[j].session.as_ref().expect("checked");
                    if self.bundles[&b].busy || sess.deferred.contains(&b) {
                        continue;
                    }
                    let total = self.bundles[&b].b.total_bytes;
                    if self.maps[j].buf.reserve(map_id, total).is_ok() {
                        chosen = Some(b);
                        break;
                    }
                    let br = self.bundles.get_mut(&b).expect("known bundle");
                    br.b.deferred = Some(DeferReason::BufferFull);
                    let last = br.last;
                    self.maps[j].session.as_mut().expect("checked").deferred.insert(b);
                    self.trace.push(
                        t,
                        Some(last),
                        TraceEvent::Deferred { bundle: b, map: map_id, reason: DeferReason::BufferFull },
                    );
                }
                chosen
            }
            Endpoint::Dpc(_) => urgent_first(&self.maps[j].carried, &self.bundles).first().copied(),
        };
        let Some(b) = pick else {
            return Ok(());
        };
        let done_before = self.maps[j].partial.get(&(e, b)).copied().unwrap_or(0.0);
        let br = self.bundles.get_mut(&b).expect("known bundle");
        br.busy = true;
        let remaining = (br.b.total_bytes as f64 - done_before).max(0.0);
        let dur = if remaining == 0.0 {
            0.0
        } else {
            remaining * 8.0 / (rate * 1e6 * self.sc.settings.link_efficiency)
        };
        let token = self.next_token;
        self.next_token += 1;
        self.maps[j].session.as_mut().expect("checked").xfer = Some(Xfer { bundle: b, done_before, started: t, token });
        self.q.schedule(t + dur, Ev::TransferDone { map: j, token })?;
        Ok(())
    }

    fn on_transfer_done(&mut self, j: usize, token: u64, t: f64) -> Result<(), EngineError> {
        let Some(sess) = self.maps[j].session.as_mut() else {
            return Ok(());
        };
        if sess.xfer.as_ref().map(|x| x.token) != Some(token) {
            return Ok(());
        }
        let x = sess.xfer.take().expect("checked");
        let e = sess.s.endpoint;
        let map_id = self.maps[j].unit.id;
        self.maps[j].partial.remove(&(e, x.bundle));
        let br = self.bundles.get_mut(&x.bundle).expect("known bundle");
        br.busy = false;
        let total = br.b.total_bytes;
        let from = br.b.holder();
        let xs = self.trace.push(
            t,
            Some(br.last),
            TraceEvent::Transfer {
                bundle: x.bundle,
                map: Some(map_id),
                endpoint: e,
                bytes_done: total as f64,
                bytes_total: total,
                complete: true,
            },
        );
        match e {
            Endpoint::Sdcc(s) => {
                let si = self.sdcc_ix[&s];
                self.sdccs[si].held.retain(|b| *b != x.bundle);
                self.maps[j].carried.push(x.bundle);
                let br = self.bundles.get_mut(&x.bundle).expect("known bundle");
                br.b.deferred = None;
                br.b.hand_over(Holder::Map(map_id), t);
                let c = self.trace.push(t, Some(xs), TraceEvent::Custody { bundle: x.bundle, from, to: Holder::Map(map_id) });
                self.bundles.get_mut(&x.bundle).expect("known bundle").last = c;
                self.maybe_bypass(x.bundle, BypassSource::Map(map_id), c, t)?;
            }
            Endpoint::Dpc(d) => {
                self.maps[j].carried.retain(|b| *b != x.bundle);
                self.maps[j].buf.release(total);
                self.bundles.get_mut(&x.bundle).expect("known bundle").b.hand_over(Holder::Dpc(d), t);
                let c = self.trace.push(t, Some(xs), TraceEvent::Custody { bundle: x.bundle, from, to: Holder::Dpc(d) });
                self.delivered(x.bundle, d, c, false, t)?;
            }
        }
        self.kick(j, t)
    }

    fn maybe_bypass(&mut self, b: BundleId, source: BypassSource, cause: u64, t: f64) -> Result<(), EngineError> {
        let br = self.bundles.get_mut(&b).expect("known bundle");
        if br.bypassed {
            return Ok(());
        }
        let class = br.b.batches[0].hazard_class_hint;
        let cdc = &self.sc.topology.cdc;
        if let Some(dispatch) = bypass_emergency(&cdc.bypass_classes, source, class, t, self.sc.settings.bypass_latency) {
            br.bypassed = true;
            self.q.schedule(dispatch.time, Ev::Bypass { dispatch, bundle: b, cause })?;
        }
        Ok(())
    }

    /// Custody reached a DPC: log it and queue the bundle on the region's
    /// next DPC in round-robin order.
    fn delivered(&mut self, b: BundleId, dpc: DpcId, custody: u64, direct: bool, t: f64) -> Result<(), EngineError> {
        let d = self.trace.push(t, Some(custody), TraceEvent::Delivery { bundle: b, dpc, direct });
        self.bundles.get_mut(&b).expect("known bundle").last = d;
        self.maybe_bypass(b, BypassSource::Dpc(dpc), custody, t)?;
        let region = self.sc.topology.dpc(dpc).expect("validated").region;
        let target = self.rr.entry(region).or_default().pick(&self.region_dpcs[&region]).expect("region has a dpc");
        let ti = self.dpc_ix[&target];
        let run = &mut self.dpcs[ti];
        let queue_len = run.queue.len() + usize::from(run.busy.is_some()) + 1;
        let a = self.trace.push(t, Some(d), TraceEvent::Assign { bundle: b, dpc: target, queue_len });
        self.dpcs[ti].queue.push_back(Job { bundle: b, report: None, cause: a });
        self.start_service(ti, t)
    }

    fn start_service(&mut self, i: usize, t: f64) -> Result<(), EngineError> {
        if self.dpcs[i].busy.is_some() {
            return Ok(());
        }
        if let Some(job) = self.dpcs[i].queue.pop_front() {
            self.dpcs[i].busy = Some(job);
            self.q.schedule(t + self.dpcs[i].dpc.service_time, Ev::ServiceDone { dpc: i })?;
        }
        Ok(())
    }

    fn on_service_done(&mut self, i: usize, t: f64) -> Result<(), EngineError> {
        let Some(mut job) = self.dpcs[i].busy.take() else {
            return Ok(());
        };
        let dpc = self.dpcs[i].dpc;
        let report = match job.report.take() {
            Some(r) => r,
            None => {
                let r = process_batch(dpc.id, &self.bundles[&job.bundle].b, ReportId(self.next_report), t)?;
                self.next_report += 1;
                r
            }
        };
        let verdict = check_confidence(&report, dpc);
        let v = self.trace.push(
            t,
            Some(job.cause),
            TraceEvent::Verdict {
                report: report.id,
                bundle: job.bundle,
                dpc: dpc.id,
                confidence: report.confidence,
                reprocess_count: report.reprocess_count,
                verdict,
                queue_len: self.dpcs[i].queue.len(),
            },
        );
        match verdict {
            Verdict::Pass => {
                let settings = &self.sc.settings;
                let peers = replicate(dpc, &report);
                let r = self.trace.push(t, Some(v), TraceEvent::Replicate { report: report.id, dpc: dpc.id, acks: peers.len() });
                for p in peers {
                    if let Some(&pi) = self.dpc_ix.get(&p) {
                        self.q.schedule(t + settings.inter_dpc_latency, Ev::Replica { dpc: pi, report: report.clone(), cause: r })?;
                    }
                }
                let arrival = forward_to_cdc(&mut self.dpcs[i].history, &report, verdict, t, settings.dpc_cdc_latency);
                if let Some(at) = arrival {
                    let f = self.trace.push(t, Some(v), TraceEvent::Forward { report: report.id, dpc: dpc.id });
                    self.q.schedule(at, Ev::CdcArrival { report, cause: f })?;
                }
            }
            Verdict::Reprocess => {
                let (again, outcome) = reprocess(&report, &self.dpcs[i].peer_store, t, self.sc.settings.lookback);
                let m = self.trace.push(
                    t,
                    Some(v),
                    TraceEvent::Merge { report: report.id, dpc: dpc.id, merged: outcome.merged, conflicts: outcome.conflicts },
                );
                self.dpcs[i].busy = Some(Job { bundle: job.bundle, report: Some(again), cause: m });
                self.q.schedule(t + dpc.service_time, Ev::ServiceDone { dpc: i })?;
                return Ok(());
            }
            Verdict::Reject => {}
        }
        self.start_service(i, t)
    }

    fn finish(&mut self) {
        let t = self.horizon;
        for j in 0..self.maps.len() {
            // cannot fail: closing never schedules
            let _ = self.close_session(j, CloseReason::Horizon, t);
        }
        let (mut delivered, mut in_flight, mut buffered, mut deferred) = (0, 0, 0, 0);
        for br in self.bundles.values() {
            match br.b.holder() {
                Holder::Dpc(_) => delivered += 1,
                Holder::Map(_) => in_flight += 1,
                Holder::Sdcc(_) if br.direct => in_flight += 1,
                Holder::Sdcc(_) if br.b.deferred.is_some() => deferred += 1,
                Holder::Sdcc(_) => buffered += 1,
            }
        }
        self.trace.push(
            t,
            None,
            TraceEvent::End { created: self.bundles.len() as u64, delivered, in_flight, buffered, deferred },
        );
    }
}
