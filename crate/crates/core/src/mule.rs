//! Level two: mobile access points carrying bundles from SDCCs to DPCs.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{distance, BaselineRecord, DpcId, GeoPoint, LinkSpec, MapId, MapUnit, MobilityMode, SdccId, Topology};
use crate::sensing::EventBatch;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MuleError {
    #[error("SDCC {sdcc} and DPC {dpc} are not a direct-link pair")]
    NotCollapsed { sdcc: SdccId, dpc: DpcId },
    #[error("MAP {map} buffer full: {needed} bytes needed, {free} free")]
    BufferFull { map: MapId, needed: u64, free: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BundleId(pub u64);

impl fmt::Display for BundleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "type", content = "id", rename_all = "snake_case")]
pub enum Holder {
    Sdcc(SdccId),
    Map(MapId),
    Dpc(DpcId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "type", content = "id", rename_all = "snake_case")]
pub enum Endpoint {
    Sdcc(SdccId),
    Dpc(DpcId),
}

impl From<Endpoint> for Holder {
    fn from(e: Endpoint) -> Self {
        match e {
            Endpoint::Sdcc(s) => Holder::Sdcc(s),
            Endpoint::Dpc(d) => Holder::Dpc(d),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CustodyEntry {
    pub holder: Holder,
    pub time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeferReason {
    BufferFull,
}

/// Custody-tracked payload moving from an SDCC to a DPC.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataBundle {
    pub id: BundleId,
    pub batches: Vec<EventBatch>,
    pub baseline_snapshots: Vec<BaselineRecord>,
    pub total_bytes: u64,
    pub custody: Vec<CustodyEntry>,
    pub created_time: f64,
    /// Carries a batch of a bypass hazard class.
    pub urgent: bool,
    pub deferred: Option<DeferReason>,
}

impl DataBundle {
    pub fn new(id: BundleId, batch: EventBatch, created_time: f64, urgent: bool) -> Self {
        let origin = batch.sdcc_id;
        Self {
            id,
            baseline_snapshots: batch.baseline.clone(),
            total_bytes: batch.payload_bytes,
            batches: vec![batch],
            custody: vec![CustodyEntry { holder: Holder::Sdcc(origin), time: created_time }],
            created_time,
            urgent,
            deferred: None,
        }
    }

    pub fn origin(&self) -> SdccId {
        match self.custody[0].holder {
            Holder::Sdcc(s) => s,
            _ => unreachable!("custody always starts at an SDCC"),
        }
    }

    pub fn holder(&self) -> Holder {
        self.custody.last().expect("custody is never empty").holder
    }

    pub fn hand_over(&mut self, to: Holder, time: f64) {
        self.custody.push(CustodyEntry { holder: to, time });
    }

    /// Custody shape rule: SDCC, MAP, DPC on muled paths and SDCC, DPC on
    /// direct paths. Incomplete chains must be a prefix of that shape.
    pub fn custody_shape_ok(&self, direct: bool) -> bool {
        let kinds: Vec<u8> = self
            .custody
            .iter()
            .map(|c| match c.holder {
                Holder::Sdcc(_) => 0,
                Holder::Map(_) => 1,
                Holder::Dpc(_) => 2,
            })
            .collect();
        let full: &[u8] = if direct { &[0, 2] } else { &[0, 1, 2] };
        kinds.len() <= full.len() && kinds[..] == full[..kinds.len()]
    }
}

/// Position of a MAP along its route.
#[derive(Debug, Clone)]
pub struct Mobility {
    route: Vec<GeoPoint>,
    mode: MobilityMode,
    speed: f64,
    position: GeoPoint,
    /// Patrol: arc length travelled along the closed loop.
    arc: f64,
    perimeter: f64,
    /// Random waypoint: index of the current target.
    target: usize,
    rng: Option<ChaCha8Rng>,
}

impl Mobility {
    pub fn new(map: &MapUnit, rng: ChaCha8Rng) -> Self {
        let n = map.route.len();
        let perimeter = (0..n).map(|i| distance(map.route[i], map.route[(i + 1) % n])).sum();
        let mut m = Self {
            route: map.route.clone(),
            mode: map.mobility,
            speed: map.speed,
            position: map.position(),
            arc: 0.0,
            perimeter,
            target: 0,
            rng: None,
        };
        if m.mode == MobilityMode::RandomWaypoint {
            m.rng = Some(rng);
            m.target = m.pick_target();
        }
        m
    }

    pub fn position(&self) -> GeoPoint {
        self.position
    }

    /// Advances by `dt` seconds at constant speed and returns the new
    /// position.
    pub fn step(&mut self, dt: f64) -> GeoPoint {
        if dt <= 0.0 || self.route.len() < 2 {
            return self.position;
        }
        match self.mode {
            MobilityMode::Patrol => {
                self.arc = (self.arc + self.speed * dt) % self.perimeter;
                self.position = self.point_at(self.arc);
            }
            MobilityMode::RandomWaypoint => {
                let mut budget = self.speed * dt;
                loop {
                    let goal = self.route[self.target];
                    let gap = distance(self.position, goal);
                    if gap > budget {
                        self.position = self.position.toward(goal, budget);
                        break;
                    }
                    budget -= gap;
                    self.position = goal;
                    self.target = self.pick_target();
                    if budget <= 0.0 {
                        break;
                    }
                }
            }
        }
        self.position
    }

    fn point_at(&self, mut arc: f64) -> GeoPoint {
        let n = self.route.len();
        for i in 0..n {
            let (a, b) = (self.route[i], self.route[(i + 1) % n]);
            let len = distance(a, b);
            if arc <= len {
                return a.toward(b, arc);
            }
            arc -= len;
        }
        self.route[0]
    }

    fn pick_target(&mut self) -> usize {
        let n = self.route.len();
        let current = self.target;
        let rng = self.rng.as_mut().expect("random mode owns an rng");
        // uniform over every waypoint except the one just reached
        let k = rng.gen_range(0..n - 1);
        if k >= current {
            k + 1
        } else {
            k
        }
    }
}

/// One-shot helper: where `map` is after `dt` seconds from its start.
pub fn step_mobility(map: &MapUnit, rng: ChaCha8Rng, dt: f64) -> GeoPoint {
    let mut m = Mobility::new(map, rng);
    m.step(dt)
}

/// Contact is inclusive: exactly at range counts.
pub fn detect_contact(map_position: GeoPoint, contact_range: f64, node: GeoPoint) -> bool {
    distance(map_position, node) <= contact_range
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Collect,
    Deliver,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdhocSession {
    pub map: MapId,
    pub endpoint: Endpoint,
    pub direction: Direction,
    pub channel: usize,
    pub start_time: f64,
    pub rate_mbps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Blocked;

/// Channel bookkeeping at one SDCC or DPC.
#[derive(Debug, Clone)]
pub struct ChannelPool {
    capacity: usize,
    in_use: BTreeMap<usize, MapId>,
    waiting: VecDeque<MapId>,
}

impl ChannelPool {
    pub fn new(link: LinkSpec) -> Self {
        Self { capacity: link.channels(), in_use: BTreeMap::new(), waiting: VecDeque::new() }
    }

    pub fn active(&self) -> usize {
        self.in_use.len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Opens a session on the lowest free channel, or queues the MAP.
    pub fn form_session(
        &mut self,
        map: MapId,
        endpoint: Endpoint,
        rate_mbps: f64,
        now: f64,
    ) -> Result<AdhocSession, Blocked> {
        let Some(channel) = (1..=self.capacity).find(|c| !self.in_use.contains_key(c)) else {
            if !self.waiting.contains(&map) {
                self.waiting.push_back(map);
            }
            return Err(Blocked);
        };
        self.waiting.retain(|m| *m != map);
        self.in_use.insert(channel, map);
        let direction = match endpoint {
            Endpoint::Sdcc(_) => Direction::Collect,
            Endpoint::Dpc(_) => Direction::Deliver,
        };
        Ok(AdhocSession { map, endpoint, direction, channel, start_time: now, rate_mbps })
    }

    pub fn release(&mut self, channel: usize) {
        self.in_use.remove(&channel);
    }

    pub fn is_waiting(&self, map: MapId) -> bool {
        self.waiting.contains(&map)
    }

    pub fn leave_queue(&mut self, map: MapId) {
        self.waiting.retain(|m| *m != map);
    }

    /// Waiting MAPs in arrival order.
    pub fn waiting(&self) -> impl Iterator<Item = MapId> + '_ {
        self.waiting.iter().copied()
    }
}

/// Wall time to move `bytes` at a nominal rate.
pub fn transfer_duration(bytes: u64, rate_mbps: f64, efficiency: f64) -> f64 {
    if bytes == 0 {
        return 0.0;
    }
    bytes as f64 * 8.0 / (rate_mbps * 1e6 * efficiency)
}

/// Bytes moved in `dt` seconds, capped by what is left.
pub fn transfer(rate_mbps: f64, efficiency: f64, remaining: f64, dt: f64) -> f64 {
    (rate_mbps * 1e6 / 8.0 * efficiency * dt.max(0.0)).min(remaining)
}

/// Duration of a direct SDCC-to-DPC hand-off, which is allowed only for
/// collapsed pairs.
pub fn direct_transfer(topo: &Topology, sdcc: SdccId, dpc: DpcId, bundle: &DataBundle, efficiency: f64) -> Result<f64, MuleError> {
    let pair = crate::model::collapse_pairs(topo).contains(&(sdcc, dpc));
    let s = topo.sdcc(sdcc).filter(|_| pair).ok_or(MuleError::NotCollapsed { sdcc, dpc })?;
    Ok(transfer_duration(bundle.total_bytes, LinkSpec::of(s.link).rate_mbps(), efficiency))
}

/// Byte accounting for a MAP's store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MapBuffer {
    pub capacity: u64,
    pub used: u64,
}

impl MapBuffer {
    pub fn new(capacity: u64) -> Self {
        Self { capacity, used: 0 }
    }

    pub fn free(&self) -> u64 {
        self.capacity - self.used
    }

    pub fn reserve(&mut self, map: MapId, bytes: u64) -> Result<(), MuleError> {
        if bytes > self.free() {
            return Err(MuleError::BufferFull { map, needed: bytes, free: self.free() });
        }
        self.used += bytes;
        Ok(())
    }

    pub fn release(&mut self, bytes: u64) {
        self.used = self.used.saturating_sub(bytes);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AreaId, CdcDcc, Dpc, HazardClass, LinkStandard, Region, Sdcc};
    use crate::rng::{stream, StreamKind};
    use crate::sensing::BatchId;
    use proptest::prelude::*;

    fn rng() -> ChaCha8Rng {
        stream(1, StreamKind::Map, 1)
    }

    fn line(len: f64) -> MapUnit {
        MapUnit::new(1, 1, vec![GeoPoint::new(0.0, 0.0), GeoPoint::new(len, 0.0)])
    }

    fn batch(bytes: u64) -> EventBatch {
        EventBatch {
            id: BatchId(1),
            sdcc_id: SdccId(1),
            region: AreaId(1),
            trigger_time: 0.0,
            contributing_sensors: Default::default(),
            readings: vec![],
            baseline: vec![],
            payload_bytes: bytes,
            hazard_class_hint: HazardClass::Flood,
            window_used: 10.0,
            live_sensors: 1,
        }
    }

    #[test]
    fn straight_segment_kinematics() {
        let mut m = line(1000.0);
        m.speed = 10.0;
        assert_eq!(step_mobility(&m, rng(), 5.0), GeoPoint::new(50.0, 0.0));
        assert_eq!(step_mobility(&m, rng(), 0.0), GeoPoint::new(0.0, 0.0));
    }

    #[test]
    fn patrol_wraps_to_first_waypoint() {
        // square loop with perimeter 1000 m
        let mut m = MapUnit::new(
            1,
            1,
            vec![GeoPoint::new(0.0, 0.0), GeoPoint::new(250.0, 0.0), GeoPoint::new(250.0, 250.0), GeoPoint::new(0.0, 250.0)],
        );
        m.speed = 10.0;
        let mut mob = Mobility::new(&m, rng());
        let start = mob.position();
        let mut trail = vec![];
        for _ in 0..100 {
            trail.push(mob.step(1.0));
        }
        assert_eq!(mob.position(), start);
        for (i, p) in trail.iter().enumerate() {
            assert_eq!(*p, mob.step(1.0), "step {i}");
        }
    }

    #[test]
    fn random_waypoint_stays_on_route_hull() {
        let mut m = MapUnit::new(
            1,
            1,
            vec![GeoPoint::new(0.0, 0.0), GeoPoint::new(100.0, 0.0), GeoPoint::new(100.0, 100.0)],
        );
        m.mobility = MobilityMode::RandomWaypoint;
        let mut a = Mobility::new(&m, rng());
        let mut b = Mobility::new(&m, rng());
        for _ in 0..500 {
            let p = a.step(1.0);
            assert_eq!(p, b.step(1.0));
            assert!(p.x >= -1e-9 && p.x <= 100.0 + 1e-9 && p.y >= -1e-9 && p.y <= p.x + 1e-9);
        }
    }

    #[test]
    fn contact_boundary_is_inclusive() {
        let o = GeoPoint::new(0.0, 0.0);
        assert!(detect_contact(o, 50.0, o));
        assert!(detect_contact(o, 50.0, GeoPoint::new(30.0, 40.0)));
        assert!(!detect_contact(o, 50.0, GeoPoint::new(30.0, 40.0 + 1e-9)));
    }

    #[test]
    fn channels_by_standard() {
        let mut b = ChannelPool::new(LinkSpec::of(LinkStandard::B));
        let s = b.form_session(MapId(1), Endpoint::Sdcc(SdccId(1)), 11.0, 0.0).unwrap();
        assert_eq!((s.channel, s.rate_mbps, s.direction), (1, 11.0, Direction::Collect));

        let mut g = ChannelPool::new(LinkSpec::of(LinkStandard::G));
        for m in 1..=3 {
            g.form_session(MapId(m), Endpoint::Dpc(DpcId(1)), 54.0, 0.0).unwrap();
        }
        assert_eq!(g.form_session(MapId(4), Endpoint::Dpc(DpcId(1)), 54.0, 0.0), Err(Blocked));
        assert!(g.is_waiting(MapId(4)));

        let mut a = ChannelPool::new(LinkSpec::of(LinkStandard::A));
        let ch: Vec<usize> = (1..=5)
            .map(|m| a.form_session(MapId(m), Endpoint::Sdcc(SdccId(1)), 54.0, 0.0).unwrap().channel)
            .collect();
        assert_eq!(ch, vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn freed_channel_is_reused_lowest_first() {
        let mut g = ChannelPool::new(LinkSpec::of(LinkStandard::G));
        for m in 1..=3 {
            g.form_session(MapId(m), Endpoint::Dpc(DpcId(1)), 54.0, 0.0).unwrap();
        }
        let _ = g.form_session(MapId(4), Endpoint::Dpc(DpcId(1)), 54.0, 0.0);
        let _ = g.form_session(MapId(5), Endpoint::Dpc(DpcId(1)), 54.0, 0.0);
        g.release(2);
        assert_eq!(g.waiting().next(), Some(MapId(4)));
        let s = g.form_session(MapId(4), Endpoint::Dpc(DpcId(1)), 54.0, 1.0).unwrap();
        assert_eq!(s.channel, 2);
        assert_eq!(g.waiting().collect::<Vec<_>>(), vec![MapId(5)]);
    }

    #[test]
    fn transfer_durations() {
        let mb = 1_000_000;
        let b = transfer_duration(mb, 11.0, 1.0);
        assert!((b - 8.0 / 11.0).abs() < 1e-12);
        let g = transfer_duration(mb, 54.0, 1.0);
        assert!((g / b - 11.0 / 54.0).abs() < 1e-12);
        assert_eq!(transfer_duration(0, 11.0, 1.0), 0.0);
        assert_eq!(transfer(11.0, 1.0, 100.0, 10.0), 100.0);
        assert_eq!(transfer(8.0, 1.0, 1e9, 1.0), 1e6);
    }

    fn pair_topology(dpc_at: f64) -> Topology {
        let mut t = Topology {
            regions: vec![Region { id: AreaId(1), link: LinkStandard::G }],
            sensors: vec![],
            sdccs: vec![Sdcc::new(1, 1, GeoPoint::new(0.0, 0.0), 1)],
            maps: vec![],
            dpcs: vec![Dpc::new(1, 1, GeoPoint::new(0.0, dpc_at))],
            cdc: CdcDcc::default(),
            delta: 100.0,
        };
        t.finalize().unwrap();
        t
    }

    #[test]
    fn direct_transfer_only_on_collapsed_pairs() {
        let bundle = DataBundle::new(BundleId(1), batch(1_000_000), 0.0, false);
        let d = direct_transfer(&pair_topology(50.0), SdccId(1), DpcId(1), &bundle, 1.0).unwrap();
        assert!((d - 8.0 / 54.0).abs() < 1e-12 && (d - 0.148).abs() < 1e-3);
        let empty = DataBundle::new(BundleId(2), batch(0), 0.0, false);
        assert_eq!(direct_transfer(&pair_topology(50.0), SdccId(1), DpcId(1), &empty, 1.0).unwrap(), 0.0);
        assert_eq!(
            direct_transfer(&pair_topology(500.0), SdccId(1), DpcId(1), &bundle, 1.0),
            Err(MuleError::NotCollapsed { sdcc: SdccId(1), dpc: DpcId(1) })
        );
    }

    #[test]
    fn custody_shapes() {
        let mut b = DataBundle::new(BundleId(1), batch(10), 0.0, false);
        assert!(b.custody_shape_ok(false) && b.custody_shape_ok(true));
        b.hand_over(Holder::Map(MapId(1)), 1.0);
        assert!(b.custody_shape_ok(false) && !b.custody_shape_ok(true));
        b.hand_over(Holder::Dpc(DpcId(1)), 2.0);
        assert!(b.custody_shape_ok(false));
        assert_eq!(b.holder(), Holder::Dpc(DpcId(1)));
        assert_eq!(b.origin(), SdccId(1));
    }

    #[test]
    fn buffer_accounting() {
        let mut buf = MapBuffer::new(100);
        buf.reserve(MapId(1), 60).unwrap();
        assert_eq!(buf.reserve(MapId(1), 50), Err(MuleError::BufferFull { map: MapId(1), needed: 50, free: 40 }));
        buf.release(60);
        assert_eq!(buf.free(), 100);
    }

    proptest! {
        #[test]
        fn halving_rate_doubles_duration(bytes in 1u64..100_000_000, std in 0usize..3) {
            let rate = LinkSpec::of(LinkStandard::ALL[std]).rate_mbps();
            let full = transfer_duration(bytes, rate, 1.0);
            let half = transfer_duration(bytes, rate / 2.0, 1.0);
            prop_assert!((half / full - 2.0).abs() < 1e-12);
        }

        #[test]
        fn patrol_moves_speed_times_dt(speed in 0.5..30.0f64, dt in 0.0..40.0f64) {
            let mut m = line(10_000.0);
            m.speed = speed;
            let p = step_mobility(&m, rng(), dt);
            prop_assert!((p.x - speed * dt).abs() < 1e-9);
        }
    }
}
