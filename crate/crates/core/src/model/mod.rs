//! Static domain entities: sensors, collection centers, mobile access
//! points, processing centers and the central data / command tier.
//!
//! Everything here is immutable once a scenario has been loaded and
//! [`Topology::finalize`] has run; the engine keeps its mutable run state
//! elsewhere.

mod geo;
mod validate;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::processing::DisasterRecord;
use crate::sensing;

pub use geo::{distance, point_segment_distance, GeoPoint};
pub use validate::{collapse_pairs, validate_topology, Finding, Rule, Severity, ValidationReport};

macro_rules! entity_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub u32);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

entity_id!(
    /// Sensor id `i`.
    SensorId
);
entity_id!(
    /// Sensor data collection center id `r`.
    SdccId
);
entity_id!(
    /// Mobile access point id `j`.
    MapId
);
entity_id!(
    /// Data processing center id `t`.
    DpcId
);
entity_id!(
    /// Area / region id `a`.
    AreaId
);
entity_id!(HazardId);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown {kind} `{value}`")]
pub struct UnknownVariant {
    pub kind: &'static str,
    pub value: String,
}

macro_rules! str_enum {
    ($(#[$meta:meta])* $name:ident, $kind:literal { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(&self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = UnknownVariant;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(UnknownVariant { kind: $kind, value: s.to_string() }),
                }
            }
        }
    };
}

str_enum!(
    /// Physical parameter a sensor watches.
    Modality, "modality" {
        Acoustic => "acoustic",
        Seismic => "seismic",
        Magnetic => "magnetic",
        Thermal => "thermal",
        WaterLevel => "water-level",
    }
);

str_enum!(
    HazardClass, "hazard class" {
        Flood => "flood",
        Tsunami => "tsunami",
        Cyclone => "cyclone",
        Earthquake => "earthquake",
        Landslide => "landslide",
        FlashFlood => "flash_flood",
        BuildingCollapse => "building_collapse",
        Tornado => "tornado",
    }
);

impl HazardClass {
    /// Classes that warrant a direct emergency call from a MAP or DPC.
    pub fn default_bypass() -> BTreeSet<HazardClass> {
        [
            HazardClass::Tornado,
            HazardClass::FlashFlood,
            HazardClass::Earthquake,
            HazardClass::Landslide,
            HazardClass::BuildingCollapse,
        ]
        .into_iter()
        .collect()
    }
}

str_enum!(
    BaselineCategory, "baseline category" {
        Demographic => "demographic",
        Health => "health",
        Resources => "resources",
        Infrastructure => "infrastructure",
    }
);

str_enum!(
    /// Wi-Fi flavour used for ad hoc sessions and direct links.
    LinkStandard, "link standard" {
        B => "802.11b",
        G => "802.11g",
        A => "802.11a",
    }
);

/// Nominal link parameters. Only constructible from a [`LinkStandard`], so
/// rate, band and channel count always agree with the standard.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinkSpec {
    standard: LinkStandard,
    rate_mbps: f64,
    band_ghz: f64,
    channels: usize,
}

impl LinkSpec {
    pub const fn of(standard: LinkStandard) -> Self {
        match standard {
            LinkStandard::B => Self { standard, rate_mbps: 11.0, band_ghz: 2.4, channels: 3 },
            LinkStandard::G => Self { standard, rate_mbps: 54.0, band_ghz: 2.4, channels: 3 },
            LinkStandard::A => Self { standard, rate_mbps: 54.0, band_ghz: 5.0, channels: 12 },
        }
    }

    pub fn standard(&self) -> LinkStandard {
        self.standard
    }

    pub fn rate_mbps(&self) -> f64 {
        self.rate_mbps
    }

    pub fn band_ghz(&self) -> f64 {
        self.band_ghz
    }

    /// Non-overlapping channels available at an endpoint.
    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Two radios can associate only on the same band; b and g interoperate
    /// at the slower rate.
    pub fn compatible(&self, other: &LinkSpec) -> bool {
        self.band_ghz == other.band_ghz
    }

    pub fn shared_rate_mbps(&self, other: &LinkSpec) -> f64 {
        self.rate_mbps.min(other.rate_mbps)
    }
}

impl From<LinkStandard> for LinkSpec {
    fn from(s: LinkStandard) -> Self {
        LinkSpec::of(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensorNode {
    pub id: SensorId,
    pub region: AreaId,
    pub position: GeoPoint,
    pub modality: Modality,
    pub false_report_prob: f64,
    /// Dead from the start of the run.
    pub failed: bool,
    /// Dies at this simulated time.
    pub fail_at: Option<f64>,
    pub assigned_sdcc: Option<SdccId>,
}

impl SensorNode {
    pub fn new(id: u32, region: u32, position: GeoPoint) -> Self {
        Self {
            id: SensorId(id),
            region: AreaId(region),
            position,
            modality: Modality::WaterLevel,
            false_report_prob: 0.0,
            failed: false,
            fail_at: None,
            assigned_sdcc: None,
        }
    }

    pub fn is_live_at(&self, t: f64) -> bool {
        !self.failed && self.fail_at.is_none_or(|f| t < f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineRecord {
    pub area: AreaId,
    pub category: BaselineCategory,
    pub payload_bytes: u64,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Sdcc {
    pub id: SdccId,
    pub region: AreaId,
    pub position: GeoPoint,
    pub tau: u32,
    /// Detection window length in seconds.
    pub window: f64,
    /// Hazard class this center reports as its batch hint.
    pub watch: HazardClass,
    pub link: LinkStandard,
    pub baseline: Vec<BaselineRecord>,
    pub collapsed_with: Option<DpcId>,
}

impl Sdcc {
    pub fn new(id: u32, region: u32, position: GeoPoint, tau: u32) -> Self {
        Self {
            id: SdccId(id),
            region: AreaId(region),
            position,
            tau,
            window: 10.0,
            watch: HazardClass::Flood,
            link: LinkStandard::G,
            baseline: Vec::new(),
            collapsed_with: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MobilityMode {
    /// Loop over the waypoints in order, wrapping to the first.
    Patrol,
    /// Head to a waypoint drawn uniformly from the route, repeat.
    RandomWaypoint,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MapUnit {
    pub id: MapId,
    pub region: AreaId,
    pub speed: f64,
    pub route: Vec<GeoPoint>,
    pub contact_range: f64,
    pub buffer_capacity: u64,
    pub link: LinkStandard,
    pub mobility: MobilityMode,
    /// SDCCs this unit collects from; empty means every SDCC of its region.
    pub sdccs: Vec<SdccId>,
    /// DPCs this unit delivers to; empty means every DPC of its region.
    pub dpcs: Vec<DpcId>,
}

impl MapUnit {
    pub fn new(id: u32, region: u32, route: Vec<GeoPoint>) -> Self {
        Self {
            id: MapId(id),
            region: AreaId(region),
            speed: 10.0,
            route,
            contact_range: 50.0,
            buffer_capacity: 64 * 1024 * 1024,
            link: LinkStandard::G,
            mobility: MobilityMode::Patrol,
            sdccs: Vec::new(),
            dpcs: Vec::new(),
        }
    }

    /// Initial position: the first waypoint.
    pub fn position(&self) -> GeoPoint {
        self.route.first().copied().unwrap_or_default()
    }

    /// Whether the unit's path brings it within contact range of `p`.
    pub fn route_visits(&self, p: GeoPoint) -> bool {
        let n = self.route.len();
        if self.route.iter().any(|w| distance(*w, p) <= self.contact_range) {
            return true;
        }
        match self.mobility {
            MobilityMode::RandomWaypoint => false,
            MobilityMode::Patrol => (0..n).any(|i| {
                point_segment_distance(p, self.route[i], self.route[(i + 1) % n]) <= self.contact_range
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Dpc {
    pub id: DpcId,
    pub region: AreaId,
    pub position: GeoPoint,
    pub confidence_threshold: f64,
    pub max_reprocess: u32,
    pub peers: Vec<DpcId>,
    pub history: Vec<DisasterRecord>,
    /// Seconds of processing per batch.
    pub service_time: f64,
    pub link: LinkStandard,
}

impl Dpc {
    pub fn new(id: u32, region: u32, position: GeoPoint) -> Self {
        Self {
            id: DpcId(id),
            region: AreaId(region),
            position,
            confidence_threshold: 0.7,
            max_reprocess: 2,
            peers: Vec::new(),
            history: Vec::new(),
            service_time: 5.0,
            link: LinkStandard::G,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmsProvider {
    pub area: AreaId,
    pub subscribers: u64,
    /// Seconds to push one batch of messages.
    pub batch_latency: f64,
    pub batch_size: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CdcDcc {
    pub cdc_count: u32,
    pub reference_db: Vec<DisasterRecord>,
    pub match_threshold: f64,
    pub providers: Vec<SmsProvider>,
    pub bypass_classes: BTreeSet<HazardClass>,
    /// Forward unmatched reports to the DCC anyway.
    pub escalate_unmatched: bool,
}

impl Default for CdcDcc {
    fn default() -> Self {
        Self {
            cdc_count: 1,
            reference_db: Vec::new(),
            match_threshold: 0.5,
            providers: Vec::new(),
            bypass_classes: HazardClass::default_bypass(),
            escalate_unmatched: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Region {
    pub id: AreaId,
    pub link: LinkStandard,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Topology {
    pub regions: Vec<Region>,
    pub sensors: Vec<SensorNode>,
    pub sdccs: Vec<Sdcc>,
    pub maps: Vec<MapUnit>,
    pub dpcs: Vec<Dpc>,
    pub cdc: CdcDcc,
    /// Direct-link distance threshold in meters.
    pub delta: f64,
}

impl Topology {
    pub fn region_ids(&self) -> impl Iterator<Item = AreaId> + '_ {
        self.regions.iter().map(|r| r.id)
    }

    pub fn sensor(&self, id: SensorId) -> Option<&SensorNode> {
        self.sensors.iter().find(|s| s.id == id)
    }

    pub fn sdcc(&self, id: SdccId) -> Option<&Sdcc> {
        self.sdccs.iter().find(|s| s.id == id)
    }

    pub fn dpc(&self, id: DpcId) -> Option<&Dpc> {
        self.dpcs.iter().find(|d| d.id == id)
    }

    pub fn map(&self, id: MapId) -> Option<&MapUnit> {
        self.maps.iter().find(|m| m.id == id)
    }

    pub fn sdccs_in(&self, region: AreaId) -> impl Iterator<Item = &Sdcc> + '_ {
        self.sdccs.iter().filter(move |s| s.region == region)
    }

    pub fn dpcs_in(&self, region: AreaId) -> impl Iterator<Item = &Dpc> + '_ {
        self.dpcs.iter().filter(move |d| d.region == region)
    }

    pub fn maps_in(&self, region: AreaId) -> impl Iterator<Item = &MapUnit> + '_ {
        self.maps.iter().filter(move |m| m.region == region)
    }

    pub fn sensors_in(&self, region: AreaId) -> impl Iterator<Item = &SensorNode> + '_ {
        self.sensors.iter().filter(move |s| s.region == region)
    }

    /// Sensors clustered onto `sdcc` (requires [`Topology::finalize`]).
    pub fn sensors_of(&self, sdcc: SdccId) -> impl Iterator<Item = &SensorNode> + '_ {
        self.sensors.iter().filter(move |s| s.assigned_sdcc == Some(sdcc))
    }

    pub fn live_sensors_of(&self, sdcc: SdccId, t: f64) -> usize {
        self.sensors_of(sdcc).filter(|s| s.is_live_at(t)).count()
    }

    /// SDCCs a MAP actually collects from: its configured set (or the whole
    /// region) minus SDCCs that talk to a DPC directly.
    pub fn served_sdccs(&self, map: &MapUnit) -> Vec<SdccId> {
        let collapsed: BTreeSet<SdccId> = collapse_pairs(self).into_iter().map(|(s, _)| s).collect();
        let base: Vec<SdccId> = if map.sdccs.is_empty() {
            self.sdccs_in(map.region).map(|s| s.id).collect()
        } else {
            map.sdccs.clone()
        };
        base.into_iter().filter(|s| !collapsed.contains(s)).collect()
    }

    pub fn served_dpcs(&self, map: &MapUnit) -> Vec<DpcId> {
        if map.dpcs.is_empty() {
            self.dpcs_in(map.region).map(|d| d.id).collect()
        } else {
            map.dpcs.clone()
        }
    }

    /// Resolves derived fields: sensor-to-SDCC clustering, direct-link
    /// pairs, and default peer lists (every other DPC of the region).
    /// Idempotent.
    pub fn finalize(&mut self) -> Result<(), sensing::SensingError> {
        let assignment: BTreeMap<SensorId, SdccId> = sensing::assign_clusters(&self.sensors, &self.sdccs)?;
        for s in &mut self.sensors {
            s.assigned_sdcc = assignment.get(&s.id).copied();
        }
        self.mark_collapsed();
        let by_region: BTreeMap<AreaId, Vec<DpcId>> = self.dpcs.iter().fold(BTreeMap::new(), |mut acc, d| {
            acc.entry(d.region).or_insert_with(Vec::new).push(d.id);
            acc
        });
        for d in &mut self.dpcs {
            if d.peers.is_empty() {
                d.peers = by_region[&d.region].iter().copied().filter(|p| *p != d.id).collect();
            }
        }
        Ok(())
    }

    /// Records each SDCC's direct-link partner: the nearest DPC (lowest id
    /// on ties) among those inside `delta`.
    pub fn mark_collapsed(&mut self) {
        let pairs = collapse_pairs(self);
        for sdcc in &mut self.sdccs {
            sdcc.collapsed_with = pairs
                .iter()
                .filter(|(s, _)| *s == sdcc.id)
                .filter_map(|(_, d)| self.dpcs.iter().find(|x| x.id == *d))
                .min_by(|a, b| {
                    distance(sdcc.position, a.position)
                        .total_cmp(&distance(sdcc.position, b.position))
                        .then(a.id.cmp(&b.id))
                })
                .map(|d| d.id);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn link_table() {
        let b = LinkSpec::of(LinkStandard::B);
        let g = LinkSpec::of(LinkStandard::G);
        let a = LinkSpec::of(LinkStandard::A);
        assert_eq!((b.rate_mbps(), b.band_ghz(), b.channels()), (11.0, 2.4, 3));
        assert_eq!((g.rate_mbps(), g.band_ghz(), g.channels()), (54.0, 2.4, 3));
        assert_eq!((a.rate_mbps(), a.band_ghz(), a.channels()), (54.0, 5.0, 12));
        assert!(b.compatible(&g));
        assert!(!g.compatible(&a));
        assert_eq!(b.shared_rate_mbps(&g), 11.0);
    }

    #[test]
    fn enum_text_round_trips() {
        for c in HazardClass::ALL {
            assert_eq!(c.as_str().parse::<HazardClass>().unwrap(), *c);
        }
        for s in LinkStandard::ALL {
            assert_eq!(s.as_str().parse::<LinkStandard>().unwrap(), *s);
        }
        assert!("802.11n".parse::<LinkStandard>().is_err());
    }

    #[test]
    fn patrol_route_visits_along_segments() {
        let m = MapUnit::new(1, 1, vec![GeoPoint::new(0.0, 0.0), GeoPoint::new(1000.0, 0.0)]);
        assert!(m.route_visits(GeoPoint::new(500.0, 40.0)));
        assert!(!m.route_visits(GeoPoint::new(500.0, 60.0)));
        let mut r = m.clone();
        r.mobility = MobilityMode::RandomWaypoint;
        assert!(!r.route_visits(GeoPoint::new(500.0, 40.0)));
        assert!(r.route_visits(GeoPoint::new(1000.0, 40.0)));
    }

    #[test]
    fn sensor_liveness() {
        let mut s = SensorNode::new(1, 1, GeoPoint::default());
        assert!(s.is_live_at(1e9));
        s.fail_at = Some(100.0);
        assert!(s.is_live_at(99.9));
        assert!(!s.is_live_at(100.0));
        s.failed = true;
        assert!(!s.is_live_at(0.0));
    }
}
