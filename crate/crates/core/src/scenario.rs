//! Scenario files: a sectioned `key = value` text format.
//!
//! ```text
//! # comment
//! [simulation]
//! seed = 7
//! horizon = 3600
//!
//! [region]
//! id = 1
//!
//! [sensor]
//! id = 1
//! region = 1
//! position = 0, 10
//! count = 10          # ids 1..=10
//! step = 5, 0         # each next sensor 5 m further along x
//! ```
//!
//! Sections may repeat (one per entity) except `[simulation]` and `[cdc]`.
//! `[region]`, `[sensor]`, `[sdcc]`, `[dpc]` and `[cdc]` are required.
//! Unknown sections or keys are errors, reported with their line number.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::decision::DEFAULT_SMS_BATCH;
use crate::model::{
    AreaId, BaselineRecord, CdcDcc, Dpc, DpcId, GeoPoint, HazardClass, HazardId, LinkStandard,
    MapId, MapUnit, MobilityMode, Modality, Region, Sdcc, SdccId, SensorId, SensorNode, SmsProvider, Topology,
};
use crate::processing::{DisasterRecord, FEATURE_LEN};
use crate::sensing::{HazardEvent, DEFAULT_READING_BYTES};

pub const DEFAULT_HORIZON: f64 = 86_400.0;

const REQUIRED: [&str; 5] = ["region", "sensor", "sdcc", "dpc", "cdc"];

/// Run-wide knobs. Every latency is in seconds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Settings {
    pub seed: u64,
    pub horizon: f64,
    /// Period of MAP position updates.
    pub mobility_step: f64,
    pub reading_bytes: u64,
    /// Fraction of nominal link rate achieved.
    pub link_efficiency: f64,
    pub inter_dpc_latency: f64,
    pub dpc_cdc_latency: f64,
    pub cdc_dcc_latency: f64,
    pub bypass_latency: f64,
    pub internet_latency: f64,
    /// How far back a reprocess pass looks for peer reports.
    pub lookback: f64,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            seed: 0,
            horizon: DEFAULT_HORIZON,
            mobility_step: 1.0,
            reading_bytes: DEFAULT_READING_BYTES,
            link_efficiency: 1.0,
            inter_dpc_latency: 1.0,
            dpc_cdc_latency: 1.0,
            cdc_dcc_latency: 1.0,
            bypass_latency: 0.5,
            internet_latency: 0.0,
            lookback: 3600.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scenario {
    pub topology: Topology,
    pub hazards: Vec<HazardEvent>,
    pub settings: Settings,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}{err}", path.as_ref().map(|p| format!("{}:", p.display())).unwrap_or_default())]
    Parse { path: Option<PathBuf>, err: ParseError },
}

/// A diagnostic pinned to a 1-based line (0 when it concerns the whole
/// file).
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line == 0 {
            write!(f, " {}", self.message)
        } else {
            write!(f, "{}: {}", self.line, self.message)
        }
    }
}

fn err<T>(line: usize, message: impl Into<String>) -> Result<T, ParseError> {
    Err(ParseError { line, message: message.into() })
}

pub fn parse_scenario(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.to_path_buf(), source })?;
    parse_scenario_str(&text).map_err(|err| ScenarioError::Parse { path: Some(path.to_path_buf()), err })
}

impl FromStr for Scenario {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_scenario_str(s)
    }
}

struct Entry {
    key: String,
    value: String,
    line: usize,
}

struct Block {
    name: String,
    line: usize,
    entries: Vec<Entry>,
    used: std::cell::RefCell<BTreeSet<usize>>,
}

impl Block {
    fn raw(&self, key: &str) -> Option<&Entry> {
        let idx = self.entries.iter().position(|e| e.key == key)?;
        self.used.borrow_mut().insert(idx);
        Some(&self.entries[idx])
    }

    fn opt<T>(&self, key: &str, parse: impl Fn(&str) -> Result<T, String>) -> Result<Option<T>, ParseError> {
        match self.raw(key) {
            None => Ok(None),
            Some(e) => parse(&e.value).map(Some).or_else(|m| err(e.line, format!("[{}] {key}: {m}", self.name))),
        }
    }

    fn req<T>(&self, key: &str, parse: impl Fn(&str) -> Result<T, String>) -> Result<T, ParseError> {
        self.opt(key, parse)?
            .map_or_else(|| err(self.line, format!("[{}] missing required key `{key}`", self.name)), Ok)
    }

    fn line_of(&self, key: &str) -> usize {
        self.entries.iter().find(|e| e.key == key).map_or(self.line, |e| e.line)
    }

    fn finish(&self) -> Result<(), ParseError> {
        let used = self.used.borrow();
        match self.entries.iter().enumerate().find(|(i, _)| !used.contains(i)) {
            Some((_, e)) => err(e.line, format!("[{}] unknown key `{}`", self.name, e.key)),
            None => Ok(()),
        }
    }
}

fn num(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("`{s}` is not finite"))
    }
}

fn non_neg(s: &str) -> Result<f64, String> {
    let v = num(s)?;
    if v < 0.0 {
        return Err(format!("{v} must be >= 0"));
    }
    Ok(v)
}

fn positive(s: &str) -> Result<f64, String> {
    let v = num(s)?;
    if v <= 0.0 {
        return Err(format!("{v} must be > 0"));
    }
    Ok(v)
}

fn unit(s: &str) -> Result<f64, String> {
    let v = num(s)?;
    if !(0.0..=1.0).contains(&v) {
        return Err(format!("{v} must be within [0, 1]"));
    }
    Ok(v)
}

fn int<T: FromStr>(s: &str) -> Result<T, String> {
    s.parse().map_err(|_| format!("`{s}` is not a valid non-negative integer"))
}

fn boolean(s: &str) -> Result<bool, String> {
    match s {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("`{s}` is not a boolean")),
    }
}

fn text(s: &str) -> Result<String, String> {
    Ok(s.to_string())
}

fn variant<T: FromStr>(s: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    s.parse().map_err(|e: T::Err| e.to_string())
}

fn list<T>(s: &str, item: impl Fn(&str) -> Result<T, String>) -> Result<Vec<T>, String> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(|p| item(p.trim())).collect()
}

fn point(s: &str) -> Result<GeoPoint, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [x, y] => Ok(GeoPoint::new(num(x)?, num(y)?)),
        _ => Err(format!("`{s}` is not an `x, y` point")),
    }
}

fn route(s: &str) -> Result<Vec<GeoPoint>, String> {
    let pts: Vec<GeoPoint> = s.split(';').map(|p| point(p.trim())).collect::<Result<_, _>>()?;
    if pts.is_empty() {
        return Err("route needs at least one waypoint".into());
    }
    Ok(pts)
}

fn features(s: &str) -> Result<Vec<f64>, String> {
    let v = list(s, num)?;
    if v.len() != FEATURE_LEN {
        return Err(format!("expected {FEATURE_LEN} features, got {}", v.len()));
    }
    Ok(v)
}

enum Footprint {
    All,
    Ids(Vec<u32>),
    Within(GeoPoint, f64),
}

fn footprint(s: &str) -> Result<Footprint, String> {
    let s = s.trim();
    if s == "all" {
        return Ok(Footprint::All);
    }
    if let Some(rest) = s.strip_prefix("within") {
        let v = list(rest.trim(), num)?;
        return match v.as_slice() {
            [x, y, r] if *r >= 0.0 => Ok(Footprint::Within(GeoPoint::new(*x, *y), *r)),
            _ => Err("expected `within x, y, radius`".into()),
        };
    }
    list(s, int).map(Footprint::Ids)
}

fn tokenize(input: &str) -> Result<Vec<Block>, ParseError> {
    let mut blocks: Vec<Block> = Vec::new();
    for (i, raw) in input.lines().enumerate() {
        let line = i + 1;
        let l = raw.trim();
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        if let Some(name) = l.strip_prefix('[') {
            let Some(name) = name.strip_suffix(']') else {
                return err(line, format!("malformed section header `{l}`"));
            };
            blocks.push(Block {
                name: name.trim().to_string(),
                line,
                entries: Vec::new(),
                used: Default::default(),
            });
            continue;
        }
        let Some((k, v)) = l.split_once('=') else {
            return err(line, format!("expected `key = value`, got `{l}`"));
        };
        let Some(block) = blocks.last_mut() else {
            return err(line, "key outside of any section");
        };
        let key = k.trim().to_string();
        if key.is_empty() {
            return err(line, "empty key");
        }
        if block.entries.iter().any(|e| e.key == key) {
            return err(line, format!("[{}] duplicate key `{key}`", block.name));
        }
        // trailing comments
        let value = v.split(" #").next().unwrap_or("").trim().to_string();
        block.entries.push(Entry { key, value, line });
    }
    Ok(blocks)
}

pub fn parse_scenario_str(input: &str) -> Result<Scenario, ParseError> {
    let blocks = tokenize(input)?;
    const KNOWN: [&str; 12] = [
        "simulation", "region", "sensor", "sdcc", "map", "dpc", "cdc", "provider", "hazard", "baseline", "reference",
        "history",
    ];
    for b in &blocks {
        if !KNOWN.contains(&b.name.as_str()) {
            return err(b.line, format!("unknown section [{}]", b.name));
        }
    }
    for name in REQUIRED {
        if !blocks.iter().any(|b| b.name == name) {
            return err(0, format!("missing required section [{name}]"));
        }
    }
    for name in ["simulation", "cdc"] {
        if let Some(dup) = blocks.iter().filter(|b| b.name == name).nth(1) {
            return err(dup.line, format!("section [{name}] may appear only once"));
        }
    }
    let of = |name: &'static str| blocks.iter().filter(move |b| b.name == name);

    let mut settings = Settings::default();
    let mut delta = 0.0;
    if let Some(b) = of("simulation").next() {
        settings.seed = b.opt("seed", int)?.unwrap_or(settings.seed);
        settings.horizon = b.opt("horizon", non_neg)?.unwrap_or(settings.horizon);
        settings.mobility_step = b.opt("mobility_step", positive)?.unwrap_or(settings.mobility_step);
        settings.reading_bytes = b.opt("reading_bytes", int)?.unwrap_or(settings.reading_bytes);
        if settings.reading_bytes == 0 {
            return err(b.line_of("reading_bytes"), "[simulation] reading_bytes must be >= 1");
        }
        settings.link_efficiency = b.opt("link_efficiency", unit)?.unwrap_or(settings.link_efficiency);
        if settings.link_efficiency == 0.0 {
            return err(b.line_of("link_efficiency"), "[simulation] link_efficiency must be > 0");
        }
        settings.inter_dpc_latency = b.opt("inter_dpc_latency", non_neg)?.unwrap_or(settings.inter_dpc_latency);
        settings.dpc_cdc_latency = b.opt("dpc_cdc_latency", non_neg)?.unwrap_or(settings.dpc_cdc_latency);
        settings.cdc_dcc_latency = b.opt("cdc_dcc_latency", non_neg)?.unwrap_or(settings.cdc_dcc_latency);
        settings.bypass_latency = b.opt("bypass_latency", non_neg)?.unwrap_or(settings.bypass_latency);
        settings.internet_latency = b.opt("internet_latency", non_neg)?.unwrap_or(settings.internet_latency);
        settings.lookback = b.opt("lookback", non_neg)?.unwrap_or(settings.lookback);
        delta = b.opt("delta", non_neg)?.unwrap_or(delta);
        b.finish()?;
    }

    let mut regions: Vec<Region> = Vec::new();
    for b in of("region") {
        let id = AreaId(b.req("id", int)?);
        if regions.iter().any(|r| r.id == id) {
            return err(b.line_of("id"), format!("duplicate region id {id}"));
        }
        let link = b.opt("link", variant)?.unwrap_or(LinkStandard::G);
        b.finish()?;
        regions.push(Region { id, link });
    }
    let region_link = |b: &Block| -> Result<(AreaId, LinkStandard), ParseError> {
        let id = AreaId(b.req("region", int)?);
        match regions.iter().find(|r| r.id == id) {
            Some(r) => Ok((id, b.opt("link", variant)?.unwrap_or(r.link))),
            None => err(b.line_of("region"), format!("[{}] unknown region {id}", b.name)),
        }
    };

    let mut sensors: Vec<SensorNode> = Vec::new();
    for b in of("sensor") {
        let id: u32 = b.req("id", int)?;
        let (region, _) = region_link(b)?;
        let position = b.req("position", point)?;
        let count: u32 = b.opt("count", int)?.unwrap_or(1);
        let step = b.opt("step", point)?.unwrap_or_default();
        let modality = b.opt("modality", variant)?.unwrap_or(Modality::WaterLevel);
        let false_report_prob = b.opt("false_report_prob", unit)?.unwrap_or(0.0);
        let failed = b.opt("failed", boolean)?.unwrap_or(false);
        let fail_at = b.opt("fail_at", non_neg)?;
        b.finish()?;
        if count == 0 || count > 100_000 {
            return err(b.line_of("count"), "[sensor] count must be within 1..=100000");
        }
        for k in 0..count {
            let Some(sid) = id.checked_add(k) else {
                return err(b.line_of("id"), "[sensor] id overflow");
            };
            if sensors.iter().any(|s| s.id == SensorId(sid)) {
                return err(b.line_of("id"), format!("duplicate sensor id {sid}"));
            }
            let kf = f64::from(k);
            sensors.push(SensorNode {
                id: SensorId(sid),
                region,
                position: GeoPoint::new(position.x + kf * step.x, position.y + kf * step.y),
                modality,
                false_report_prob,
                failed,
                fail_at,
                assigned_sdcc: None,
            });
        }
    }

    let mut sdccs: Vec<Sdcc> = Vec::new();
    for b in of("sdcc") {
        let id = SdccId(b.req("id", int)?);
        if sdccs.iter().any(|s| s.id == id) {
            return err(b.line_of("id"), format!("duplicate sdcc id {id}"));
        }
        let (region, link) = region_link(b)?;
        let position = b.req("position", point)?;
        let tau: u32 = b.req("tau", int)?;
        if tau < 1 {
            return err(b.line_of("tau"), "[sdcc] tau must be >= 1");
        }
        let window = b.opt("window", positive)?.unwrap_or(10.0);
        let watch = b.opt("watch", variant)?.unwrap_or(HazardClass::Flood);
        b.finish()?;
        sdccs.push(Sdcc { id, region, position, tau, window, watch, link, baseline: Vec::new(), collapsed_with: None });
    }

    let mut dpcs: Vec<Dpc> = Vec::new();
    for b in of("dpc") {
        let id = DpcId(b.req("id", int)?);
        if dpcs.iter().any(|d| d.id == id) {
            return err(b.line_of("id"), format!("duplicate dpc id {id}"));
        }
        let (region, link) = region_link(b)?;
        let mut d = Dpc::new(id.0, region.0, b.req("position", point)?);
        d.link = link;
        d.confidence_threshold = b.opt("confidence_threshold", unit)?.unwrap_or(d.confidence_threshold);
        d.max_reprocess = b.opt("max_reprocess", int)?.unwrap_or(d.max_reprocess);
        d.peers = b.opt("peers", |s| list(s, |x| int(x).map(DpcId)))?.unwrap_or_default();
        d.service_time = b.opt("service_time", non_neg)?.unwrap_or(d.service_time);
        b.finish()?;
        dpcs.push(d);
    }

    let mut maps: Vec<MapUnit> = Vec::new();
    for b in of("map") {
        let id = MapId(b.req("id", int)?);
        if maps.iter().any(|m| m.id == id) {
            return err(b.line_of("id"), format!("duplicate map id {id}"));
        }
        let (region, link) = region_link(b)?;
        let mut m = MapUnit::new(id.0, region.0, b.req("route", route)?);
        m.link = link;
        m.speed = b.opt("speed", positive)?.unwrap_or(m.speed);
        m.contact_range = b.opt("contact_range", non_neg)?.unwrap_or(m.contact_range);
        m.buffer_capacity = b.opt("buffer_capacity", int)?.unwrap_or(m.buffer_capacity);
        m.mobility = b
            .opt("mobility", |s| match s {
                "patrol" => Ok(MobilityMode::Patrol),
                "random" | "random_waypoint" => Ok(MobilityMode::RandomWaypoint),
                _ => Err(format!("unknown mobility `{s}`")),
            })?
            .unwrap_or(MobilityMode::Patrol);
        m.sdccs = b.opt("sdccs", |s| list(s, |x| int(x).map(SdccId)))?.unwrap_or_default();
        m.dpcs = b.opt("dpcs", |s| list(s, |x| int(x).map(DpcId)))?.unwrap_or_default();
        b.finish()?;
        maps.push(m);
    }

    let mut cdc = CdcDcc::default();
    {
        let b = of("cdc").next().expect("checked above");
        cdc.cdc_count = b.opt("count", int)?.unwrap_or(1);
        if cdc.cdc_count == 0 {
            return err(b.line_of("count"), "[cdc] count must be >= 1");
        }
        cdc.match_threshold = b.opt("match_threshold", unit)?.unwrap_or(cdc.match_threshold);
        if let Some(classes) = b.opt("bypass", |s| list(s, variant::<HazardClass>))? {
            cdc.bypass_classes = classes.into_iter().collect();
        }
        cdc.escalate_unmatched = b.opt("escalate_unmatched", boolean)?.unwrap_or(false);
        b.finish()?;
    }
    let known_area = |b: &Block, key: &str| -> Result<AreaId, ParseError> {
        let a = AreaId(b.req(key, int)?);
        if regions.iter().any(|r| r.id == a) {
            Ok(a)
        } else {
            err(b.line_of(key), format!("[{}] unknown area {a}", b.name))
        }
    };
    for b in of("provider") {
        let area = known_area(b, "area")?;
        let subscribers = b.req("subscribers", int)?;
        let batch_latency = b.opt("latency", non_neg)?.unwrap_or(1.0);
        let batch_size: u64 = b.opt("batch_size", int)?.unwrap_or(DEFAULT_SMS_BATCH);
        if batch_size == 0 {
            return err(b.line_of("batch_size"), "[provider] batch_size must be >= 1");
        }
        b.finish()?;
        cdc.providers.push(SmsProvider { area, subscribers, batch_latency, batch_size });
    }
    for b in of("reference") {
        let area = known_area(b, "area")?;
        cdc.reference_db.push(DisasterRecord {
            area,
            hazard_class: b.req("class", variant)?,
            feature_vector: b.req("features", features)?,
            occurred_time: b.opt("time", num)?.unwrap_or(0.0),
            outcome: b.opt("outcome", text)?.unwrap_or_default(),
        });
        b.finish()?;
    }
    for b in of("history") {
        let id = DpcId(b.req("dpc", int)?);
        let Some(d) = dpcs.iter_mut().find(|d| d.id == id) else {
            return err(b.line_of("dpc"), format!("[history] unknown dpc {id}"));
        };
        d.history.push(DisasterRecord {
            area: d.region,
            hazard_class: b.req("class", variant)?,
            feature_vector: b.req("features", features)?,
            occurred_time: b.opt("time", num)?.unwrap_or(0.0),
            outcome: b.opt("outcome", text)?.unwrap_or_default(),
        });
        b.finish()?;
    }
    for b in of("baseline") {
        let id = SdccId(b.req("sdcc", int)?);
        let Some(s) = sdccs.iter_mut().find(|s| s.id == id) else {
            return err(b.line_of("sdcc"), format!("[baseline] unknown sdcc {id}"));
        };
        let area = b.opt("area", int)?.map(AreaId).unwrap_or(s.region);
        if area != s.region {
            return err(b.line_of("area"), format!("[baseline] area {area} does not match sdcc {id} region {}", s.region));
        }
        s.baseline.push(BaselineRecord {
            area,
            category: b.req("category", variant)?,
            payload_bytes: b.req("bytes", int)?,
            description: b.opt("description", text)?.unwrap_or_default(),
        });
        b.finish()?;
    }

    let mut hazards: Vec<HazardEvent> = Vec::new();
    for b in of("hazard") {
        let id = HazardId(b.req("id", int)?);
        if hazards.iter().any(|h| h.id == id) {
            return err(b.line_of("id"), format!("duplicate hazard id {id}"));
        }
        let region = known_area(b, "region")?;
        let class = b.req("class", variant)?;
        let onset = b.req("onset", non_neg)?;
        let duration = b.opt("duration", non_neg)?;
        let magnitude = b.opt("magnitude", non_neg)?.unwrap_or(1.0);
        let fp = b.opt("footprint", footprint)?.unwrap_or(Footprint::All);
        b.finish()?;
        let in_region = sensors.iter().filter(|s| s.region == region);
        let footprint: BTreeSet<SensorId> = match fp {
            Footprint::All => in_region.map(|s| s.id).collect(),
            Footprint::Within(c, r) => in_region.filter(|s| crate::model::distance(s.position, c) <= r).map(|s| s.id).collect(),
            Footprint::Ids(ids) => {
                let members: BTreeMap<SensorId, AreaId> = sensors.iter().map(|s| (s.id, s.region)).collect();
                for i in &ids {
                    if members.get(&SensorId(*i)) != Some(&region) {
                        return err(b.line_of("footprint"), format!("[hazard] sensor {i} is not in region {region}"));
                    }
                }
                ids.into_iter().map(SensorId).collect()
            }
        };
        hazards.push(HazardEvent { id, class, onset, duration, region, magnitude, footprint });
    }

    let mut topology = Topology { regions, sensors, sdccs, maps, dpcs, cdc, delta };
    topology.finalize().map_err(|e| ParseError { line: 0, message: e.to_string() })?;
    Ok(Scenario { topology, hazards, settings })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const MINIMAL: &str = "\
[region]
id = 1

[sensor]
id = 1
region = 1
position = 0, 5

[sdcc]
id = 1
region = 1
position = 0, 0
tau = 1

[map]
id = 1
region = 1
route = 0, 0; 1000, 0

[dpc]
id = 1
region = 1
position = 1000, 0

[cdc]
count = 1
";

    #[test]
    fn minimal_file_loads() {
        let sc: Scenario = MINIMAL.parse().unwrap();
        assert_eq!(sc.topology.sensors.len(), 1);
        assert_eq!(sc.topology.sensors[0].assigned_sdcc, Some(SdccId(1)));
        assert_eq!(sc.topology.maps[0].route.len(), 2);
        assert_eq!(sc.settings.horizon, DEFAULT_HORIZON);
        assert_eq!(sc.topology.sdccs[0].window, 10.0);
    }

    #[test]
    fn missing_section_is_named() {
        let text = MINIMAL.replace("[dpc]\nid = 1\nregion = 1\nposition = 1000, 0\n", "");
        let e = parse_scenario_str(&text).unwrap_err();
        assert!(e.message.contains("[dpc]"), "{e}");
    }

    #[test]
    fn zero_tau_is_a_schema_error() {
        let e = parse_scenario_str(&MINIMAL.replace("tau = 1", "tau = 0")).unwrap_err();
        assert_eq!(e.line, 13);
        assert!(e.message.contains("tau"));
    }

    #[test]
    fn unknown_key_has_line() {
        let e = parse_scenario_str(&MINIMAL.replace("count = 1", "count = 1\ncolour = red")).unwrap_err();
        assert_eq!(e.line, MINIMAL.lines().count() + 1);
        assert!(e.message.contains("colour"));
    }

    #[test]
    fn unknown_section_and_garbage() {
        assert!(parse_scenario_str(&format!("{MINIMAL}\n[weather]\n")).unwrap_err().message.contains("weather"));
        assert_eq!(parse_scenario_str("x = 1").unwrap_err().line, 1);
        assert!(parse_scenario_str("[region\n").is_err());
        assert!(parse_scenario_str(&MINIMAL.replace("position = 0, 5", "position = 0")).is_err());
        assert!(parse_scenario_str(&MINIMAL.replace("position = 0, 5", "position = nan, 1")).is_err());
    }

    #[test]
    fn bulk_sensors_and_hazard_footprints() {
        let text = format!(
            "{}\n[hazard]\nid = 1\nclass = earthquake\nregion = 1\nonset = 30\nfootprint = within 0, 5, 12\n",
            MINIMAL.replace("position = 0, 5", "position = 0, 5\ncount = 10\nstep = 5, 0")
        );
        let sc: Scenario = text.parse().unwrap();
        assert_eq!(sc.topology.sensors.len(), 10);
        assert_eq!(sc.topology.sensors[9].position, GeoPoint::new(45.0, 5.0));
        assert_eq!(sc.hazards[0].footprint.len(), 3);
        assert_eq!(sc.hazards[0].class, HazardClass::Earthquake);
    }

    #[test]
    fn footprint_outside_region_rejected() {
        let text = format!("{MINIMAL}\n[hazard]\nid = 1\nclass = flood\nregion = 1\nonset = 0\nfootprint = 1, 9\n");
        assert!(parse_scenario_str(&text).unwrap_err().message.contains("sensor 9"));
    }

    #[test]
    fn references_and_baseline() {
        let text = format!(
            "{MINIMAL}\n[reference]\narea = 1\nclass = flood\nfeatures = 1, 1, 1, 1\n\n[baseline]\nsdcc = 1\ncategory = health\nbytes = 500\n"
        );
        let sc: Scenario = text.parse().unwrap();
        assert_eq!(sc.topology.cdc.reference_db.len(), 1);
        assert_eq!(sc.topology.sdccs[0].baseline[0].payload_bytes, 500);
        let bad = text.replace("features = 1, 1, 1, 1", "features = 1, 1");
        assert!(parse_scenario_str(&bad).is_err());
    }
}
