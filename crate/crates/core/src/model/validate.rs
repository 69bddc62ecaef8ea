use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::Serialize;

use super::{distance, AreaId, DpcId, LinkSpec, SdccId, Topology};
use crate::sensing::nearest_sdcc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Severity {
    Warning,
    Error,
}

/// Which structural condition a finding refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Rule {
    /// Sensor threshold vs. live sensor count.
    Eq1,
    /// MAP count vs. SDCC and DPC counts.
    Eq2,
    /// DPC count vs. CDC count.
    Eq3,
    /// A MAP path misses its endpoints.
    Route,
    /// An SDCC no MAP can carry data from.
    Coverage,
    /// MAP radio on a different band from an endpoint.
    Band,
    /// DPC peer graph is disconnected.
    Peers,
    /// Missing or dangling entities.
    Structure,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Rule::Eq1 => "Eq1",
            Rule::Eq2 => "Eq2",
            Rule::Eq3 => "Eq3",
            Rule::Route => "Route",
            Rule::Coverage => "Coverage",
            Rule::Band => "Band",
            Rule::Peers => "Peers",
            Rule::Structure => "Structure",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Finding {
    pub severity: Severity,
    pub rule: Rule,
    pub region: Option<AreaId>,
    pub message: String,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Error => "ERROR",
            Severity::Warning => "WARNING",
        };
        match self.region {
            Some(r) => write!(f, "{sev}({}) region {r}: {}", self.rule, self.message),
            None => write!(f, "{sev}({}): {}", self.rule, self.message),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        !self.findings.iter().any(|f| f.severity == Severity::Error)
    }

    pub fn errors(&self) -> impl Iterator<Item = &Finding> {
        self.findings.iter().filter(|f| f.severity == Severity::Error)
    }

    pub fn warnings(&self) -> impl Iterator<Item = &Finding> {
        self.findings.iter().filter(|f| f.severity == Severity::Warning)
    }

    pub fn has(&self, severity: Severity, rule: Rule) -> bool {
        self.findings.iter().any(|f| f.severity == severity && f.rule == rule)
    }

    fn push(&mut self, severity: Severity, rule: Rule, region: Option<AreaId>, message: String) {
        self.findings.push(Finding { severity, rule, region, message });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for finding in &self.findings {
            writeln!(f, "{finding}")?;
        }
        let errors = self.errors().count();
        let warnings = self.warnings().count();
        if self.is_valid() {
            write!(f, "valid ({warnings} warning(s))")
        } else {
            write!(f, "invalid ({errors} error(s), {warnings} warning(s))")
        }
    }
}

/// Every (SDCC, DPC) pair of a region that can skip the MAP tier: same
/// position, or strictly closer than `delta`.
pub fn collapse_pairs(topo: &Topology) -> Vec<(SdccId, DpcId)> {
    let mut out = Vec::new();
    for s in &topo.sdccs {
        for d in topo.dpcs.iter().filter(|d| d.region == s.region) {
            if s.position == d.position || distance(s.position, d.position) < topo.delta {
                out.push((s.id, d.id));
            }
        }
    }
    out
}

/// Checks the structural conditions of a topology. Never stops early: the
/// report collects every finding.
pub fn validate_topology(topo: &Topology) -> ValidationReport {
    let mut report = ValidationReport::default();
    let pairs = collapse_pairs(topo);
    let collapsed_sdccs: BTreeSet<SdccId> = pairs.iter().map(|p| p.0).collect();
    let collapsed_dpcs: BTreeSet<DpcId> = pairs.iter().map(|p| p.1).collect();

    if topo.delta < 0.0 || !topo.delta.is_finite() {
        report.push(Severity::Error, Rule::Structure, None, format!("delta must be >= 0, got {}", topo.delta));
    }

    for region in topo.region_ids() {
        let at = Some(region);
        let sdccs: Vec<_> = topo.sdccs_in(region).collect();
        let dpcs: Vec<_> = topo.dpcs_in(region).collect();
        let maps: Vec<_> = topo.maps_in(region).collect();
        let sensors: Vec<_> = topo.sensors_in(region).collect();

        if sdccs.is_empty() {
            report.push(Severity::Error, Rule::Structure, at, "no SDCC".into());
        }
        if dpcs.is_empty() {
            report.push(Severity::Error, Rule::Structure, at, "no DPC".into());
        }

        // Threshold vs. live sensors clustered onto each SDCC.
        let mut live: BTreeMap<SdccId, u32> = sdccs.iter().map(|s| (s.id, 0)).collect();
        for s in sensors.iter().filter(|s| s.is_live_at(0.0)) {
            if let Some(r) = nearest_sdcc(s, sdccs.iter().copied()) {
                *live.entry(r).or_default() += 1;
            }
        }
        let total_live: u32 = live.values().sum();
        if !sensors.is_empty() && total_live < 2 {
            report.push(
                Severity::Warning,
                Rule::Eq1,
                at,
                format!("only {total_live} live sensor(s); the sensor sum should be much greater than 1"),
            );
        }
        for s in &sdccs {
            let n = live[&s.id];
            if s.tau > n {
                report.push(
                    Severity::Error,
                    Rule::Eq1,
                    at,
                    format!("SDCC {}: tau={} exceeds {} live assigned sensor(s)", s.id, s.tau, n),
                );
            }
        }

        // MAP count vs. SDCCs and DPCs still needing the MAP tier.
        let j = maps.len();
        let r = sdccs.iter().filter(|s| !collapsed_sdccs.contains(&s.id)).count();
        let t = dpcs.iter().filter(|d| !collapsed_dpcs.contains(&d.id)).count();
        if j < r {
            report.push(Severity::Error, Rule::Eq2, at, format!("J={j} MAP(s) < R={r} non-collapsed SDCC(s)"));
        }
        if j < t {
            report.push(Severity::Error, Rule::Eq2, at, format!("J={j} MAP(s) < T={t} non-collapsed DPC(s)"));
        }

        // Routes, radios and dangling references.
        let mut carried: BTreeSet<SdccId> = BTreeSet::new();
        for m in &maps {
            if m.route.is_empty() {
                report.push(Severity::Error, Rule::Route, at, format!("MAP {}: empty route", m.id));
                continue;
            }
            for id in &m.sdccs {
                if !sdccs.iter().any(|s| s.id == *id) {
                    report.push(Severity::Error, Rule::Structure, at, format!("MAP {}: unknown SDCC {id}", m.id));
                }
            }
            for id in &m.dpcs {
                if !dpcs.iter().any(|d| d.id == *id) {
                    report.push(Severity::Error, Rule::Structure, at, format!("MAP {}: unknown DPC {id}", m.id));
                }
            }
            let served_s = topo.served_sdccs(m);
            if served_s.is_empty() {
                continue;
            }
            let served_d = topo.served_dpcs(m);
            let visited_s: Vec<SdccId> = served_s
                .iter()
                .copied()
                .filter(|id| topo.sdcc(*id).is_some_and(|s| m.route_visits(s.position)))
                .collect();
            let visits_dpc = served_d.iter().any(|id| topo.dpc(*id).is_some_and(|d| m.route_visits(d.position)));
            if visited_s.is_empty() || !visits_dpc {
                let missing = match (visited_s.is_empty(), visits_dpc) {
                    (true, false) => "any of its SDCCs or DPCs",
                    (true, true) => "any of its SDCCs",
                    _ => "any of its DPCs",
                };
                report.push(Severity::Error, Rule::Route, at, format!("MAP {}: route never reaches {missing}", m.id));
            } else {
                carried.extend(visited_s);
            }
            let radio = LinkSpec::of(m.link);
            let mismatched = served_s
                .iter()
                .filter_map(|id| topo.sdcc(*id).map(|s| s.link))
                .chain(served_d.iter().filter_map(|id| topo.dpc(*id).map(|d| d.link)))
                .any(|l| !radio.compatible(&LinkSpec::of(l)));
            if mismatched {
                report.push(
                    Severity::Error,
                    Rule::Band,
                    at,
                    format!("MAP {}: {} radio cannot reach every endpoint it serves", m.id, m.link),
                );
            }
        }
        for s in sdccs.iter().filter(|s| !collapsed_sdccs.contains(&s.id)) {
            if !carried.contains(&s.id) {
                report.push(Severity::Error, Rule::Coverage, at, format!("SDCC {}: no MAP route links it to a DPC", s.id));
            }
        }

        // Peer graph connectivity (links treated as undirected).
        if dpcs.len() > 1 {
            let ids: BTreeSet<DpcId> = dpcs.iter().map(|d| d.id).collect();
            let mut adj: BTreeMap<DpcId, BTreeSet<DpcId>> = ids.iter().map(|d| (*d, BTreeSet::new())).collect();
            for d in &dpcs {
                for p in &d.peers {
                    if !ids.contains(p) {
                        report.push(Severity::Error, Rule::Structure, at, format!("DPC {}: unknown peer {p}", d.id));
                        continue;
                    }
                    adj.get_mut(&d.id).unwrap().insert(*p);
                    adj.get_mut(p).unwrap().insert(d.id);
                }
            }
            let start = *ids.iter().next().unwrap();
            let mut seen = BTreeSet::from([start]);
            let mut queue = VecDeque::from([start]);
            while let Some(n) = queue.pop_front() {
                for m in &adj[&n] {
                    if seen.insert(*m) {
                        queue.push_back(*m);
                    }
                }
            }
            if seen.len() != ids.len() {
                report.push(Severity::Error, Rule::Peers, at, "DPC peer links do not connect every DPC".into());
            }
        }
    }

    let total_dpcs = topo.dpcs.len() as u64;
    let c = topo.cdc.cdc_count as u64;
    if c == 0 {
        report.push(Severity::Error, Rule::Structure, None, "cdc count must be >= 1".into());
    }
    if total_dpcs <= c {
        report.push(
            Severity::Warning,
            Rule::Eq3,
            None,
            format!("{total_dpcs} DPC(s) in total is not much greater than c={c} CDC(s)"),
        );
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CdcDcc, Dpc, GeoPoint, MapUnit, Region, Sdcc, SensorNode};
    use proptest::prelude::*;

    fn base(n_sensors: u32, tau: u32) -> Topology {
        let mut t = Topology {
            regions: vec![Region { id: AreaId(1), link: crate::model::LinkStandard::G }],
            sensors: (1..=n_sensors).map(|i| SensorNode::new(i, 1, GeoPoint::new(i as f64, 10.0))).collect(),
            sdccs: vec![Sdcc::new(1, 1, GeoPoint::new(0.0, 0.0), tau)],
            maps: vec![
                MapUnit::new(1, 1, vec![GeoPoint::new(0.0, 0.0), GeoPoint::new(1000.0, 0.0)]),
                MapUnit::new(2, 1, vec![GeoPoint::new(0.0, 0.0), GeoPoint::new(1000.0, 0.0)]),
            ],
            dpcs: vec![Dpc::new(1, 1, GeoPoint::new(1000.0, 0.0))],
            cdc: CdcDcc::default(),
            delta: 100.0,
        };
        t.finalize().unwrap();
        t
    }

    #[test]
    fn valid_small_region() {
        let t = base(10, 5);
        let r = validate_topology(&t);
        assert!(r.is_valid(), "{r}");
        // one DPC against one CDC
        assert!(r.has(Severity::Warning, Rule::Eq3));
    }

    #[test]
    fn tau_above_sensor_count() {
        let r = validate_topology(&base(10, 11));
        assert!(r.has(Severity::Error, Rule::Eq1));
        assert!(!r.is_valid());
    }

    #[test]
    fn failed_sensors_do_not_count() {
        let mut t = base(10, 10);
        t.sensors[3].failed = true;
        assert!(validate_topology(&t).has(Severity::Error, Rule::Eq1));
        // failure later in the run is not visible at load time
        t.sensors[3].failed = false;
        t.sensors[3].fail_at = Some(50.0);
        assert!(validate_topology(&t).is_valid());
    }

    #[test]
    fn too_few_maps() {
        let mut t = base(10, 1);
        t.maps.truncate(1);
        t.sdccs.push(Sdcc::new(2, 1, GeoPoint::new(500.0, 0.0), 1));
        t.finalize().unwrap();
        let r = validate_topology(&t);
        assert!(r.has(Severity::Error, Rule::Eq2), "{r}");
    }

    #[test]
    fn collapsed_pairs_need_no_maps() {
        let mut t = base(10, 1);
        t.maps.clear();
        t.dpcs[0].position = GeoPoint::new(0.0, 50.0);
        t.finalize().unwrap();
        let r = validate_topology(&t);
        assert!(r.is_valid(), "{r}");
    }

    #[test]
    fn collapse_examples() {
        let mut t = base(1, 1);
        t.dpcs[0].position = GeoPoint::new(0.0, 50.0);
        assert_eq!(collapse_pairs(&t), vec![(SdccId(1), DpcId(1))]);
        t.dpcs[0].position = GeoPoint::new(0.0, 100.0);
        assert!(collapse_pairs(&t).is_empty(), "boundary is exclusive");
        t.delta = 0.0;
        t.dpcs[0].position = GeoPoint::new(0.0, 1.0);
        assert!(collapse_pairs(&t).is_empty());
        t.dpcs[0].position = GeoPoint::new(0.0, 0.0);
        assert_eq!(collapse_pairs(&t).len(), 1, "identical position always collapses");
    }

    #[test]
    fn route_missing_dpc() {
        let mut t = base(10, 1);
        for m in &mut t.maps {
            m.route = vec![GeoPoint::new(0.0, 0.0), GeoPoint::new(100.0, 0.0)];
        }
        let r = validate_topology(&t);
        assert!(r.has(Severity::Error, Rule::Route));
        assert!(r.has(Severity::Error, Rule::Coverage));
    }

    #[test]
    fn band_mismatch() {
        let mut t = base(10, 1);
        t.maps[0].link = crate::model::LinkStandard::A;
        assert!(validate_topology(&t).has(Severity::Error, Rule::Band));
    }

    #[test]
    fn disconnected_peers() {
        let mut t = base(10, 1);
        t.dpcs.push(Dpc::new(2, 1, GeoPoint::new(1000.0, 0.0)));
        t.dpcs.push(Dpc::new(3, 1, GeoPoint::new(1000.0, 0.0)));
        t.dpcs[0].peers = vec![DpcId(2)];
        t.dpcs[1].peers = vec![DpcId(1)];
        t.dpcs[2].peers = vec![DpcId(3)];
        t.maps.push(MapUnit::new(3, 1, t.maps[0].route.clone()));
        assert!(validate_topology(&t).has(Severity::Error, Rule::Peers));
    }

    #[test]
    fn report_text() {
        let r = validate_topology(&base(10, 11));
        let text = r.to_string();
        assert!(text.contains("ERROR(Eq1) region 1: SDCC 1: tau=11 exceeds 10 live assigned sensor(s)"), "{text}");
        assert!(text.contains("WARNING(Eq3)"));
    }

    proptest! {
        #[test]
        fn validation_is_pure_and_collapse_idempotent(dx in 0.0..300.0f64, delta in 0.0..300.0f64, tau in 1u32..14) {
            let mut t = base(10, tau);
            t.delta = delta;
            t.dpcs[0].position = GeoPoint::new(dx, 0.0);
            t.finalize().unwrap();
            prop_assert_eq!(validate_topology(&t), validate_topology(&t));
            let pairs = collapse_pairs(&t);
            for (s, d) in &pairs {
                let sp = t.sdcc(*s).unwrap().position;
                let dp = t.dpc(*d).unwrap().position;
                prop_assert!(sp == dp || distance(sp, dp) < t.delta);
            }
            t.finalize().unwrap();
            prop_assert_eq!(collapse_pairs(&t), pairs);
        }

        #[test]
        fn adding_a_map_keeps_validity(n_sdcc in 1u32..4, extra in 0usize..3) {
            let mut t = base(12, 1);
            t.sdccs = (1..=n_sdcc).map(|i| Sdcc::new(i, 1, GeoPoint::new(200.0 * i as f64, 0.0), 1)).collect();
            t.sensors = (1..=3 * n_sdcc)
                .map(|i| SensorNode::new(i, 1, GeoPoint::new(200.0 * i.div_ceil(3) as f64, 10.0)))
                .collect();
            t.maps = (1..=n_sdcc + extra as u32)
                .map(|j| MapUnit::new(j, 1, vec![GeoPoint::new(0.0, 0.0), GeoPoint::new(1000.0, 0.0)]))
                .collect();
            t.finalize().unwrap();
            let before = validate_topology(&t);
            prop_assert!(before.is_valid(), "{}", before);
            let mut more = t.maps[0].clone();
            more.id = crate::model::MapId(100);
            t.maps.push(more);
            prop_assert!(validate_topology(&t).is_valid());
        }
    }
}
