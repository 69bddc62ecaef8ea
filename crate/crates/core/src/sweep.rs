//! Parameter sweeps: one scenario, a list of values for one knob, several
//! replications per value.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::engine::{run, EngineError, MetricsRow};
use crate::model::{DpcId, LinkStandard, MapId};
use crate::scenario::Scenario;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Tau,
    MapCount,
    LinkStandard,
    MatchThreshold,
    DpcCount,
}

impl SweepParam {
    pub const ALL: [SweepParam; 5] =
        [SweepParam::Tau, SweepParam::MapCount, SweepParam::LinkStandard, SweepParam::MatchThreshold, SweepParam::DpcCount];

    pub fn as_str(&self) -> &'static str {
        match self {
            SweepParam::Tau => "tau",
            SweepParam::MapCount => "map_count",
            SweepParam::LinkStandard => "link_standard",
            SweepParam::MatchThreshold => "match_threshold",
            SweepParam::DpcCount => "dpc_count",
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepParam {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SweepParam::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown sweep parameter `{s}` (expected one of tau, map_count, link_standard, match_threshold, dpc_count)"))
    }
}

/// Returns a copy of `base` with `param` set to `value` everywhere it
/// applies. Counts grow by cloning the lowest-id entity of a region and
/// shrink by dropping the highest ids.
pub fn apply(base: &Scenario, param: SweepParam, value: &str) -> Result<Scenario, String> {
    let mut sc = base.clone();
    let topo = &mut sc.topology;
    let count = || value.parse::<usize>().map_err(|_| format!("`{value}` is not a count"));
    match param {
        SweepParam::Tau => {
            let tau: u32 = value.parse().map_err(|_| format!("`{value}` is not a valid tau"))?;
            if tau == 0 {
                return Err("tau must be >= 1".into());
            }
            topo.sdccs.iter_mut().for_each(|s| s.tau = tau);
        }
        SweepParam::MatchThreshold => {
            let v: f64 = value.parse().map_err(|_| format!("`{value}` is not a number"))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("match threshold {v} is outside [0, 1]"));
            }
            topo.cdc.match_threshold = v;
        }
        SweepParam::LinkStandard => {
            let l: LinkStandard = value.parse().map_err(|e| format!("{e}"))?;
            topo.regions.iter_mut().for_each(|r| r.link = l);
            topo.sdccs.iter_mut().for_each(|s| s.link = l);
            topo.dpcs.iter_mut().for_each(|d| d.link = l);
            topo.maps.iter_mut().for_each(|m| m.link = l);
        }
        SweepParam::MapCount => {
            let n = count()?;
            for region in topo.region_ids().collect::<Vec<_>>() {
                let mut ids: Vec<MapId> = topo.maps_in(region).map(|m| m.id).collect();
                ids.sort();
                if ids.len() > n {
                    let drop = &ids[n..];
                    topo.maps.retain(|m| !drop.contains(&m.id));
                } else if let Some(first) = ids.first() {
                    let template = topo.map(*first).cloned().expect("listed");
                    for _ in ids.len()..n {
                        let mut m = template.clone();
                        m.id = MapId(topo.maps.iter().map(|m| m.id.0).max().unwrap_or(0) + 1);
                        topo.maps.push(m);
                    }
                } else if n > 0 {
                    return Err(format!("region {region} has no MAP to clone"));
                }
            }
        }
        SweepParam::DpcCount => {
            let n = count()?;
            if n == 0 {
                return Err("dpc_count must be >= 1".into());
            }
            for region in topo.region_ids().collect::<Vec<_>>() {
                let mut ids: Vec<DpcId> = topo.dpcs_in(region).map(|d| d.id).collect();
                ids.sort();
                if ids.len() > n {
                    let drop = ids[n..].to_vec();
                    topo.dpcs.retain(|d| !drop.contains(&d.id));
                    topo.maps.iter_mut().for_each(|m| m.dpcs.retain(|d| !drop.contains(d)));
                } else if let Some(first) = ids.first() {
                    let template = topo.dpc(*first).cloned().expect("listed");
                    for _ in ids.len()..n {
                        let mut d = template.clone();
                        d.id = DpcId(topo.dpcs.iter().map(|d| d.id.0).max().unwrap_or(0) + 1);
                        topo.dpcs.push(d);
                    }
                }
            }
            // peer lists are rebuilt for the new membership
            topo.dpcs.iter_mut().for_each(|d| d.peers.clear());
        }
    }
    topo.finalize().map_err(|e| e.to_string())?;
    Ok(sc)
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub param: SweepParam,
    pub values: Vec<String>,
    pub reps: u32,
    pub base_seed: u64,
    pub horizon: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Skipped {
    pub value: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct SweepOutcome {
    pub rows: Vec<MetricsRow>,
    pub skipped: Vec<Skipped>,
}

/// Runs every (value, replication) pair in parallel. Replication `r` uses
/// seed `base_seed + r`, so rows do not depend on thread scheduling.
/// Values that do not apply or fail validation are skipped, not fatal.
pub fn run_sweep(base: &Scenario, spec: &SweepSpec) -> SweepOutcome {
    let mut out = SweepOutcome::default();
    let mut points: Vec<(String, Scenario)> = Vec::new();
    for v in &spec.values {
        match apply(base, spec.param, v) {
            Ok(sc) => points.push((v.clone(), sc)),
            Err(reason) => out.skipped.push(Skipped { value: v.clone(), reason }),
        }
    }
    let jobs: Vec<(usize, u32)> = (0..points.len()).flat_map(|p| (0..spec.reps).map(move |r| (p, r))).collect();
    let results: Vec<(usize, u32, Result<MetricsRow, EngineError>)> = jobs
        .par_iter()
        .map(|&(p, rep)| {
            let seed = spec.base_seed.wrapping_add(u64::from(rep));
            let res = run(&points[p].1, seed, spec.horizon).map(|r| {
                let mut row = MetricsRow::new(&r.metrics, &r.digest);
                row.param = Some(spec.param.to_string());
                row.value = Some(points[p].0.clone());
                row.rep = Some(rep);
                row
            });
            (p, rep, res)
        })
        .collect();
    let mut failed: Vec<usize> = Vec::new();
    for (p, _, res) in results {
        match res {
            Ok(row) => out.rows.push(row),
            Err(e) => {
                if !failed.contains(&p) {
                    failed.push(p);
                    out.skipped.push(Skipped { value: points[p].0.clone(), reason: e.to_string() });
                }
            }
        }
    }
    let bad: Vec<&str> = failed.iter().map(|p| points[*p].0.as_str()).collect();
    out.rows.retain(|r| !bad.contains(&r.value.as_deref().unwrap_or_default()));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = include_str!("../../../scenarios/basic.ini");

    fn base() -> Scenario {
        BASE.parse().unwrap()
    }

    #[test]
    fn params_parse() {
        for p in SweepParam::ALL {
            assert_eq!(p.as_str().parse::<SweepParam>().unwrap(), p);
        }
        assert!("speed".parse::<SweepParam>().is_err());
    }

    #[test]
    fn counts_grow_and_shrink() {
        let sc = apply(&base(), SweepParam::MapCount, "3").unwrap();
        assert_eq!(sc.topology.maps.len(), 3);
        let ids: Vec<u32> = sc.topology.maps.iter().map(|m| m.id.0).collect();
        assert_eq!(ids, [1, 2, 3]);
        assert_eq!(apply(&sc, SweepParam::MapCount, "1").unwrap().topology.maps.len(), 1);
        let sc = apply(&base(), SweepParam::DpcCount, "3").unwrap();
        assert_eq!(sc.topology.dpcs.len(), 3);
        assert_eq!(sc.topology.dpcs[0].peers, [DpcId(2), DpcId(3)]);
        assert!(apply(&base(), SweepParam::Tau, "0").is_err());
        assert!(apply(&base(), SweepParam::LinkStandard, "802.11n").is_err());
    }

    #[test]
    fn invalid_points_are_skipped_and_rows_are_ordered() {
        let spec = SweepSpec {
            param: SweepParam::Tau,
            values: vec!["1".into(), "50".into(), "5".into()],
            reps: 3,
            base_seed: 10,
            horizon: 400.0,
        };
        let out = run_sweep(&base(), &spec);
        assert_eq!(out.skipped.len(), 1);
        assert_eq!(out.skipped[0].value, "50");
        let keys: Vec<(String, u32, u64)> =
            out.rows.iter().map(|r| (r.value.clone().unwrap(), r.rep.unwrap(), r.seed)).collect();
        assert_eq!(
            keys,
            [("1".into(), 0, 10), ("1".into(), 1, 11), ("1".into(), 2, 12), ("5".into(), 0, 10), ("5".into(), 1, 11), ("5".into(), 2, 12)]
        );
        let again = run_sweep(&base(), &spec);
        assert_eq!(again.rows, out.rows);
    }
}
