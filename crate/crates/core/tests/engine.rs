use dmcis::engine::trace::{Trace, TraceEvent};
use dmcis::engine::{collect_metrics, run, EngineError};
use dmcis::mule::Holder;
use dmcis::Scenario;
use proptest::prelude::*;

/// Two regions: region 1 muled by a patrol MAP and a random-waypoint MAP
/// with a small buffer, region 2 collapsed. Noisy sensors everywhere.
fn busy(noise: f64, buffer: u64, tau: u32) -> String {
    format!(
        "[simulation]\ndelta = 20\n\
         [region]\nid = 1\n[region]\nid = 2\nlink = 802.11a\n\
         [sensor]\nid = 1\nregion = 1\nposition = -10, 5\ncount = 6\nstep = 4, 0\nfalse_report_prob = {noise}\n\
         [sensor]\nid = 20\nregion = 1\nposition = 400, 5\ncount = 6\nstep = 4, 0\nfalse_report_prob = {noise}\n\
         [sensor]\nid = 40\nregion = 2\nposition = 5000, 5\ncount = 6\nstep = 1, 0\nfalse_report_prob = {noise}\n\
         [sdcc]\nid = 1\nregion = 1\nposition = 0, 0\ntau = {tau}\nwatch = earthquake\n\
         [sdcc]\nid = 2\nregion = 1\nposition = 400, 0\ntau = {tau}\n\
         [sdcc]\nid = 3\nregion = 2\nposition = 5000, 0\ntau = {tau}\n\
         [map]\nid = 1\nregion = 1\nroute = 0, 0; 400, 0; 800, 0\nspeed = 20\n\
         [map]\nid = 2\nregion = 1\nroute = 0, 0; 400, 0; 800, 0\nspeed = 15\nmobility = random\nbuffer_capacity = {buffer}\n\
         [dpc]\nid = 1\nregion = 1\nposition = 800, 0\nservice_time = 3\nconfidence_threshold = 0.5\n\
         [dpc]\nid = 2\nregion = 1\nposition = 800, 0\nservice_time = 3\nconfidence_threshold = 0.5\n\
         [dpc]\nid = 3\nregion = 2\nposition = 5000, 0\n\
         [cdc]\nescalate_unmatched = true\n\
         [provider]\narea = 1\nsubscribers = 5\n\
         [hazard]\nid = 1\nclass = earthquake\nregion = 1\nonset = 100\nduration = 30\nfootprint = within 0, 0, 40\n\
         [hazard]\nid = 2\nclass = flood\nregion = 1\nonset = 700\nduration = 30\nfootprint = 20, 21, 22, 23\n\
         [hazard]\nid = 3\nclass = flood\nregion = 2\nonset = 50\n"
    )
}

fn scenario(text: &str) -> Scenario {
    text.parse().unwrap()
}

fn check_invariants(trace: &Trace) -> Result<(), TestCaseError> {
    let mut last_t = f64::NEG_INFINITY;
    for r in &trace.records {
        prop_assert!(r.t >= last_t, "time went backwards at seq {}", r.seq);
        last_t = r.t;
        if let Some(c) = r.cause {
            prop_assert!(c < r.seq);
        }
    }
    let end = trace.records.last().unwrap();
    let TraceEvent::End { created, delivered, in_flight, buffered, deferred } = end.event else {
        return Err(TestCaseError::fail("no end record"));
    };
    prop_assert_eq!(created, delivered + in_flight + buffered + deferred);
    // every warning descends from a trigger through a delivery
    for r in &trace.records {
        if let TraceEvent::Warning { .. } = r.event {
            let kinds: Vec<&str> = trace.ancestry(r.seq).iter().map(|x| x.event.kind()).collect();
            for k in ["request", "match", "cdc_arrival", "forward", "verdict", "assign", "delivery", "bundle", "trigger"] {
                prop_assert!(kinds.contains(&k), "warning ancestry lacks {}: {:?}", k, kinds);
            }
        }
    }
    Ok(())
}

#[test]
fn horizon_zero_is_empty() {
    let r = run(&scenario(&busy(0.0, 1 << 20, 3)), 1, 0.0).unwrap();
    assert!(r.trace.is_empty());
    assert_eq!(r.jsonl, "");
    assert_eq!(r.metrics.delivery_ratio, 0.0);
}

#[test]
fn invalid_scenarios_are_refused() {
    let sc = scenario(&busy(0.0, 1 << 20, 7));
    assert!(matches!(run(&sc, 1, 100.0), Err(EngineError::Invalid(_))));
    assert!(matches!(run(&scenario(&busy(0.0, 1 << 20, 3)), 1, f64::NAN), Err(EngineError::Horizon(_))));
}

#[test]
fn tiny_buffer_defers_and_still_conserves() {
    let r = run(&scenario(&busy(0.3, 100, 2)), 4, 3000.0).unwrap();
    assert!(r.trace.records.iter().any(|x| x.event.kind() == "deferred"));
    check_invariants(&r.trace).unwrap();
}

#[test]
fn urgent_class_bypasses_once_per_bundle() {
    let r = run(&scenario(&busy(0.0, 1 << 20, 3)), 1, 3000.0).unwrap();
    let bypass: Vec<_> = r
        .trace
        .records
        .iter()
        .filter_map(|x| match x.event {
            TraceEvent::Dispatch { bypass: true, bundle, .. } => bundle,
            _ => None,
        })
        .collect();
    assert!(!bypass.is_empty());
    let mut unique = bypass.clone();
    unique.dedup();
    assert_eq!(unique, bypass);
}

#[test]
fn jsonl_round_trip_reproduces_metrics() {
    let r = run(&scenario(&busy(0.2, 1 << 20, 3)), 9, 2000.0).unwrap();
    let parsed = Trace::parse(&r.jsonl).unwrap();
    assert_eq!(parsed, r.trace);
    assert_eq!(collect_metrics(&parsed), r.metrics);
    assert_eq!(parsed.digest(), r.digest);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn runs_are_reproducible_and_conserve_bundles(seed in 0u64..10_000, noise in 0.0..0.4f64, tau in 1u32..5, small in any::<bool>()) {
        let buffer = if small { 700 } else { 1 << 20 };
        let sc = scenario(&busy(noise, buffer, tau));
        let a = run(&sc, seed, 1500.0).unwrap();
        let b = run(&sc, seed, 1500.0).unwrap();
        prop_assert_eq!(&a.digest, &b.digest);
        check_invariants(&a.trace)?;
        for f in &a.bundles {
            prop_assert!(f.bundle.custody_shape_ok(f.direct));
            if let Holder::Dpc(_) = f.bundle.holder() {
                prop_assert_eq!(f.bundle.custody.len(), if f.direct { 2 } else { 3 });
            }
        }
        prop_assert!((0.0..=1.0).contains(&a.metrics.map_utilization));
        prop_assert!((0.0..=1.0).contains(&a.metrics.delivery_ratio));
    }

    #[test]
    fn longer_horizon_extends_the_trace(seed in 0u64..1000) {
        // everything before the shorter horizon is the same run
        let sc = scenario(&busy(0.1, 1 << 20, 3));
        let short = run(&sc, seed, 400.0).unwrap();
        let long = run(&sc, seed, 800.0).unwrap();
        let strip = |t: &Trace, cut: f64| -> Vec<String> {
            t.records
                .iter()
                .filter(|r| r.t < cut && !matches!(r.event, TraceEvent::Start { .. } | TraceEvent::End { .. } | TraceEvent::SessionClose { .. } | TraceEvent::Transfer { complete: false, .. }))
                .map(|r| format!("{} {:?}", r.t, r.event))
                .collect()
        };
        prop_assert_eq!(strip(&short.trace, 400.0), strip(&long.trace, 400.0));
    }
}

