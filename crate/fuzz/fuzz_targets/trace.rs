#![no_main]

use dmcis::engine::{collect_metrics, Trace};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(trace) = Trace::parse(text) {
            let again = Trace::parse(&trace.to_jsonl()).expect("re-serialised trace parses");
            assert_eq!(again.digest(), trace.digest());
            let _ = collect_metrics(&trace);
        }
    }
});
