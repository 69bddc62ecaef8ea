#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(sc) = dmcis::parse_scenario_str(text) {
            let _ = dmcis::model::validate_topology(&sc.topology);
        }
    }
});
