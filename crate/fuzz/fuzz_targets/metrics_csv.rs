#![no_main]

use dmcis::engine::metrics::{aggregate, read_metrics_csv, write_aggregate_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(rows) = read_metrics_csv(text) {
            let _ = write_aggregate_csv(&aggregate(&rows));
        }
    }
});
