#![no_main]

use gridstream::bench::{sweep_plan, BenchParams, SweepSpec};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(spec) = s.parse::<SweepSpec>() {
        assert!(!spec.values.is_empty());
        let _ = sweep_plan(&spec, &BenchParams::default(), 1);
    }
});
