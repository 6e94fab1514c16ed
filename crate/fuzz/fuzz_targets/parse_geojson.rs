#![no_main]

use gridstream::stream::parse_point;
use gridstream::Format;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(line) = std::str::from_utf8(data) {
        if let Ok(p) = parse_point(line, Format::GeoJson) {
            assert!(p.x.is_finite() && p.y.is_finite());
        }
    }
});
