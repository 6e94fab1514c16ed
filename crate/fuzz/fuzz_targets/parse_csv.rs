#![no_main]

use gridstream::stream::{format_datetime, parse_point, parse_timestamp};
use gridstream::Format;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(line) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(p) = parse_point(line, Format::Csv) {
        assert!(p.x.is_finite() && p.y.is_finite());
        let text = format_datetime(p.event_time);
        assert_eq!(parse_timestamp(&text).ok(), Some(p.event_time));
    }
});
