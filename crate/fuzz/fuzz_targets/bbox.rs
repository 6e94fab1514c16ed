#![no_main]

use gridstream::{BBox, Grid};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(b) = s.parse::<BBox>() {
        assert!(b.width() > 0.0 && b.height() > 0.0);
        let again: BBox = b.to_string().parse().unwrap();
        assert_eq!(again.to_string(), b.to_string());
        let _ = Grid::from_bbox(b, 64, 16);
    }
});
