#![no_main]

use gridstream::{BBox, CellKey, Grid};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(key) = CellKey::from_bit_string(s) else {
        return;
    };
    assert_eq!(key.to_string(), s);
    let grid = Grid::from_bbox(BBox::BEIJING, 150, 16).unwrap();
    if let Ok(cell) = grid.decode_key(key) {
        assert_eq!(grid.encode_key(cell), Ok(key));
    }
});
