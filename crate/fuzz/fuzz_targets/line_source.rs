#![no_main]

use std::io::Cursor;

use gridstream::stream::PointSource;
use gridstream::{BBox, Format, Grid, LineSource};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let format = if data.first() == Some(&b'{') {
        Format::GeoJson
    } else {
        Format::Csv
    };
    let grid = Grid::from_bbox(BBox::BEIJING, 150, 16).unwrap();
    let mut source = LineSource::from_reader(Cursor::new(data.to_vec()), format, grid.clone());
    let mut n = 0u64;
    for p in source.by_ref() {
        assert_eq!(grid.key_of(p.x, p.y), Ok(p.cell));
        n += 1;
    }
    let stats = source.stats();
    assert_eq!(stats.emitted, n);
    assert_eq!(stats.records, stats.emitted + stats.outside_grid + stats.malformed);
});
