//! Event-time sliding windows.
//!
//! Windows are half-open `[start, start + size)` with starts aligned to
//! multiples of the slide, anchored at epoch 0. Windows that would start
//! before 0 are never created. A window fires once, with its complete
//! member list, when the watermark reaches its end.
//!
//! Records are stored once, in panes of `gcd(size, slide)` milliseconds;
//! a firing window gathers the panes it covers.

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WindowError {
    #[error("window slide must be positive, got {0} ms")]
    NonPositiveSlide(i64),
    #[error("window size {size} ms is smaller than slide {slide} ms")]
    SizeBelowSlide { size: i64, slide: i64 },
    #[error("allowed lateness must be non-negative, got {0} ms")]
    NegativeLateness(i64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    size_ms: i64,
    slide_ms: i64,
    lateness_ms: i64,
}

impl WindowSpec {
    pub fn new(size_ms: i64, slide_ms: i64, lateness_ms: i64) -> Result<Self, WindowError> {
        if slide_ms <= 0 {
            return Err(WindowError::NonPositiveSlide(slide_ms));
        }
        if size_ms < slide_ms {
            return Err(WindowError::SizeBelowSlide {
                size: size_ms,
                slide: slide_ms,
            });
        }
        if lateness_ms < 0 {
            return Err(WindowError::NegativeLateness(lateness_ms));
        }
        Ok(Self {
            size_ms,
            slide_ms,
            lateness_ms,
        })
    }

    pub fn tumbling(size_ms: i64) -> Result<Self, WindowError> {
        Self::new(size_ms, size_ms, 0)
    }

    pub fn size_ms(&self) -> i64 {
        self.size_ms
    }

    pub fn slide_ms(&self) -> i64 {
        self.slide_ms
    }

    pub fn lateness_ms(&self) -> i64 {
        self.lateness_ms
    }

    /// Upper bound on the windows one record belongs to.
    pub fn windows_per_record(&self) -> usize {
        ((self.size_ms + self.slide_ms - 1) / self.slide_ms) as usize
    }

    /// Starts of every window containing `t`, ascending.
    pub fn windows_of(&self, t: i64) -> Vec<i64> {
        let mut starts = Vec::with_capacity(self.windows_per_record());
        let mut s = self.last_window_start(t);
        while s >= 0 && s > t - self.size_ms {
            starts.push(s);
            s -= self.slide_ms;
        }
        starts.reverse();
        starts
    }

    /// Start of the last window containing `t`.
    pub fn last_window_start(&self, t: i64) -> i64 {
        t - t.rem_euclid(self.slide_ms)
    }

    /// Start of the first window containing `t`.
    pub fn first_window_start(&self, t: i64) -> i64 {
        let mut s = self.last_window_start(t);
        // step back while the previous window still contains t
        let back = (self.size_ms - 1 - t.rem_euclid(self.slide_ms)).max(0) / self.slide_ms;
        s -= back * self.slide_ms;
        s.max(0)
    }

    fn pane_len(&self) -> i64 {
        gcd(self.size_ms, self.slide_ms)
    }
}

fn gcd(mut a: i64, mut b: i64) -> i64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// `max(event time seen) - lateness`, never moving backwards.
#[derive(Debug, Clone)]
pub struct WatermarkTracker {
    lateness_ms: i64,
    current: Option<i64>,
}

impl WatermarkTracker {
    pub fn new(lateness_ms: i64) -> Self {
        Self {
            lateness_ms,
            current: None,
        }
    }

    /// Feeds one event time and returns the watermark after it.
    pub fn observe(&mut self, event_time: i64) -> i64 {
        let candidate = event_time.saturating_sub(self.lateness_ms);
        let wm = match self.current {
            Some(cur) => cur.max(candidate),
            None => candidate,
        };
        self.current = Some(wm);
        wm
    }

    pub fn current(&self) -> Option<i64> {
        self.current
    }

    /// Whether a record at `event_time` is behind the watermark.
    pub fn is_late(&self, event_time: i64) -> bool {
        self.current.is_some_and(|wm| event_time < wm)
    }
}

/// Watermark for a maximum seen event time.
pub fn advance_watermark(max_event_time_seen: i64, lateness_ms: i64) -> i64 {
    max_event_time_seen.saturating_sub(lateness_ms)
}

/// A fired window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowInstance<T> {
    pub start: i64,
    pub end: i64,
    pub members: Vec<T>,
}

/// Assigns records to windows and fires complete windows.
#[derive(Debug)]
pub struct WindowEngine<T> {
    spec: WindowSpec,
    pane_len: i64,
    panes: BTreeMap<i64, Vec<T>>,
    next_fire: Option<i64>,
    last_start: Option<i64>,
    watermark: i64,
    late: u64,
    inserted: u64,
    stored: usize,
    peak_stored: usize,
    fired: u64,
}

impl<T: Clone> WindowEngine<T> {
    pub fn new(spec: WindowSpec) -> Self {
        Self {
            spec,
            pane_len: spec.pane_len(),
            panes: BTreeMap::new(),
            next_fire: None,
            last_start: None,
            watermark: i64::MIN,
            late: 0,
            inserted: 0,
            stored: 0,
            peak_stored: 0,
            fired: 0,
        }
    }

    pub fn spec(&self) -> &WindowSpec {
        &self.spec
    }

    pub fn watermark(&self) -> i64 {
        self.watermark
    }

    /// Adds a record; returns false when it is late and was dropped.
    pub fn insert(&mut self, event_time: i64, item: T) -> bool {
        if event_time < self.watermark || event_time < 0 {
            self.late += 1;
            return false;
        }
        let first = self.spec.first_window_start(event_time);
        let last = self.spec.last_window_start(event_time);
        self.next_fire = Some(self.next_fire.map_or(first, |nf| nf.min(first)));
        self.last_start = Some(self.last_start.map_or(last, |ls| ls.max(last)));
        let pane = event_time - event_time.rem_euclid(self.pane_len);
        self.panes.entry(pane).or_default().push(item);
        self.inserted += 1;
        self.stored += 1;
        self.peak_stored = self.peak_stored.max(self.stored);
        true
    }

    /// Raises the watermark and returns every window whose end it passed,
    /// in start order. Windows between the first and last populated ones
    /// fire even when empty.
    pub fn fire_ready(&mut self, watermark: i64) -> Vec<WindowInstance<T>> {
        self.watermark = self.watermark.max(watermark);
        let mut out = Vec::new();
        while let (Some(start), Some(last)) = (self.next_fire, self.last_start) {
            let end = start.saturating_add(self.spec.size_ms);
            if start > last || end > self.watermark {
                break;
            }
            let members = self
                .panes
                .range(start..end)
                .flat_map(|(_, items)| items.iter().cloned())
                .collect();
            out.push(WindowInstance {
                start,
                end,
                members,
            });
            self.fired += 1;
            let next = start + self.spec.slide_ms;
            self.next_fire = Some(next);
            self.evict_before(next);
        }
        out
    }

    /// Fires everything that is still open.
    pub fn flush(&mut self) -> Vec<WindowInstance<T>> {
        self.fire_ready(i64::MAX)
    }

    fn evict_before(&mut self, t: i64) {
        let keep = self.panes.split_off(&t);
        let dropped = std::mem::replace(&mut self.panes, keep);
        self.stored -= dropped.values().map(Vec::len).sum::<usize>();
    }

    pub fn late_count(&self) -> u64 {
        self.late
    }

    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    /// Records currently held.
    pub fn stored(&self) -> usize {
        self.stored
    }

    pub fn peak_stored(&self) -> usize {
        self.peak_stored
    }

    pub fn fired(&self) -> u64 {
        self.fired
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_windows(t: i64, size: i64, slide: i64) -> Vec<i64> {
        (0..=t / slide)
            .map(|k| k * slide)
            .filter(|s| *s <= t && t < s + size)
            .collect()
    }

    #[test]
    fn spec_validation() {
        assert!(WindowSpec::new(10_000, 5_000, 0).is_ok());
        assert!(WindowSpec::tumbling(10_000).is_ok());
        assert_eq!(
            WindowSpec::new(10_000, 0, 0),
            Err(WindowError::NonPositiveSlide(0))
        );
        assert_eq!(
            WindowSpec::new(5_000, 10_000, 0),
            Err(WindowError::SizeBelowSlide {
                size: 5_000,
                slide: 10_000
            })
        );
        assert_eq!(
            WindowSpec::new(10_000, 5_000, -1),
            Err(WindowError::NegativeLateness(-1))
        );
    }

    #[test]
    fn windows_of_examples() {
        let sliding = WindowSpec::new(10_000, 5_000, 0).unwrap();
        assert_eq!(sliding.windows_of(7_000), vec![0, 5_000]);
        assert_eq!(sliding.windows_of(7_000), brute_windows(7_000, 10_000, 5_000));
        assert_eq!(sliding.windows_of(0), vec![0]);
        let tumbling = WindowSpec::tumbling(10_000).unwrap();
        assert_eq!(tumbling.windows_of(15_000), vec![10_000]);
    }

    #[test]
    fn windows_of_matches_enumeration() {
        for (size, slide) in [(10, 5), (10, 3), (7, 7), (9, 2), (1, 1), (12, 5)] {
            let spec = WindowSpec::new(size, slide, 0).unwrap();
            for t in 0..200 {
                let got = spec.windows_of(t);
                assert_eq!(got, brute_windows(t, size, slide), "size={size} slide={slide} t={t}");
                assert!(got.len() <= spec.windows_per_record());
                assert_eq!(got.first().copied(), Some(spec.first_window_start(t)));
            }
        }
    }

    #[test]
    fn watermark_examples() {
        assert_eq!(advance_watermark(20_000, 0), 20_000);
        assert_eq!(advance_watermark(20_000, 2_000), 18_000);
        let mut tracker = WatermarkTracker::new(0);
        assert_eq!(tracker.observe(20_000), 20_000);
        assert_eq!(tracker.observe(19_000), 20_000);
        assert!(tracker.is_late(19_000));
        assert!(!tracker.is_late(20_000));
    }

    #[test]
    fn fires_complete_window() {
        let spec = WindowSpec::new(10_000, 5_000, 0).unwrap();
        let mut engine = WindowEngine::new(spec);
        engine.insert(1_000, "a");
        engine.insert(6_000, "b");
        let fired = engine.fire_ready(11_000);
        assert_eq!(fired.len(), 1);
        assert_eq!((fired[0].start, fired[0].end), (0, 10_000));
        assert_eq!(fired[0].members, vec!["a", "b"]);
        // second advance past the same end fires nothing new
        assert!(engine.fire_ready(12_000).is_empty());
        let rest = engine.flush();
        assert_eq!(rest.len(), 1);
        assert_eq!((rest[0].start, rest[0].members.clone()), (5_000, vec!["b"]));
        assert_eq!(engine.stored(), 0);
    }

    #[test]
    fn gaps_fire_empty_windows() {
        let spec = WindowSpec::tumbling(1_000).unwrap();
        let mut engine = WindowEngine::new(spec);
        engine.insert(500, 1);
        engine.insert(3_500, 2);
        let fired = engine.flush();
        let shape: Vec<_> = fired.iter().map(|w| (w.start, w.members.len())).collect();
        assert_eq!(shape, vec![(0, 1), (1_000, 0), (2_000, 0), (3_000, 1)]);
    }

    #[test]
    fn late_records_are_dropped() {
        let spec = WindowSpec::new(10_000, 5_000, 0).unwrap();
        let mut engine = WindowEngine::new(spec);
        engine.insert(12_000, 'x');
        engine.fire_ready(12_000);
        assert!(!engine.insert(11_999, 'y'));
        assert!(engine.insert(12_000, 'z'));
        assert_eq!(engine.late_count(), 1);
    }

    #[test]
    fn earlier_unfired_windows_still_open() {
        let spec = WindowSpec::new(10_000, 5_000, 5_000).unwrap();
        let mut engine = WindowEngine::new(spec);
        engine.insert(12_000, 1);
        engine.insert(8_000, 2);
        let fired = engine.flush();
        let shape: Vec<_> = fired.iter().map(|w| (w.start, w.members.clone())).collect();
        assert_eq!(
            shape,
            vec![(0, vec![2]), (5_000, vec![2, 1]), (10_000, vec![1])]
        );
    }

    #[test]
    fn membership_count_is_size_over_slide() {
        let spec = WindowSpec::new(30, 10, 0).unwrap();
        let mut engine = WindowEngine::new(spec);
        for t in 0..100 {
            engine.insert(t, t);
        }
        let fired = engine.flush();
        for t in 30..100 {
            let n = fired.iter().filter(|w| w.members.contains(&t)).count();
            assert_eq!(n, 3, "t={t}");
        }
        assert!(engine.peak_stored() as u64 <= engine.inserted());
    }

    #[test]
    fn non_multiple_size_uses_gcd_panes() {
        let spec = WindowSpec::new(10, 4, 0).unwrap();
        let mut engine = WindowEngine::new(spec);
        for t in 0..40 {
            engine.insert(t, t);
        }
        for w in engine.flush() {
            let expected: Vec<i64> = (w.start..w.end.min(40)).collect();
            assert_eq!(w.members, expected, "window {}", w.start);
        }
    }
}
