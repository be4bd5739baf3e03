//! Non-meteorological echo (clutter) filter based on accumulation limits.

use std::collections::BTreeMap;

use chrono::Datelike;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::frame::{RadarFrame, Timestamp};

/// Calendar-year accumulation limit, stored units (1300 mm).
pub const YEAR_LIMIT_UNITS: u64 = 130_000;
/// Rolling 24-hour accumulation limit, stored units (174 mm).
pub const DAY_LIMIT_UNITS: u64 = 17_400;
const DAY_SECONDS: i64 = 86_400;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QcRule {
    YearSum,
    DaySum,
}

/// A pixel zeroed over `[start, end)` because an accumulation exceeded a limit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlaggedWindow {
    pub row: usize,
    pub col: usize,
    pub rule: QcRule,
    pub start: Timestamp,
    pub end: Timestamp,
    /// Largest offending accumulation inside the window, stored units.
    pub sum_units: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleSummary {
    pub rule: QcRule,
    pub threshold_units: u64,
    pub count: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QcReport {
    /// Pixel-frame cells that were nonzero and got zeroed.
    pub pixels_zeroed: u64,
    pub windows_flagged: Vec<FlaggedWindow>,
    pub rules: Vec<RuleSummary>,
}

impl QcReport {
    pub fn is_empty(&self) -> bool {
        self.windows_flagged.is_empty()
    }

    pub fn count(&self, rule: QcRule) -> usize {
        self.windows_flagged.iter().filter(|w| w.rule == rule).count()
    }
}

/// Per-pixel list of half-open frame-index ranges to zero.
type ZeroPlan = BTreeMap<(usize, usize), Vec<(usize, usize)>>;

/// Zeroes pixels whose calendar-year sum exceeds [`YEAR_LIMIT_UNITS`] (for that
/// year) or whose rolling 24-hour sum exceeds [`DAY_LIMIT_UNITS`] (for the
/// offending window). Both rules are evaluated on the unfiltered input, which
/// makes the filter idempotent.
pub fn apply_clutter_filter(mut frames: Vec<RadarFrame>) -> (Vec<RadarFrame>, QcReport) {
    let mut report = QcReport::default();
    if frames.is_empty() {
        report.rules = summaries(&report);
        return (frames, report);
    }
    let dim = frames[0].values.dim();
    let mut plan = ZeroPlan::new();

    flag_years(&frames, dim, &mut plan, &mut report);
    flag_days(&frames, dim, &mut plan, &mut report);

    for ((row, col), ranges) in &plan {
        for &(a, b) in ranges {
            for f in &mut frames[a..b] {
                let v = &mut f.values[[*row, *col]];
                if *v != 0 {
                    *v = 0;
                    report.pixels_zeroed += 1;
                }
            }
        }
    }
    report.windows_flagged.sort_by(|a, b| {
        (a.rule, a.row, a.col, a.start).cmp(&(b.rule, b.row, b.col, b.start))
    });
    report.rules = summaries(&report);
    (frames, report)
}

fn summaries(report: &QcReport) -> Vec<RuleSummary> {
    vec![
        RuleSummary {
            rule: QcRule::YearSum,
            threshold_units: YEAR_LIMIT_UNITS,
            count: report.count(QcRule::YearSum),
        },
        RuleSummary {
            rule: QcRule::DaySum,
            threshold_units: DAY_LIMIT_UNITS,
            count: report.count(QcRule::DaySum),
        },
    ]
}

fn flag_years(frames: &[RadarFrame], dim: (usize, usize), plan: &mut ZeroPlan, report: &mut QcReport) {
    let mut start = 0;
    while start < frames.len() {
        let year = frames[start].timestamp.year();
        let end = start + frames[start..].iter().take_while(|f| f.timestamp.year() == year).count();
        let mut sums = Array2::<u64>::zeros(dim);
        for f in &frames[start..end] {
            sums.zip_mut_with(&f.values, |s, &v| *s += v as u64);
        }
        for ((row, col), &sum) in sums.indexed_iter() {
            if sum > YEAR_LIMIT_UNITS {
                plan.entry((row, col)).or_default().push((start, end));
                report.windows_flagged.push(FlaggedWindow {
                    row,
                    col,
                    rule: QcRule::YearSum,
                    start: frames[start].timestamp,
                    end: frames[end - 1].timestamp + chrono::Duration::seconds(super::frame::STEP_SECONDS),
                    sum_units: sum,
                });
            }
        }
        start = end;
    }
}

fn flag_days(frames: &[RadarFrame], dim: (usize, usize), plan: &mut ZeroPlan, report: &mut QcReport) {
    // Open (not yet closed) flagged interval per pixel: (start, end, max sum).
    let mut open: BTreeMap<(usize, usize), (usize, usize, u64)> = BTreeMap::new();
    let mut sums = Array2::<u64>::zeros(dim);
    let mut end = 0;
    let close = |key: (usize, usize), (a, b, max): (usize, usize, u64), plan: &mut ZeroPlan, report: &mut QcReport| {
        plan.entry(key).or_default().push((a, b));
        report.windows_flagged.push(FlaggedWindow {
            row: key.0,
            col: key.1,
            rule: QcRule::DaySum,
            start: frames[a].timestamp,
            end: frames[b - 1].timestamp + chrono::Duration::seconds(super::frame::STEP_SECONDS),
            sum_units: max,
        });
    };
    for start in 0..frames.len() {
        let limit = frames[start].timestamp.timestamp() + DAY_SECONDS;
        while end < frames.len() && frames[end].timestamp.timestamp() < limit {
            sums.zip_mut_with(&frames[end].values, |s, &v| *s += v as u64);
            end += 1;
        }
        for ((row, col), &sum) in sums.indexed_iter() {
            if sum > DAY_LIMIT_UNITS {
                let key = (row, col);
                match open.get_mut(&key) {
                    Some(w) if w.1 >= start => {
                        w.1 = w.1.max(end);
                        w.2 = w.2.max(sum);
                    }
                    Some(_) => {
                        let done = open.insert(key, (start, end, sum)).unwrap();
                        close(key, done, plan, report);
                    }
                    None => {
                        open.insert(key, (start, end, sum));
                    }
                }
            }
        }
        sums.zip_mut_with(&frames[start].values, |s, &v| *s -= v as u64);
    }
    for (key, w) in open {
        close(key, w, plan, report);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{TimeZone, Utc};
    use std::sync::Arc;

    fn stream(n: usize, start: Timestamp, step_secs: i64, value_at: impl Fn(usize) -> u32) -> Vec<RadarFrame> {
        let mask = Arc::new(Array2::from_elem((3, 3), true));
        (0..n)
            .map(|i| {
                let mut v = Array2::<u32>::zeros((3, 3));
                v[[1, 1]] = value_at(i);
                v[[0, 0]] = 1;
                RadarFrame::new(v, start + chrono::Duration::seconds(step_secs * i as i64), mask.clone()).unwrap()
            })
            .collect()
    }

    fn t0() -> Timestamp {
        Utc.with_ymd_and_hms(2010, 3, 1, 0, 0, 0).unwrap()
    }

    #[test]
    fn empty_stream_gives_empty_report() {
        let (out, rep) = apply_clutter_filter(vec![]);
        assert!(out.is_empty());
        assert!(rep.is_empty());
        assert_eq!(rep.pixels_zeroed, 0);
    }

    #[test]
    fn constant_288mm_day_is_zeroed() {
        // 288 frames of 100 units = 28800 units = 288 mm > 174 mm.
        let frames = stream(288, t0(), 300, |_| 100);
        let (out, rep) = apply_clutter_filter(frames);
        assert!(out.iter().all(|f| f.values[[1, 1]] == 0));
        assert!(out.iter().all(|f| f.values[[0, 0]] == 1));
        assert_eq!(rep.count(QcRule::DaySum), 1);
        assert_eq!(rep.count(QcRule::YearSum), 0);
        assert_eq!(rep.windows_flagged[0].sum_units, 28_800);
        assert_eq!(rep.pixels_zeroed, 288);
    }

    #[test]
    fn all_zero_stream_is_untouched() {
        let frames = stream(300, t0(), 300, |_| 0);
        let (out, rep) = apply_clutter_filter(frames.clone());
        // Pixel (0,0) carries 1 unit per frame, far below both limits.
        assert_eq!(out, frames);
        assert!(rep.is_empty());
    }

    #[test]
    fn day_rule_is_strict() {
        // 174 frames of 100 units = exactly 17400 units inside one day.
        let frames = stream(200, t0(), 300, |i| if i < 174 { 100 } else { 0 });
        let (out, rep) = apply_clutter_filter(frames.clone());
        assert!(rep.windows_flagged.iter().all(|w| w.rule != QcRule::DaySum));
        assert_eq!(out, frames);
    }

    #[test]
    fn year_rule_boundary_is_strict() {
        // 13 bursts of 10000 units two days apart: every 24 h window holds at
        // most 10000 units, the calendar year holds exactly 130000.
        let exact = stream(13, t0(), 2 * 86_400, |_| 10_000);
        let (out, rep) = apply_clutter_filter(exact.clone());
        assert!(rep.is_empty());
        assert_eq!(out, exact);

        let over = stream(13, t0(), 2 * 86_400, |i| if i == 0 { 10_001 } else { 10_000 });
        let (out, rep) = apply_clutter_filter(over);
        assert_eq!(rep.count(QcRule::YearSum), 1);
        assert!(out.iter().all(|f| f.values[[1, 1]] == 0));
    }

    #[test]
    fn filter_is_idempotent_on_bursty_stream() {
        let frames = stream(600, t0(), 300, |i| if (100..250).contains(&i) { 150 } else { (i % 7) as u32 });
        let (once, rep1) = apply_clutter_filter(frames);
        assert!(!rep1.is_empty());
        let (twice, rep2) = apply_clutter_filter(once.clone());
        assert_eq!(once, twice);
        assert!(rep2.is_empty());
    }
}
