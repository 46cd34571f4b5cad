//! IoU bookkeeping, aggregate conventions, range intervals and runtime.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::geometry::BevGrid;
use crate::head::{output_classes, DRIVABLE_CLASS, MAP_CLASSES, VEHICLE_CLASS};

/// Per-class intersection and union counts. Accumulators over disjoint
/// sample sets merge by addition.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IoUAccumulator {
    pub counts: BTreeMap<String, (u64, u64)>,
}

impl IoUAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds the cells inside `region` to the counts of `class`.
    pub fn update(&mut self, class: &str, pred: &[bool], gt: &[bool], region: &[bool]) -> Result<()> {
        if pred.len() != gt.len() || pred.len() != region.len() {
            return Err(shape_err(format!(
                "IoU update: mask sizes {}, {}, {} differ",
                pred.len(),
                gt.len(),
                region.len()
            )));
        }
        let (mut i, mut u) = (0u64, 0u64);
        for ((&p, &g), &r) in pred.iter().zip(gt).zip(region) {
            if r {
                i += (p && g) as u64;
                u += (p || g) as u64;
            }
        }
        let e = self.counts.entry(class.to_string()).or_insert((0, 0));
        e.0 += i;
        e.1 += u;
        Ok(())
    }

    pub fn merge(&mut self, other: &IoUAccumulator) {
        for (k, (i, u)) in &other.counts {
            let e = self.counts.entry(k.clone()).or_insert((0, 0));
            e.0 += i;
            e.1 += u;
        }
    }

    /// IoU in `[0, 1]`; NaN when the union is empty or the class is unseen.
    pub fn iou(&self, class: &str) -> f64 {
        match self.counts.get(class) {
            Some(&(i, u)) if u > 0 => i as f64 / u as f64,
            _ => f64::NAN,
        }
    }
}

/// Round half away from zero to one decimal. Values within `1e-9` of a
/// half step count as the half step, so `70.85` computed in binary floating
/// point still rounds to `70.9`.
pub fn round1(x: f64) -> f64 {
    let y = x.abs() * 10.0;
    let r = (y + 0.5 + 1e-9).floor();
    x.signum() * r / 10.0
}

fn mean_defined(values: &[f64]) -> f64 {
    let d: Vec<f64> = values.iter().copied().filter(|v| !v.is_nan()).collect();
    if d.is_empty() {
        f64::NAN
    } else {
        d.iter().sum::<f64>() / d.len() as f64
    }
}

/// Per-class IoU in percent with the two aggregates: `map`, the mean over
/// the map classes, and `miou`, the mean of vehicle and drivable area.
/// Undefined classes appear as `null` and are excluded from means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: BTreeMap<String, Option<f64>>,
    pub map: Option<f64>,
    pub miou: Option<f64>,
    pub notices: Vec<String>,
}

fn opt(v: f64) -> Option<f64> {
    (!v.is_nan()).then_some(v)
}

/// Builds a report from per-class IoU values already in percent.
pub fn summarize_percent(per_class: &BTreeMap<String, f64>) -> MetricsReport {
    let get = |c: &str| per_class.get(c).copied().unwrap_or(f64::NAN);
    let mut notices = Vec::new();
    for c in output_classes() {
        if get(c).is_nan() {
            notices.push(format!("{c}: undefined (empty union), excluded from means"));
        }
    }
    let map: Vec<f64> = MAP_CLASSES.iter().map(|c| get(c)).collect();
    MetricsReport {
        per_class: per_class.iter().map(|(k, &v)| (k.clone(), opt(v))).collect(),
        map: opt(mean_defined(&map)),
        miou: opt(mean_defined(&[get(VEHICLE_CLASS), get(DRIVABLE_CLASS)])),
        notices,
    }
}

pub fn summarize(acc: &IoUAccumulator) -> MetricsReport {
    let per_class = output_classes()
        .into_iter()
        .map(|c| (c.to_string(), acc.iou(c) * 100.0))
        .collect();
    summarize_percent(&per_class)
}

impl MetricsReport {
    pub fn rounded(&self) -> MetricsReport {
        let r = |v: &Option<f64>| v.map(round1);
        MetricsReport {
            per_class: self.per_class.iter().map(|(k, v)| (k.clone(), r(v))).collect(),
            map: r(&self.map),
            miou: r(&self.miou),
            notices: self.notices.clone(),
        }
    }

    pub fn iou(&self, class: &str) -> Option<f64> {
        self.per_class.get(class).copied().flatten()
    }
}

fn cell(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{:.1}", round1(v)),
        None => "n/a".into(),
    }
}

/// Aligned text table: one row per labelled report, columns vehicle, map
/// classes, `map` and `mIoU`.
pub fn format_table(rows: &[(String, MetricsReport)]) -> String {
    let mut headers: Vec<String> = vec!["".into()];
    headers.extend(output_classes().into_iter().map(String::from));
    headers.push("map".into());
    headers.push("mIoU".into());
    let mut table: Vec<Vec<String>> = vec![headers];
    for (label, r) in rows {
        let mut row = vec![label.clone()];
        row.extend(output_classes().into_iter().map(|c| cell(r.iou(c))));
        row.push(cell(r.map));
        row.push(cell(r.miou));
        table.push(row);
    }
    let widths: Vec<usize> = (0..table[0].len())
        .map(|c| table.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &table {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, s)| if c == 0 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    out
}

/// Half-open distance annuli `[b0, b1), [b1, b2), ...` around the grid origin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeIntervals {
    pub bounds: Vec<f64>,
}

impl Default for RangeIntervals {
    fn default() -> Self {
        Self {
            bounds: vec![0.0, 20.0, 35.0, 50.0],
        }
    }
}

impl RangeIntervals {
    pub fn labels(&self) -> Vec<String> {
        self.bounds.windows(2).map(|w| format!("{}-{}m", w[0], w[1])).collect()
    }

    /// Interval index of a distance, if any.
    pub fn interval(&self, d: f64) -> Option<usize> {
        self.bounds.windows(2).position(|w| d >= w[0] && d < w[1])
    }
}

/// One `[X, Y]` mask per interval, by cell-center distance from the origin.
pub fn range_masks(grid: &BevGrid, intervals: &RangeIntervals) -> Vec<Vec<bool>> {
    let n = intervals.bounds.len().saturating_sub(1);
    let mut masks = vec![vec![false; grid.bev_cells()]; n];
    for i in 0..grid.x_cells {
        for j in 0..grid.y_cells {
            let (x, y) = grid.cell_center_xy(i, j);
            if let Some(k) = intervals.interval(x.hypot(y)) {
                masks[k][i * grid.y_cells + j] = true;
            }
        }
    }
    masks
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuntimeReport {
    pub repetitions: usize,
    pub median_ms: f64,
    pub fps: f64,
    pub samples_ms: Vec<f64>,
}

/// Median wall time of `forward` over `repetitions` calls.
pub fn measure_runtime<F: FnMut() -> Result<()>>(mut forward: F, repetitions: usize) -> Result<RuntimeReport> {
    let reps = repetitions.max(1);
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        forward()?;
        samples.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let mut sorted = samples.clone();
    sorted.sort_by(f64::total_cmp);
    let median = if reps % 2 == 1 {
        sorted[reps / 2]
    } else {
        0.5 * (sorted[reps / 2 - 1] + sorted[reps / 2])
    };
    Ok(RuntimeReport {
        repetitions: reps,
        median_ms: median,
        fps: 1000.0 / median,
        samples_ms: samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(cells: &[usize], n: usize) -> Vec<bool> {
        (0..n).map(|i| cells.contains(&i)).collect()
    }

    #[test]
    fn iou_cases() {
        let all = vec![true; 16];
        let mut acc = IoUAccumulator::new();
        acc.update("a", &mask(&[1, 2], 16), &mask(&[1, 2], 16), &all).unwrap();
        acc.update("b", &mask(&[1, 2], 16), &mask(&[5, 6], 16), &all).unwrap();
        acc.update("c", &mask(&[0, 1, 2, 3], 16), &mask(&[2, 3, 4, 5], 16), &all).unwrap();
        assert_eq!(acc.iou("a"), 1.0);
        assert_eq!(acc.iou("b"), 0.0);
        assert!((acc.iou("c") - 2.0 / 6.0).abs() < 1e-12);
        assert!(acc.iou("d").is_nan());
    }

    #[test]
    fn region_limits_counts() {
        let mut acc = IoUAccumulator::new();
        acc.update("a", &mask(&[0, 1], 4), &mask(&[1], 4), &mask(&[1], 4)).unwrap();
        assert_eq!(acc.counts["a"], (1, 1));
    }

    #[test]
    fn table_one_conventions() {
        let mut per = BTreeMap::new();
        per.insert("vehicle".to_string(), 58.4);
        per.insert("drivable_area".to_string(), 83.3);
        assert_eq!(summarize_percent(&per).rounded().miou, Some(70.9));
        per.insert("vehicle".to_string(), 48.8);
        per.insert("drivable_area".to_string(), 81.1);
        assert_eq!(summarize_percent(&per).rounded().miou, Some(65.0));
        for c in MAP_CLASSES {
            per.insert(c.to_string(), 41.5);
        }
        assert_eq!(summarize_percent(&per).map, Some(41.5));
    }

    #[test]
    fn rounding_half_away_from_zero() {
        assert_eq!(round1(0.25), 0.3);
        assert_eq!(round1(-0.25), -0.3);
        assert_eq!(round1(1.04), 1.0);
        assert_eq!(round1(64.95), 65.0);
    }

    #[test]
    fn range_boundaries() {
        let r = RangeIntervals::default();
        assert_eq!(r.interval(10.0), Some(0));
        assert_eq!(r.interval(20.0), Some(1));
        assert_eq!(r.interval(70.4), None);
        assert_eq!(r.interval(50.0), None);
    }

    #[test]
    fn runtime_median() {
        let mut calls = 0;
        let rep = measure_runtime(
            || {
                calls += 1;
                Ok(())
            },
            1,
        )
        .unwrap();
        assert_eq!(calls, 1);
        assert_eq!(rep.samples_ms.len(), 1);
        assert_eq!(rep.median_ms, rep.samples_ms[0]);
        let rep = measure_runtime(
            || {
                std::thread::sleep(std::time::Duration::from_millis(5));
                Ok(())
            },
            3,
        )
        .unwrap();
        assert!(rep.median_ms >= 5.0 && rep.median_ms < 30.0);
        assert!((rep.fps - 1000.0 / rep.median_ms).abs() < 1e-9);
    }

    #[test]
    fn table_has_aligned_rows() {
        let mut per = BTreeMap::new();
        per.insert("vehicle".to_string(), 50.0);
        let t = format_table(&[("day".into(), summarize_percent(&per))]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[1].starts_with("day"));
        assert!(lines[1].contains("50.0"));
    }
}
