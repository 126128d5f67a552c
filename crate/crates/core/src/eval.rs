//! Localization error statistics, inter-rater agreement and timing reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Errors above this many millimetres count as outliers.
pub const OUTLIER_MM: f64 = 10.0;

/// Median with the lower central value for even lengths; 0 for empty input.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v[(v.len() - 1) / 2]
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Population standard deviation.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub n: usize,
    pub mean_mm: f64,
    pub std_mm: f64,
    pub median_mm: f64,
    pub max_mm: f64,
    pub mean_slice: f64,
    pub std_slice: f64,
    pub median_slice: f64,
    pub max_slice: f64,
    pub count_gt_10: usize,
}

impl ErrorStats {
    /// Statistics of absolute errors in mm and slices.
    pub fn from_errors(err_mm: &[f64], err_slice: &[f64]) -> Self {
        let max = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
        Self {
            n: err_mm.len(),
            mean_mm: mean(err_mm),
            std_mm: std_dev(err_mm),
            median_mm: median(err_mm),
            max_mm: max(err_mm),
            mean_slice: mean(err_slice),
            std_slice: std_dev(err_slice),
            median_slice: median(err_slice),
            max_slice: max(err_slice),
            count_gt_10: err_mm.iter().filter(|&&e| e > OUTLIER_MM).count(),
        }
    }
}

fn check_lengths(a: usize, b: usize, c: usize) -> Result<()> {
    if a != b || a != c {
        return Err(Error::Shape(format!("length mismatch: {a} predictions, {b} references, {c} thicknesses")));
    }
    Ok(())
}

fn check_thickness(t: &[f64]) -> Result<()> {
    match t.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
        Some(bad) => Err(Error::Domain(format!("slice thickness {bad} must be positive"))),
        None => Ok(()),
    }
}

/// `|pred - gt|` in mm and, divided by the slice thickness without rounding,
/// in slices.
pub fn localization_errors(preds: &[f64], gts: &[f64], thicknesses: &[f64]) -> Result<ErrorStats> {
    check_lengths(preds.len(), gts.len(), thicknesses.len())?;
    check_thickness(thicknesses)?;
    let err_mm: Vec<f64> = preds.iter().zip(gts).map(|(p, g)| (p - g).abs()).collect();
    let err_slice: Vec<f64> = err_mm.iter().zip(thicknesses).map(|(e, t)| e / t).collect();
    Ok(ErrorStats::from_errors(&err_mm, &err_slice))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterraterStats {
    pub a_vs_b: ErrorStats,
    /// Both annotators against the floor of their mean, pooled.
    pub each_vs_mean: ErrorStats,
}

/// Agreement between two annotators over the same images, keyed by image id.
pub fn interrater_stats(
    a: &BTreeMap<String, f64>,
    b: &BTreeMap<String, f64>,
    thicknesses: &BTreeMap<String, f64>,
) -> Result<InterraterStats> {
    if a.keys().ne(b.keys()) {
        let only: Vec<_> = a.keys().filter(|k| !b.contains_key(*k)).chain(b.keys().filter(|k| !a.contains_key(*k))).collect();
        return Err(Error::Shape(format!("unpaired annotations for {only:?}")));
    }
    let mut pair = (Vec::new(), Vec::new());
    let mut each = (Vec::new(), Vec::new());
    for (id, &ya) in a {
        let yb = b[id];
        let t = *thicknesses.get(id).ok_or_else(|| Error::Shape(format!("no slice thickness for {id}")))?;
        check_thickness(&[t])?;
        let merged = ((ya + yb) / 2.0).floor();
        let d = (ya - yb).abs();
        pair.0.push(d);
        pair.1.push(d / t);
        for y in [ya, yb] {
            let e = (y - merged).abs();
            each.0.push(e);
            each.1.push(e / t);
        }
    }
    Ok(InterraterStats {
        a_vs_b: ErrorStats::from_errors(&pair.0, &pair.1),
        each_vs_mean: ErrorStats::from_errors(&each.0, &each.1),
    })
}

pub const STATS_HEADER: [&str; 11] = [
    "name", "n", "mean_mm", "std_mm", "median_mm", "max_mm", "mean_slice", "std_slice", "median_slice", "max_slice",
    "gt_10",
];

/// CSV with one row per named result.
pub fn stats_csv(rows: &[(String, ErrorStats)]) -> String {
    let mut out = STATS_HEADER.join(",");
    out.push('\n');
    for (name, s) in rows {
        let _ = writeln!(
            out,
            "{name},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{}",
            s.n, s.mean_mm, s.std_mm, s.median_mm, s.max_mm, s.mean_slice, s.std_slice, s.median_slice, s.max_slice, s.count_gt_10
        );
    }
    out
}

/// Fixed-width text table: mm and slice columns, then the outlier count.
pub fn stats_table(rows: &[(String, ErrorStats)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(4).max(4);
    let mut out = format!(
        "{:<width$} | {:>7} {:>7} {:>7} {:>7} | {:>7} {:>7} {:>7} {:>7} | {:>5}\n",
        "", "mean", "std", "median", "max", "mean", "std", "median", "max", ">10"
    );
    let _ = writeln!(out, "{:<width$} | {:^31} | {:^31} |", "", "error (mm)", "error (slices)");
    for (name, s) in rows {
        let _ = writeln!(
            out,
            "{name:<width$} | {:>7.2} {:>7.2} {:>7.2} {:>7.2} | {:>7.2} {:>7.2} {:>7.2} {:>7.2} | {:>5}",
            s.mean_mm, s.std_mm, s.median_mm, s.max_mm, s.mean_slice, s.std_slice, s.median_slice, s.max_slice, s.count_gt_10
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub name: String,
    pub median_s: f64,
    /// This row's time divided by the first row's.
    pub ratio_to_first: f64,
}

/// A named closure to time.
pub type BenchEntry<'a> = (String, Box<dyn FnMut() -> Result<()> + 'a>);

/// Median wall time of each named closure after 2 warm-ups and `runs` runs.
pub fn benchmark(entries: Vec<BenchEntry<'_>>, runs: usize) -> Result<Vec<TimingRow>> {
    let mut rows = Vec::with_capacity(entries.len());
    for (name, mut f) in entries {
        let median_s = crate::inference::time_median(2, runs, &mut *f)?;
        rows.push(TimingRow { name, median_s, ratio_to_first: 0.0 });
    }
    if let Some(first) = rows.first().map(|r| r.median_s) {
        for r in &mut rows {
            r.ratio_to_first = if first > 0.0 { r.median_s / first } else { f64::NAN };
        }
    }
    Ok(rows)
}

pub fn timing_table(rows: &[TimingRow]) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
    let mut out = format!("{:<width$} {:>12} {:>10}\n", "model", "median (s)", "ratio");
    for r in rows {
        let _ = writeln!(out, "{:<width$} {:>12.4} {:>10.2}", r.name, r.median_s, r.ratio_to_first);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(values: &[f64]) -> BTreeMap<String, f64> {
        values.iter().enumerate().map(|(i, v)| (format!("img{i}"), *v)).collect()
    }

    #[test]
    fn perfect_predictions_give_zero_stats() {
        let s = localization_errors(&[1.0, 5.0], &[1.0, 5.0], &[1.0, 3.0]).unwrap();
        assert_eq!(s, ErrorStats::from_errors(&[0.0, 0.0], &[0.0, 0.0]));
        assert_eq!(s.max_mm, 0.0);
        assert_eq!(s.count_gt_10, 0);
    }

    #[test]
    fn slice_errors_are_not_rounded() {
        let s = localization_errors(&[105.0], &[100.0], &[2.5]).unwrap();
        assert_eq!(s.mean_slice, 2.0);
        let s = localization_errors(&[101.0], &[100.0], &[3.0]).unwrap();
        assert_eq!(s.max_slice, 1.0 / 3.0);
    }

    #[test]
    fn hand_computed_fixture() {
        let s = localization_errors(&[1.0, 2.0, 3.0, 16.0], &[0.0, 3.0, 2.0, 4.0], &[1.0; 4]).unwrap();
        assert_eq!(s.median_mm, 1.0);
        assert_eq!(s.max_mm, 12.0);
        assert_eq!(s.count_gt_10, 1);
        assert_eq!(s.mean_mm, 15.0 / 4.0);
        // population std of {1,1,1,12}: sqrt(((2.75^2)*3 + 8.25^2) / 4)
        assert!((s.std_mm - (90.75f64 / 4.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_and_bad_thickness() {
        assert!(matches!(localization_errors(&[1.0], &[1.0, 2.0], &[1.0]), Err(Error::Shape(_))));
        assert!(matches!(localization_errors(&[1.0], &[1.0], &[0.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn even_median_takes_lower_middle() {
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.0);
        assert_eq!(median(&[3.0]), 3.0);
    }

    #[test]
    fn interrater_arithmetic() {
        let t = ids(&[1.0]);
        let same = interrater_stats(&ids(&[100.0]), &ids(&[100.0]), &t).unwrap();
        assert_eq!(same.a_vs_b.max_mm, 0.0);
        assert_eq!(same.each_vs_mean.max_mm, 0.0);

        let s = interrater_stats(&ids(&[100.0]), &ids(&[102.0]), &t).unwrap();
        assert_eq!(s.a_vs_b.mean_mm, 2.0);
        assert_eq!(s.each_vs_mean.mean_mm, 1.0);
        assert_eq!(s.each_vs_mean.n, 2);

        // floor rule: merged position 100, so A is exact and B is 1 mm off
        let s = interrater_stats(&ids(&[100.0]), &ids(&[101.0]), &t).unwrap();
        assert_eq!(s.each_vs_mean.max_mm, 1.0);
        assert_eq!(s.each_vs_mean.median_mm, 0.0);
        assert_eq!(s.each_vs_mean.mean_mm, 0.5);
    }

    #[test]
    fn unpaired_ids_rejected() {
        let a = ids(&[1.0, 2.0]);
        let b = ids(&[1.0]);
        assert!(interrater_stats(&a, &b, &ids(&[1.0, 1.0])).is_err());
    }

    #[test]
    fn tables_render_every_row() {
        let s = localization_errors(&[1.0], &[0.0], &[1.0]).unwrap();
        let rows = vec![("frontal".to_string(), s), ("sagittal".to_string(), s)];
        let csv = stats_csv(&rows);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("name,n,mean_mm"));
        let table = stats_table(&rows);
        assert!(table.contains("frontal") && table.contains("sagittal") && table.contains(">10"));
    }

    #[test]
    fn self_benchmark_ratio_near_one() {
        let work = || {
            let mut acc = 0u64;
            for i in 0..200_000u64 {
                acc = acc.wrapping_add(i * i);
            }
            std::hint::black_box(acc);
            Ok(())
        };
        let rows = benchmark(vec![("a".into(), Box::new(work)), ("b".into(), Box::new(work))], 10).unwrap();
        assert!((rows[1].ratio_to_first - 1.0).abs() < 0.2, "{rows:?}");
        assert!(timing_table(&rows).contains("ratio"));
    }

    proptest::proptest! {
        #[test]
        fn stats_are_order_invariant(errs in proptest::collection::vec(0.0f64..50.0, 1..30), seed in 0u64..1000) {
            let thick: Vec<f64> = errs.iter().map(|e| 1.0 + (e * 7.0) % 4.0).collect();
            let zeros = vec![0.0; errs.len()];
            let a = localization_errors(&errs, &zeros, &thick).unwrap();
            let mut idx: Vec<usize> = (0..errs.len()).collect();
            let n = idx.len();
            for i in 0..n { idx.swap(i, (seed as usize * 31 + i * 17) % n); }
            let e2: Vec<f64> = idx.iter().map(|&i| errs[i]).collect();
            let t2: Vec<f64> = idx.iter().map(|&i| thick[i]).collect();
            let b = localization_errors(&e2, &zeros, &t2).unwrap();
            proptest::prop_assert_eq!(a.median_mm, b.median_mm);
            proptest::prop_assert_eq!(a.max_slice, b.max_slice);
            proptest::prop_assert!((a.mean_mm - b.mean_mm).abs() < 1e-9);
            proptest::prop_assert!(a.median_mm <= a.max_mm);
        }
    }
}
