//! Pixel-level mask agreement metrics, zero-tissue failure accounting and
//! cohort-level aggregation with bootstrap confidence intervals.

use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::raster::BinaryMask;
use crate::stats;

/// Relative mpp slack tolerated when comparing two masks.
const MPP_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("masks are {a_w}x{a_h} and {b_w}x{b_h}; dimensions must match")]
    DimensionMismatch { a_w: usize, a_h: usize, b_w: usize, b_h: usize },
    #[error("masks declare different resolutions ({a} vs {b} um/px)")]
    MppMismatch { a: f64, b: f64 },
    #[error("slide sets differ: {0}")]
    SlideSetMismatch(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Confusion counts and the derived rates for one slide. Rates with a zero
/// denominator are `None`, never fabricated as 0.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskMetrics {
    pub slide_id: String,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub sensitivity: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
}

/// Pixel confusion of a predicted mask against a reference mask of equal
/// geometry.
pub fn pixel_confusion(
    slide_id: &str,
    pred: &BinaryMask,
    truth: &BinaryMask,
) -> Result<MaskMetrics, EvalError> {
    if pred.width != truth.width || pred.height != truth.height {
        return Err(EvalError::DimensionMismatch {
            a_w: pred.width,
            a_h: pred.height,
            b_w: truth.width,
            b_h: truth.height,
        });
    }
    for (a, b) in [(pred.mpp_x, truth.mpp_x), (pred.mpp_y, truth.mpp_y)] {
        if (a - b).abs() > MPP_TOL * a.max(b) {
            return Err(EvalError::MppMismatch { a, b });
        }
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
    for (&p, &t) in pred.bits.iter().zip(&truth.bits) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let ratio = |num: u64, den: u64| if den > 0 { Some(num as f64 / den as f64) } else { None };
    let sensitivity = ratio(tp, tp + fn_);
    let precision = ratio(tp, tp + fp);
    let f1 = match (sensitivity, precision) {
        (Some(s), Some(p)) if s + p > 0.0 => Some(2.0 * s * p / (s + p)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    Ok(MaskMetrics { slide_id: slide_id.to_string(), tp, fp, fn_, tn, sensitivity, precision, f1 })
}

/// True iff the detector found no tissue at all on this slide.
pub fn detect_total_failure(m: &BinaryMask) -> bool {
    m.is_empty_mask()
}

/// Per-cohort zero-tissue failure counts for two detection methods. The
/// three categories are mutually exclusive.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FailureRow {
    pub cohort: String,
    pub failed_a_only: usize,
    pub failed_b_only: usize,
    pub failed_both: usize,
    pub total: usize,
}

/// The failure taxonomy plus the slides it flags for exclusion from any
/// downstream comparison (those where either method detected nothing).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FailureReport {
    pub rows: Vec<FailureRow>,
    pub total: FailureRow,
    /// Sorted ids of every slide failing under at least one method.
    pub excluded_slide_ids: Vec<String>,
}

/// One slide's emptiness under both methods.
#[derive(Debug, Clone)]
pub struct FailureObservation {
    pub slide_id: String,
    pub cohort: String,
    pub failed_a: bool,
    pub failed_b: bool,
}

/// Builds the taxonomy from per-slide observations.
pub fn failure_report_from_observations(obs: &[FailureObservation]) -> FailureReport {
    let mut cohorts: BTreeMap<&str, FailureRow> = BTreeMap::new();
    let mut total = FailureRow {
        cohort: "total".into(),
        failed_a_only: 0,
        failed_b_only: 0,
        failed_both: 0,
        total: 0,
    };
    let mut excluded = Vec::new();
    for o in obs {
        let row = cohorts.entry(o.cohort.as_str()).or_insert_with(|| FailureRow {
            cohort: o.cohort.clone(),
            failed_a_only: 0,
            failed_b_only: 0,
            failed_both: 0,
            total: 0,
        });
        row.total += 1;
        total.total += 1;
        match (o.failed_a, o.failed_b) {
            (true, true) => {
                row.failed_both += 1;
                total.failed_both += 1;
            }
            (true, false) => {
                row.failed_a_only += 1;
                total.failed_a_only += 1;
            }
            (false, true) => {
                row.failed_b_only += 1;
                total.failed_b_only += 1;
            }
            (false, false) => {}
        }
        if o.failed_a || o.failed_b {
            excluded.push(o.slide_id.clone());
        }
    }
    excluded.sort();
    FailureReport { rows: cohorts.into_values().collect(), total, excluded_slide_ids: excluded }
}

/// Builds the taxonomy from two per-slide mask sets. The two sets must
/// cover exactly the same slide ids; `cohorts` maps slide id to cohort
/// (slides missing from it fall into cohort "all").
pub fn failure_report(
    masks_a: &BTreeMap<String, BinaryMask>,
    masks_b: &BTreeMap<String, BinaryMask>,
    cohorts: &BTreeMap<String, String>,
) -> Result<FailureReport, EvalError> {
    if masks_a.len() != masks_b.len() || masks_a.keys().zip(masks_b.keys()).any(|(a, b)| a != b) {
        let only_a: Vec<_> = masks_a.keys().filter(|k| !masks_b.contains_key(*k)).collect();
        let only_b: Vec<_> = masks_b.keys().filter(|k| !masks_a.contains_key(*k)).collect();
        return Err(EvalError::SlideSetMismatch(format!(
            "{} slide(s) only in A {:?}, {} only in B {:?}",
            only_a.len(),
            only_a,
            only_b.len(),
            only_b
        )));
    }
    let obs: Vec<FailureObservation> = masks_a
        .iter()
        .map(|(id, a)| FailureObservation {
            slide_id: id.clone(),
            cohort: cohorts.get(id).cloned().unwrap_or_else(|| "all".into()),
            failed_a: detect_total_failure(a),
            failed_b: detect_total_failure(&masks_b[id]),
        })
        .collect();
    Ok(failure_report_from_observations(&obs))
}

impl FailureReport {
    /// Plain-text table mirroring the failure-count columns.
    pub fn to_table(&self, method_a: &str, method_b: &str) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<24} {:>14} {:>14} {:>12} {:>8}\n",
            "cohort",
            format!("{method_a} only"),
            format!("{method_b} only"),
            "both",
            "total"
        ));
        for row in self.rows.iter().chain(std::iter::once(&self.total)) {
            out.push_str(&format!(
                "{:<24} {:>14} {:>14} {:>12} {:>8}\n",
                row.cohort, row.failed_a_only, row.failed_b_only, row.failed_both, row.total
            ));
        }
        out
    }
}

/// Mean and 95% bootstrap CI over the slides where a metric is defined.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
}

/// Cohort-level aggregate of per-slide metrics. Slides with an undefined
/// metric are excluded from that metric's mean and listed with a reason.
#[derive(Debug, Clone, Serialize)]
pub struct CohortAggregate {
    pub cohort: String,
    pub n_slides: usize,
    pub sensitivity: Option<MetricSummary>,
    pub precision: Option<MetricSummary>,
    pub excluded_slides: Vec<(String, String)>,
    pub replicates: usize,
    pub seed: u64,
}

/// Aggregates a cohort's per-slide metrics: means over defined values plus
/// percentile bootstrap CIs (2.5/97.5) over slide resampling.
pub fn aggregate_cohort(
    cohort: &str,
    metrics: &[MaskMetrics],
    replicates: usize,
    seed: u64,
) -> Result<CohortAggregate, EvalError> {
    if metrics.is_empty() {
        return Err(EvalError::EmptyInput("metric list"));
    }
    let mut excluded = Vec::new();
    let mut summarize = |name: &str, get: fn(&MaskMetrics) -> Option<f64>, salt: u64| {
        let values: Vec<f64> = metrics.iter().filter_map(get).collect();
        for m in metrics {
            if get(m).is_none() {
                excluded.push((m.slide_id.clone(), format!("{name} undefined (zero denominator)")));
            }
        }
        if values.is_empty() {
            None
        } else {
            let (ci_low, ci_high) = stats::bootstrap_mean_ci(&values, replicates, seed ^ salt);
            Some(MetricSummary { mean: stats::mean(&values), ci_low, ci_high, n: values.len() })
        }
    };
    let sensitivity = summarize("sensitivity", |m| m.sensitivity, 0);
    let precision = summarize("precision", |m| m.precision, 0x9E37_79B9);
    Ok(CohortAggregate {
        cohort: cohort.to_string(),
        n_slides: metrics.len(),
        sensitivity,
        precision,
        excluded_slides: excluded,
        replicates,
        seed,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes the per-slide metrics CSV:
/// `slide_id,cohort,tp,fp,fn,tn,sensitivity,precision,f1`, with the empty
/// string for undefined rates. Rows are emitted in the given order.
pub fn write_metrics_csv<W: Write>(
    w: W,
    rows: &[(String, MaskMetrics)],
) -> Result<(), EvalError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["slide_id", "cohort", "tp", "fp", "fn", "tn", "sensitivity", "precision", "f1"])?;
    for (cohort, m) in rows {
        out.write_record([
            m.slide_id.clone(),
            cohort.clone(),
            m.tp.to_string(),
            m.fp.to_string(),
            m.fn_.to_string(),
            m.tn.to_string(),
            fmt_opt(m.sensitivity),
            fmt_opt(m.precision),
            fmt_opt(m.f1),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_of(bits: &[bool], w: usize) -> BinaryMask {
        BinaryMask::new(w, bits.len() / w, bits.to_vec(), 8.0, 8.0)
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let mut m = BinaryMask::empty(4, 4, 8.0, 8.0);
        m.set(1, 1, true);
        m.set(2, 2, true);
        let r = pixel_confusion("s", &m, &m).unwrap();
        assert_eq!(r.sensitivity, Some(1.0));
        assert_eq!(r.precision, Some(1.0));
        assert_eq!(r.f1, Some(1.0));
        assert_eq!(r.tp + r.fp + r.fn_ + r.tn, 16);
    }

    #[test]
    fn empty_prediction_has_undefined_precision() {
        let pred = BinaryMask::empty(4, 4, 8.0, 8.0);
        let truth = BinaryMask::filled(4, 4, 8.0, 8.0);
        let r = pixel_confusion("s", &pred, &truth).unwrap();
        assert_eq!(r.sensitivity, Some(0.0));
        assert_eq!(r.precision, None);
        assert_eq!(r.f1, None);
    }

    #[test]
    fn half_overlap_quadrants() {
        // truth = top half, pred = left half of an 8x8 mask.
        let n = 8usize;
        let mut truth = BinaryMask::empty(n, n, 8.0, 8.0);
        let mut pred = BinaryMask::empty(n, n, 8.0, 8.0);
        for y in 0..n {
            for x in 0..n {
                if y < n / 2 {
                    truth.set(x, y, true);
                }
                if x < n / 2 {
                    pred.set(x, y, true);
                }
            }
        }
        let r = pixel_confusion("s", &pred, &truth).unwrap();
        assert_eq!(r.sensitivity, Some(0.5));
        assert_eq!(r.precision, Some(0.5));
    }

    #[test]
    fn swapping_pred_and_truth_swaps_rates() {
        let a = mask_of(&[true, true, false, false, true, false, false, false, false], 3);
        let b = mask_of(&[true, false, false, true, true, false, false, false, true], 3);
        let r1 = pixel_confusion("s", &a, &b).unwrap();
        let r2 = pixel_confusion("s", &b, &a).unwrap();
        assert_eq!(r1.sensitivity, r2.precision);
        assert_eq!(r1.precision, r2.sensitivity);
    }

    #[test]
    fn dimension_and_mpp_mismatches_are_rejected() {
        let a = BinaryMask::empty(3, 3, 8.0, 8.0);
        let b = BinaryMask::empty(4, 3, 8.0, 8.0);
        assert!(matches!(pixel_confusion("s", &a, &b), Err(EvalError::DimensionMismatch { .. })));
        let c = BinaryMask::empty(3, 3, 4.0, 4.0);
        assert!(matches!(pixel_confusion("s", &a, &c), Err(EvalError::MppMismatch { .. })));
    }

    #[test]
    fn total_failure_detection() {
        let mut m = BinaryMask::empty(5, 5, 8.0, 8.0);
        assert!(detect_total_failure(&m));
        m.set(3, 3, true);
        assert!(!detect_total_failure(&m));
    }

    fn obs(id: &str, cohort: &str, a: bool, b: bool) -> FailureObservation {
        FailureObservation { slide_id: id.into(), cohort: cohort.into(), failed_a: a, failed_b: b }
    }

    #[test]
    fn failure_report_counts_planted_failures_exactly() {
        let mut observations = Vec::new();
        for i in 0..14 {
            observations.push(obs(&format!("ok{i}"), if i % 2 == 0 { "c1" } else { "c2" }, false, false));
        }
        for i in 0..3 {
            observations.push(obs(&format!("a{i}"), "c1", true, false));
        }
        for i in 0..2 {
            observations.push(obs(&format!("b{i}"), "c2", false, true));
        }
        observations.push(obs("both0", "c1", true, true));
        let report = failure_report_from_observations(&observations);
        assert_eq!(report.total.failed_a_only, 3);
        assert_eq!(report.total.failed_b_only, 2);
        assert_eq!(report.total.failed_both, 1);
        assert_eq!(report.total.total, 20);
        assert_eq!(report.excluded_slide_ids.len(), 6);
        let c1 = report.rows.iter().find(|r| r.cohort == "c1").unwrap();
        assert_eq!((c1.failed_a_only, c1.failed_b_only, c1.failed_both), (3, 0, 1));
    }

    #[test]
    fn failure_report_from_masks_checks_slide_sets() {
        let mut a = BTreeMap::new();
        let mut b = BTreeMap::new();
        a.insert("s1".to_string(), BinaryMask::empty(2, 2, 8.0, 8.0));
        b.insert("s2".to_string(), BinaryMask::empty(2, 2, 8.0, 8.0));
        assert!(matches!(
            failure_report(&a, &b, &BTreeMap::new()),
            Err(EvalError::SlideSetMismatch(_))
        ));
        b.clear();
        let mut filled = BinaryMask::empty(2, 2, 8.0, 8.0);
        filled.set(0, 0, true);
        b.insert("s1".to_string(), filled);
        let report = failure_report(&a, &b, &BTreeMap::new()).unwrap();
        assert_eq!(report.total.failed_a_only, 1);
        assert_eq!(report.excluded_slide_ids, vec!["s1".to_string()]);
    }

    fn metric(id: &str, sens: Option<f64>, prec: Option<f64>) -> MaskMetrics {
        MaskMetrics {
            slide_id: id.into(),
            tp: 0,
            fp: 0,
            fn_: 0,
            tn: 0,
            sensitivity: sens,
            precision: prec,
            f1: None,
        }
    }

    #[test]
    fn single_slide_ci_collapses_to_point() {
        let agg = aggregate_cohort("c", &[metric("s", Some(0.9), Some(0.8))], 100, 7).unwrap();
        let s = agg.sensitivity.unwrap();
        assert_eq!((s.mean, s.ci_low, s.ci_high), (0.9, 0.9, 0.9));
    }

    #[test]
    fn identical_metrics_give_degenerate_ci() {
        let ms: Vec<MaskMetrics> = (0..10).map(|i| metric(&format!("s{i}"), Some(0.75), None)).collect();
        let agg = aggregate_cohort("c", &ms, 200, 3).unwrap();
        let s = agg.sensitivity.unwrap();
        assert_eq!(s.ci_low, s.ci_high);
        assert!((s.mean - 0.75).abs() < 1e-12);
        assert!(agg.precision.is_none());
        assert_eq!(agg.excluded_slides.len(), 10);
    }

    #[test]
    fn bootstrap_matches_independent_resampler() {
        // Second implementation of the resampling from the same seeded
        // stream: indices are next_u64() % n, replicate by replicate.
        let values: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let ms: Vec<MaskMetrics> =
            values.iter().enumerate().map(|(i, &v)| metric(&format!("s{i}"), Some(v), None)).collect();
        let replicates = 300;
        let seed = 12345u64;
        let agg = aggregate_cohort("c", &ms, replicates, seed).unwrap();
        let got = agg.sensitivity.unwrap();

        let mut rng = crate::stats::seeded_rng(seed);
        use rand_core::RngCore;
        let mut means = Vec::new();
        for _ in 0..replicates {
            let mut sum = 0.0;
            for _ in 0..values.len() {
                sum += values[(rng.next_u64() % values.len() as u64) as usize];
            }
            means.push(sum / values.len() as f64);
        }
        means.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let lo = crate::stats::percentile(&means, 2.5);
        let hi = crate::stats::percentile(&means, 97.5);
        assert_eq!(got.ci_low, lo);
        assert_eq!(got.ci_high, hi);
        assert!(got.ci_low <= got.mean && got.mean <= got.ci_high);
    }

    #[test]
    fn metrics_invariant_under_simultaneous_rotation() {
        let mut state = 5u64;
        let mut bit = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            state >> 63 == 1
        };
        let n = 8usize;
        let pred_bits: Vec<bool> = (0..n * n).map(|_| bit()).collect();
        let truth_bits: Vec<bool> = (0..n * n).map(|_| bit()).collect();
        let rot = |bits: &[bool]| -> Vec<bool> {
            let mut out = vec![false; n * n];
            for y in 0..n {
                for x in 0..n {
                    out[x * n + (n - 1 - y)] = bits[y * n + x];
                }
            }
            out
        };
        let r1 = pixel_confusion("s", &mask_of(&pred_bits, n), &mask_of(&truth_bits, n)).unwrap();
        let r2 = pixel_confusion("s", &mask_of(&rot(&pred_bits), n), &mask_of(&rot(&truth_bits), n)).unwrap();
        assert_eq!((r1.tp, r1.fp, r1.fn_, r1.tn), (r2.tp, r2.fp, r2.fn_, r2.tn));
    }

    #[test]
    fn csv_uses_empty_string_for_undefined() {
        let rows = vec![
            ("c1".to_string(), metric("s1", Some(0.5), None)),
            ("c1".to_string(), metric("s2", None, Some(1.0))),
        ];
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "slide_id,cohort,tp,fp,fn,tn,sensitivity,precision,f1");
        assert_eq!(lines[1], "s1,c1,0,0,0,0,0.5,,");
        assert_eq!(lines[2], "s2,c1,0,0,0,0,,1,");
    }
}
