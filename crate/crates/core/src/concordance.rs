//! Downstream-grading comparison harness: quadratic weighted kappa between
//! predicted and reference ISUP grades, bootstrap confidence intervals,
//! location/patient pooling, vote aggregation and discordance reporting.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use rand_core::RngCore;
use serde::Serialize;
use thiserror::Error;

use crate::stats;

/// Number of ISUP categories: benign (0) plus grades 1-5.
pub const ISUP_CATEGORIES: usize = 6;

#[derive(Debug, Error)]
pub enum ConcordanceError {
    #[error("truth and prediction lists have different lengths ({truth} vs {pred})")]
    LengthMismatch { truth: usize, pred: usize },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("invalid ISUP grade {0}; expected 0-5")]
    InvalidGrade(i64),
    #[error("grade {grade} outside the configured {categories} categories")]
    GradeOutOfRange { grade: u8, categories: usize },
    #[error("duplicate slide_id `{0}`")]
    DuplicateSlide(String),
    #[error("predictions csv, record {record}: {reason}")]
    Csv { record: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// ISUP grade group; 0 encodes benign.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct GradeLabel(u8);

impl GradeLabel {
    pub fn new(value: i64) -> Result<Self, ConcordanceError> {
        if (0..=5).contains(&value) {
            Ok(Self(value as u8))
        } else {
            Err(ConcordanceError::InvalidGrade(value))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }

    /// Malignant means any grade above benign.
    pub fn is_malignant(self) -> bool {
        self.0 >= 1
    }
}

/// Which prediction column of a [`PredictionSet`] to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    A,
    B,
}

/// One graded slide with predictions from both tissue-detection variants.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionRow {
    pub slide_id: String,
    /// Location/patient pooling key; equals `slide_id` for slide-level
    /// cohorts.
    pub group_id: String,
    pub cohort: String,
    pub truth: GradeLabel,
    pub pred_a: GradeLabel,
    pub pred_b: GradeLabel,
}

impl PredictionRow {
    pub fn pred(&self, method: Method) -> GradeLabel {
        match method {
            Method::A => self.pred_a,
            Method::B => self.pred_b,
        }
    }
}

/// A set of prediction rows with unique slide ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictionSet {
    rows: Vec<PredictionRow>,
}

impl PredictionSet {
    pub fn new(rows: Vec<PredictionRow>) -> Result<Self, ConcordanceError> {
        let mut seen = BTreeSet::new();
        for r in &rows {
            if !seen.insert(r.slide_id.clone()) {
                return Err(ConcordanceError::DuplicateSlide(r.slide_id.clone()));
            }
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[PredictionRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn cohorts(&self) -> Vec<String> {
        let mut out: Vec<String> = self.rows.iter().map(|r| r.cohort.clone()).collect();
        out.sort();
        out.dedup();
        out
    }

    pub fn filter_cohort(&self, cohort: &str) -> PredictionSet {
        PredictionSet { rows: self.rows.iter().filter(|r| r.cohort == cohort).cloned().collect() }
    }

    /// Drops the slides flagged by the failure taxonomy (either method
    /// detected nothing) before any kappa computation.
    pub fn drop_excluded(&self, excluded_slide_ids: &[String]) -> PredictionSet {
        let excluded: BTreeSet<&str> = excluded_slide_ids.iter().map(String::as_str).collect();
        PredictionSet {
            rows: self.rows.iter().filter(|r| !excluded.contains(r.slide_id.as_str())).cloned().collect(),
        }
    }
}

/// Quadratic weighted kappa over `n_categories` ordinal categories:
/// weights (i-j)^2/(n-1)^2, observed proportions against the outer product
/// of the marginals. Degenerate data with zero expected disagreement
/// scores 1.0.
pub fn qwk(
    truth: &[GradeLabel],
    pred: &[GradeLabel],
    n_categories: usize,
) -> Result<f64, ConcordanceError> {
    if truth.is_empty() {
        return Err(ConcordanceError::EmptyInput("grade lists"));
    }
    if truth.len() != pred.len() {
        return Err(ConcordanceError::LengthMismatch { truth: truth.len(), pred: pred.len() });
    }
    assert!(n_categories >= 2, "need at least 2 categories");
    let n = n_categories;
    let mut observed = vec![0u64; n * n];
    for (&t, &p) in truth.iter().zip(pred) {
        for g in [t, p] {
            if g.value() as usize >= n {
                return Err(ConcordanceError::GradeOutOfRange { grade: g.value(), categories: n });
            }
        }
        observed[t.value() as usize * n + p.value() as usize] += 1;
    }
    let total = truth.len() as f64;
    let mut truth_marginal = vec![0.0; n];
    let mut pred_marginal = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            let o = observed[i * n + j] as f64 / total;
            truth_marginal[i] += o;
            pred_marginal[j] += o;
        }
    }
    let w = |i: usize, j: usize| {
        let d = i as f64 - j as f64;
        d * d / ((n - 1) as f64 * (n - 1) as f64)
    };
    let mut weighted_observed = 0.0;
    let mut weighted_expected = 0.0;
    for i in 0..n {
        for j in 0..n {
            weighted_observed += w(i, j) * observed[i * n + j] as f64 / total;
            weighted_expected += w(i, j) * truth_marginal[i] * pred_marginal[j];
        }
    }
    if weighted_expected == 0.0 {
        // Zero expected disagreement implies zero observed disagreement.
        return Ok(1.0);
    }
    Ok(1.0 - weighted_observed / weighted_expected)
}

/// Kappa point estimate with a bootstrap confidence interval.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KappaResult {
    pub kappa: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_cases: usize,
    pub replicates: usize,
}

/// Bootstraps the quadratic weighted kappa of one method against the
/// reference grades, resampling `group_id` units with replacement.
/// Percentile 95% interval; deterministic for a fixed seed.
pub fn bootstrap_kappa(
    ps: &PredictionSet,
    method: Method,
    replicates: usize,
    seed: u64,
) -> Result<KappaResult, ConcordanceError> {
    if ps.is_empty() {
        return Err(ConcordanceError::EmptyInput("prediction set"));
    }
    let lists = |rows: &[&PredictionRow]| -> (Vec<GradeLabel>, Vec<GradeLabel>) {
        (rows.iter().map(|r| r.truth).collect(), rows.iter().map(|r| r.pred(method)).collect())
    };
    let all: Vec<&PredictionRow> = ps.rows().iter().collect();
    let (truth, pred) = lists(&all);
    let kappa = qwk(&truth, &pred, ISUP_CATEGORIES)?;

    let mut groups: Vec<&str> = ps.rows().iter().map(|r| r.group_id.as_str()).collect();
    groups.sort();
    groups.dedup();
    let members: Vec<Vec<&PredictionRow>> = groups
        .iter()
        .map(|g| ps.rows().iter().filter(|r| r.group_id == *g).collect())
        .collect();

    let mut rng = stats::seeded_rng(seed);
    let mut replicate_kappas = Vec::with_capacity(replicates);
    for _ in 0..replicates {
        let mut rows: Vec<&PredictionRow> = Vec::with_capacity(ps.len());
        for _ in 0..groups.len() {
            let pick = (rng.next_u64() % groups.len() as u64) as usize;
            rows.extend(members[pick].iter().copied());
        }
        let (t, p) = lists(&rows);
        replicate_kappas.push(qwk(&t, &p, ISUP_CATEGORIES)?);
    }
    replicate_kappas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(KappaResult {
        kappa,
        ci_low: stats::percentile(&replicate_kappas, 2.5),
        ci_high: stats::percentile(&replicate_kappas, 97.5),
        n_cases: ps.len(),
        replicates,
    })
}

/// How grades combine when pooling slides of one location or patient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolReducer {
    /// Highest grade governs.
    Max,
    /// Most frequent grade, ties toward the higher grade.
    Majority,
}

impl PoolReducer {
    fn reduce(&self, grades: &[GradeLabel]) -> GradeLabel {
        match self {
            PoolReducer::Max => *grades.iter().max().expect("groups are nonempty"),
            PoolReducer::Majority => majority_vote(grades).expect("groups are nonempty"),
        }
    }
}

/// Pools rows sharing a `group_id` into one row per group; truth and each
/// prediction column reduce independently. Singleton groups pass through
/// unchanged; pooled rows take the group id as their slide id and the
/// cohort of their first member in input order.
pub fn pool_predictions(ps: &PredictionSet, reducer: PoolReducer) -> PredictionSet {
    let mut order: Vec<&str> = Vec::new();
    for r in ps.rows() {
        if !order.contains(&r.group_id.as_str()) {
            order.push(&r.group_id);
        }
    }
    let rows = order
        .iter()
        .map(|g| {
            let members: Vec<&PredictionRow> = ps.rows().iter().filter(|r| r.group_id == *g).collect();
            if members.len() == 1 {
                return members[0].clone();
            }
            let col = |get: fn(&PredictionRow) -> GradeLabel| {
                reducer.reduce(&members.iter().map(|r| get(r)).collect::<Vec<_>>())
            };
            PredictionRow {
                slide_id: g.to_string(),
                group_id: g.to_string(),
                cohort: members[0].cohort.clone(),
                truth: col(|r| r.truth),
                pred_a: col(|r| r.pred_a),
                pred_b: col(|r| r.pred_b),
            }
        })
        .collect();
    PredictionSet { rows }
}

/// Most frequent label; ties break toward the higher grade.
pub fn majority_vote(votes: &[GradeLabel]) -> Result<GradeLabel, ConcordanceError> {
    if votes.is_empty() {
        return Err(ConcordanceError::EmptyInput("votes"));
    }
    let mut counts = [0usize; ISUP_CATEGORIES];
    for v in votes {
        counts[v.value() as usize] += 1;
    }
    // max_by_key keeps the last maximum, so ascending order breaks ties
    // toward the higher grade.
    let winner = (0..ISUP_CATEGORIES)
        .max_by_key(|&g| counts[g])
        .expect("categories are nonempty");
    Ok(GradeLabel(winner as u8))
}

/// Slides where the two tissue-detection variants led to different grade
/// predictions, counted overall and among malignant slides (truth >= 1).
#[derive(Debug, Clone, Serialize)]
pub struct DiscordanceReport {
    pub n_total: usize,
    pub n_discordant: usize,
    pub n_malignant: usize,
    pub n_discordant_malignant: usize,
    pub slides: Vec<DiscordantSlide>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DiscordantSlide {
    pub slide_id: String,
    pub cohort: String,
    pub truth: GradeLabel,
    pub pred_a: GradeLabel,
    pub pred_b: GradeLabel,
}

impl DiscordanceReport {
    pub fn overall_rate(&self) -> f64 {
        if self.n_total == 0 {
            0.0
        } else {
            self.n_discordant as f64 / self.n_total as f64
        }
    }

    pub fn malignant_rate(&self) -> f64 {
        if self.n_malignant == 0 {
            0.0
        } else {
            self.n_discordant_malignant as f64 / self.n_malignant as f64
        }
    }
}

pub fn discordance_report(ps: &PredictionSet) -> DiscordanceReport {
    let mut slides = Vec::new();
    let mut n_malignant = 0usize;
    let mut n_discordant_malignant = 0usize;
    for r in ps.rows() {
        let malignant = r.truth.is_malignant();
        n_malignant += malignant as usize;
        if r.pred_a != r.pred_b {
            if malignant {
                n_discordant_malignant += 1;
            }
            slides.push(DiscordantSlide {
                slide_id: r.slide_id.clone(),
                cohort: r.cohort.clone(),
                truth: r.truth,
                pred_a: r.pred_a,
                pred_b: r.pred_b,
            });
        }
    }
    DiscordanceReport {
        n_total: ps.len(),
        n_discordant: slides.len(),
        n_malignant,
        n_discordant_malignant,
        slides,
    }
}

/// Reads the predictions CSV with columns
/// `slide_id,group_id,cohort,truth_isup,pred_isup_a,pred_isup_b`.
/// Lines starting with `#` are ignored.
pub fn read_predictions_csv<R: Read>(reader: R) -> Result<PredictionSet, ConcordanceError> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(reader);
    let expected = ["slide_id", "group_id", "cohort", "truth_isup", "pred_isup_a", "pred_isup_b"];
    {
        let headers = rdr.headers().map_err(|e| ConcordanceError::Csv { record: 0, reason: e.to_string() })?;
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(ConcordanceError::Csv {
                record: 0,
                reason: format!("header must be {}", expected.join(",")),
            });
        }
    }
    let mut rows = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| ConcordanceError::Csv { record: i + 1, reason: e.to_string() })?;
        if record.len() != expected.len() {
            return Err(ConcordanceError::Csv {
                record: i + 1,
                reason: format!("expected {} fields, got {}", expected.len(), record.len()),
            });
        }
        let grade = |field: usize| -> Result<GradeLabel, ConcordanceError> {
            let raw = record.get(field).unwrap_or("").trim();
            let v: i64 = raw.parse().map_err(|_| ConcordanceError::Csv {
                record: i + 1,
                reason: format!("`{raw}` is not an integer grade"),
            })?;
            GradeLabel::new(v)
        };
        rows.push(PredictionRow {
            slide_id: record[0].to_string(),
            group_id: record[1].to_string(),
            cohort: record[2].to_string(),
            truth: grade(3)?,
            pred_a: grade(4)?,
            pred_b: grade(5)?,
        });
    }
    PredictionSet::new(rows)
}

/// Writes the discordant slides as CSV.
pub fn write_discordance_csv<W: Write>(w: W, report: &DiscordanceReport) -> Result<(), ConcordanceError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["slide_id", "cohort", "truth_isup", "pred_isup_a", "pred_isup_b"])
        .map_err(|e| ConcordanceError::Csv { record: 0, reason: e.to_string() })?;
    for s in &report.slides {
        out.write_record([
            s.slide_id.clone(),
            s.cohort.clone(),
            s.truth.value().to_string(),
            s.pred_a.value().to_string(),
            s.pred_b.value().to_string(),
        ])
        .map_err(|e| ConcordanceError::Csv { record: 0, reason: e.to_string() })?;
    }
    out.flush()?;
    Ok(())
}
